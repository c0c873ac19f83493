import numpy as np
import pytest

from hotleg.dataset import SplitSpec, split_dataset
from hotleg.flowgen import generate_dataset
from hotleg.training import TrainConfig, fit_model

SMALL = TrainConfig(epochs=5, batch_size=4, branch_hidden=(16, 16), trunk_hidden=(16, 8))


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(24, seed=3).subsample_nodes(30)


@pytest.fixture(scope="session")
def small_fit(small_data):
    """(dataset, train_idx, test_idx, model) for a few-epoch toy model."""
    tr, te = split_dataset(small_data.n_scenarios, SplitSpec(0.75, 0))
    model, _ = fit_model(small_data, tr, SMALL)
    return small_data, tr, te, model


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line per criterion; printed at the end of the run."""
    def record(number, name, passed, detail):
        line = f"criterion {str(number):>3} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE[str(number)] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        order = lambda k: (int("".join(c for c in k if c.isdigit())), k)
        for key in sorted(ACCEPTANCE, key=order):
            terminalreporter.write_line(ACCEPTANCE[key])
