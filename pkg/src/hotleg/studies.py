"""Heads-vs-vanilla ablation and split / node-count robustness sweeps."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import PARAM_ORDER
from .dataset import SplitSpec, fit_scaler, split_dataset
from .deeponet import DeepOnetConfig, build_deeponet, count_params
from .evalbench import evaluate_model
from .training import train

log = logging.getLogger(__name__)


@dataclass
class StudyRow:
    label: str
    report: object          # MetricsReport
    n_params: int
    epochs: int
    wall_time: float
    n_points: int
    train_fraction: float

    def to_dict(self):
        return {"label": self.label, "n_params": self.n_params, "epochs": self.epochs,
                "wall_time": self.wall_time, "n_points": self.n_points,
                "train_fraction": self.train_fraction, "metrics": self.report.to_dict()}


def run_case(label, dataset, model_cfg, train_cfg, train_fraction, split_seed=0, space="scaled"):
    """Split, fit the scaler on the training part, train and evaluate on the rest."""
    tr, te = split_dataset(dataset.n_scenarios, SplitSpec(train_fraction, split_seed))
    model = build_deeponet(model_cfg)
    model.scaler = fit_scaler(dataset, tr)
    model.coords = dataset.coords.copy()
    t0 = time.perf_counter()
    train(model, dataset.take(tr, role="train"), None, train_cfg)
    wall = time.perf_counter() - t0
    ev = evaluate_model(model, dataset.take(te, role="test"), space=space)
    log.info("%s: rel_l2 %s (%.0f s)", label,
             [round(ev.report.get(p, "rel_l2"), 5) for p in PARAM_ORDER], wall)
    return StudyRow(label, ev.report, int(model.params.size), train_cfg.epochs, wall,
                    dataset.n_points, train_fraction), model


# --- ablation ---------------------------------------------------------------


def matched_vanilla_width(n_points, budget, branch_layers=11, trunk_layers=10, **kw):
    """Width whose heads-free network has the parameter count closest to ``budget``."""
    def count(w):
        return count_params(DeepOnetConfig.vanilla(n_points, w, branch_layers, trunk_layers, **kw))

    lo, hi = 1, 2
    while count(hi) < budget:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) < budget:
            lo = mid
        else:
            hi = mid
    # pick whichever neighbour is closer to the budget
    return lo if abs(count(lo) - budget) < abs(count(hi) - budget) else hi


@dataclass
class AblationReport:
    heads: StudyRow
    vanilla: StudyRow

    def wins(self, metric="rel_l2"):
        """Parameters where the heads model is at least as good as vanilla."""
        return [p for p in PARAM_ORDER
                if self.heads.report.get(p, metric) <= self.vanilla.report.get(p, metric)]

    def to_dict(self):
        return {"heads": self.heads.to_dict(), "vanilla": self.vanilla.to_dict(),
                "heads_wins_rel_l2": self.wins()}

    def table(self):
        lines = ["parameter,metric,vanilla_avg,vanilla_std,vanilla_max,heads_avg,heads_std,heads_max"]
        for p in PARAM_ORDER:
            for m in ("mse", "rel_l2"):
                vals = [self.vanilla.report.get(p, m, s) for s in ("average", "std", "max")]
                vals += [self.heads.report.get(p, m, s) for s in ("average", "std", "max")]
                lines.append(f"{p},{m}," + ",".join(f"{v:.6e}" for v in vals))
        return "\n".join(lines)


def ablation(dataset, train_cfg, train_fraction=0.8, split_seed=0,
             branch_layers=11, trunk_layers=10, heads_row=None):
    """Heads model against a deeper heads-free model of (nearly) equal size.

    ``heads_row`` reuses an already evaluated heads run with the same data,
    split and training config instead of training it again.
    """
    heads_cfg = train_cfg.model_config(dataset.n_points, with_heads=True)
    budget = count_params(heads_cfg)
    width = matched_vanilla_width(dataset.n_points, budget, branch_layers, trunk_layers,
                                  dropout_rate=train_cfg.dropout_rate, seed=train_cfg.seed)
    vanilla_cfg = DeepOnetConfig.vanilla(dataset.n_points, width, branch_layers, trunk_layers,
                                         dropout_rate=train_cfg.dropout_rate, seed=train_cfg.seed)
    log.info("ablation budget %d, vanilla width %d -> %d params", budget, width,
             count_params(vanilla_cfg))
    heads = heads_row
    if heads is None:
        heads, _ = run_case("heads", dataset, heads_cfg, train_cfg, train_fraction, split_seed)
    vanilla, _ = run_case("vanilla", dataset, vanilla_cfg, train_cfg, train_fraction, split_seed)
    return AblationReport(heads, vanilla)


# --- robustness ---------------------------------------------------------------


@dataclass
class RobustnessReport:
    baseline: StudyRow
    rows: list

    def deviations(self):
        """Relative deviation of every row's averages from the baseline, (rows, 3, 3)."""
        base = self.baseline.report.average
        return np.stack([(r.report.average - base) / base for r in self.rows])

    def within(self, tol=0.25):
        return bool(np.all(np.abs(self.deviations()) <= tol))

    def to_dict(self):
        return {"baseline": self.baseline.label, "rows": [r.to_dict() for r in self.rows],
                "max_abs_deviation": float(np.max(np.abs(self.deviations())))}

    def table(self, metric):
        lines = [f"case,n_points,train_fraction," + ",".join(f"{p}_avg,{p}_std" for p in PARAM_ORDER)]
        for r in self.rows:
            vals = []
            for p in PARAM_ORDER:
                vals += [r.report.get(p, metric), r.report.get(p, metric, "std")]
            lines.append(f"{r.label},{r.n_points},{r.train_fraction}," +
                         ",".join(f"{v:.6e}" for v in vals))
        return "\n".join(lines)


def robustness(dataset, train_cfg, splits=(0.7, 0.8, 0.9), node_steps=(1, 4),
               baseline_split=0.8, split_seed=0, baseline_row=None):
    """Split sweep at full resolution plus node-count sweep at the baseline split.

    ``baseline_row`` stands in for the baseline-split, full-N case when it has
    already been trained and evaluated with the same settings.
    """
    cases = [(f, 1) for f in splits] + [(baseline_split, s) for s in node_steps if s != 1]
    if (baseline_split, 1) not in cases:
        cases.insert(0, (baseline_split, 1))
    rows = []
    for frac, step in cases:
        ds = dataset if step == 1 else dataset.subsample_nodes(step)
        label = f"split{round(frac * 100)}-N{ds.n_points}"
        if baseline_row is not None and (frac, step) == (baseline_split, 1):
            rows.append(baseline_row)
            continue
        cfg = train_cfg.model_config(ds.n_points, with_heads=True)
        row, _ = run_case(label, ds, cfg, train_cfg, frac, split_seed)
        rows.append(row)
    base = next(r for (f, s), r in zip(cases, rows) if f == baseline_split and s == 1)
    return RobustnessReport(base, rows)

