"""Error metrics, evaluation reports, inference timing and artifact export.

Metrics are computed in the min-max scaled space unless asked otherwise;
every report carries a ``space`` label so the two are never mixed up.
"""
from __future__ import annotations

import csv
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import PARAM_ORDER
from .deeponet import forward_with_cache, predict
from .errors import InvalidArgumentError, LeakageError, ShapeError, UndefinedMetricError

METRICS = ("mse", "mae", "rel_l2")
FVM_SECONDS = 200.0     # reference CFD wall time per simulation, not measured here
HIST_BINS = 30
QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class ScenarioMetrics:
    values: np.ndarray          # (3 parameters, 3 metrics) in PARAM_ORDER x METRICS
    space: str = "scaled"

    def get(self, param, metric):
        return float(self.values[PARAM_ORDER.index(param), METRICS.index(metric)])

    def to_dict(self):
        return {p: {m: self.get(p, m) for m in METRICS} for p in PARAM_ORDER}


def scenario_metrics(truth, prediction, space="scaled", metrics=METRICS):
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if truth.shape != prediction.shape or truth.ndim != 2 or truth.shape[0] != len(PARAM_ORDER):
        raise ShapeError(f"expected matching (3, N) arrays, got {truth.shape} and {prediction.shape}")
    err = truth - prediction
    n = truth.shape[1]
    out = np.full((len(PARAM_ORDER), len(METRICS)), np.nan)
    out[:, 0] = np.sum(err * err, axis=1) / n
    out[:, 1] = np.sum(np.abs(err), axis=1) / n
    if "rel_l2" in metrics:
        norm = np.sqrt(np.sum(truth * truth, axis=1))
        zero = norm == 0
        if zero.any():
            names = [PARAM_ORDER[i] for i in np.flatnonzero(zero)]
            raise UndefinedMetricError(f"relative L2 undefined for all-zero truth in {names}")
        out[:, 2] = np.sqrt(np.sum(err * err, axis=1)) / norm
    return ScenarioMetrics(out, space)


@dataclass
class MetricsReport:
    average: np.ndarray
    std: np.ndarray
    maximum: np.ndarray
    m: int
    space: str = "scaled"

    def get(self, param, metric, stat="average"):
        table = {"average": self.average, "std": self.std, "max": self.maximum}[stat]
        return float(table[PARAM_ORDER.index(param), METRICS.index(metric)])

    def to_dict(self):
        return {
            "space": self.space,
            "m": self.m,
            "parameters": {
                p: {m: {s: self.get(p, m, s) for s in ("average", "std", "max")} for m in METRICS}
                for p in PARAM_ORDER
            },
        }

    @classmethod
    def from_dict(cls, d):
        arr = {s: np.array([[d["parameters"][p][m][s] for m in METRICS] for p in PARAM_ORDER])
               for s in ("average", "std", "max")}
        return cls(arr["average"], arr["std"], arr["max"], d["m"], d["space"])

    def table(self):
        """Rows per parameter: average (std) and maximum for each metric."""
        lines = [f"# metrics in {self.space} space over {self.m} scenarios",
                 "parameter," + ",".join(f"{m}_avg,{m}_std,{m}_max" for m in METRICS)]
        for p in PARAM_ORDER:
            cells = []
            for m in METRICS:
                cells += [f"{self.get(p, m, s):.6e}" for s in ("average", "std", "max")]
            lines.append(p + "," + ",".join(cells))
        return "\n".join(lines)


def aggregate_metrics(items):
    items = list(items)
    if not items:
        raise InvalidArgumentError("cannot aggregate an empty metric list")
    spaces = {it.space for it in items}
    if len(spaces) != 1:
        raise InvalidArgumentError(f"mixed metric spaces {sorted(spaces)}")
    stack = np.stack([it.values for it in items])
    return MetricsReport(stack.mean(axis=0), stack.std(axis=0), stack.max(axis=0),
                         len(items), spaces.pop())


@dataclass
class Evaluation:
    report: MetricsReport
    per_scenario: np.ndarray     # (M, 3, 3)
    predictions: np.ndarray      # (M, 3, N) in report space
    truth: np.ndarray
    inputs: np.ndarray

    def rows(self):
        for i in range(self.per_scenario.shape[0]):
            yield i, float(self.inputs[i, 0]), self.per_scenario[i]


def check_leakage(model, test_ds):
    if test_ds.role == "train":
        raise LeakageError("dataset is marked as a training partition")
    prov = model.provenance or {}
    if test_ds.fingerprint() == prov.get("data_sha256"):
        raise LeakageError("evaluation data is the model's training data")
    seen = prov.get("train_indices")
    parent = test_ds.meta.get("parent_sha256")
    if seen is not None and parent is not None and parent == prov.get("data_sha256"):
        overlap = np.intersect1d(seen, test_ds.meta.get("parent_indices", []))
        if overlap.size:
            raise LeakageError(f"{overlap.size} evaluation scenarios were used in training, "
                               f"e.g. {overlap[:5].tolist()}")


def evaluate_model(model, test_ds, space="scaled", check=True, chunk=64):
    if test_ds.n_points != model.n_points:
        raise ShapeError(f"model has {model.n_points} nodes, dataset {test_ds.n_points}")
    if check:
        check_leakage(model, test_ds)
    coords = model.scaled_coords()
    preds = []
    for i in range(0, test_ds.n_scenarios, chunk):
        u = model.scaler.scale_inputs(test_ds.inputs[i:i + chunk])
        z, _ = forward_with_cache(model, u, coords)
        preds.append(np.asarray(z, dtype=np.float64))
    pred = np.concatenate(preds)
    truth = test_ds.fields.astype(np.float64)
    if space == "scaled":
        truth = model.scaler.scale_fields(truth)
    elif space == "physical":
        pred = model.scaler.unscale_fields(pred)
    else:
        raise InvalidArgumentError(f"unknown metric space {space!r}")
    items = [scenario_metrics(t, p, space) for t, p in zip(truth, pred)]
    return Evaluation(aggregate_metrics(items), np.stack([it.values for it in items]),
                      pred, truth, test_ds.inputs)


# --- timing -----------------------------------------------------------------


def cpu_model():
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


@dataclass
class TimingReport:
    times: list
    environment: dict = field(default_factory=dict)
    fvm_seconds: float = FVM_SECONDS

    @property
    def median(self):
        return float(statistics.median(self.times))

    @property
    def mean(self):
        return float(statistics.fmean(self.times))

    @property
    def speedup(self):
        return self.fvm_seconds / self.median

    def to_dict(self):
        return {"times": self.times, "median": self.median, "mean": self.mean,
                "min": min(self.times), "max": max(self.times),
                "fvm_seconds": self.fvm_seconds, "speedup": self.speedup,
                "speedup_note": "reference CFD time is a fixed input constant, not measured",
                "environment": self.environment}


def time_inference(model, v_in=0.73, repetitions=10, warmup=3, threads=1, fvm_seconds=FVM_SECONDS):
    """Wall time of complete single-scenario inference (scale, forward, unscale)."""
    from threadpoolctl import threadpool_limits

    if repetitions < 1 or warmup < 0:
        raise InvalidArgumentError("repetitions must be >= 1 and warmup >= 0")
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            predict(model, v_in)
        for _ in range(repetitions):
            t0 = time.perf_counter()
            predict(model, v_in)
            times.append(time.perf_counter() - t0)
    env = {"cpu": cpu_model(), "threads": threads, "logical_cpus": os.cpu_count(),
           "numpy": np.__version__, "dtype": str(model.dtype), "n_points": model.n_points,
           "n_params": int(model.params.size), "python": platform.python_version()}
    return TimingReport(times, env, fvm_seconds)


# --- artifacts ----------------------------------------------------------------

# viridis-like ramp, 8 stops from low to high
RAMP = np.array([
    [68, 1, 84], [70, 50, 126], [54, 92, 141], [39, 127, 142],
    [31, 161, 135], [74, 193, 109], [160, 218, 57], [253, 231, 37],
], dtype=np.float64)


def ramp_colour(t):
    """Map values in [0, 1] to '#rrggbb' by linear interpolation between stops."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * (len(RAMP) - 1)
    lo = np.minimum(np.floor(t).astype(int), len(RAMP) - 2)
    frac = (t - lo)[..., None]
    rgb = np.rint(RAMP[lo] * (1 - frac) + RAMP[lo + 1] * frac).astype(int)
    return ["#%02x%02x%02x" % tuple(c) for c in rgb.reshape(-1, 3)]


def select_cases(rel_l2, quantiles=QUANTILES):
    """Scenario indices at the given quantiles of the ordered errors (0 = best)."""
    order = np.argsort(rel_l2, kind="stable")
    return [int(order[int(round(q * (len(order) - 1)))]) for q in quantiles]


def histogram_table(values, bins=HIST_BINS):
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=(values.min(), values.max()))
    return counts, edges


def svg_heatmap(values, n_s, n_r, title="", cell=6):
    """Structured-grid heatmap; stations run left to right, chord bottom to top."""
    v = np.asarray(values, dtype=np.float64).reshape(n_s, n_r)
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else 1.0
    colours = ramp_colour((v - lo) / span)
    w, h = n_s * cell, n_r * cell
    bar = 14
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h + bar + 18}" '
             f'viewBox="0 0 {w} {h + bar + 18}">', f"<title>{title}</title>"]
    for i in range(n_s):
        for j in range(n_r):
            parts.append(f'<rect x="{i * cell}" y="{(n_r - 1 - j) * cell}" width="{cell}" '
                         f'height="{cell}" fill="{colours[i * n_r + j]}"/>')
    stops = ramp_colour(np.linspace(0, 1, len(RAMP)))
    sw = w / len(stops)
    for k, c in enumerate(stops):
        parts.append(f'<rect x="{k * sw:.2f}" y="{h + 4}" width="{sw:.2f}" height="{bar - 4}" fill="{c}"/>')
    parts.append(f'<text x="0" y="{h + bar + 14}" font-size="10">{lo:.4g}</text>')
    parts.append(f'<text x="{w}" y="{h + bar + 14}" font-size="10" text-anchor="end">{hi:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_artifacts(evaluation, coords, out_dir, grid=None, field_space="physical", scaler=None):
    """Per-scenario table, 30-bin histograms and field triplets for five cases.

    ``grid`` is ``(n_s, n_r)`` for SVG rendering; without it only CSVs are
    written. Field triplets are unscaled when ``scaler`` is given and the
    evaluation ran in scaled space.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev = evaluation
    written = []

    path = out / "per_scenario.csv"
    header = ["scenario", "v_in"] + [f"{p}_{m}" for p in PARAM_ORDER for m in METRICS]
    _write_csv(path, header, [[i, v] + [f"{x:.9e}" for x in vals.reshape(-1)]
                              for i, v, vals in ev.rows()])
    written.append(path)

    for pi, p in enumerate(PARAM_ORDER):
        for m in ("mse", "rel_l2"):
            counts, edges = histogram_table(ev.per_scenario[:, pi, METRICS.index(m)])
            path = out / f"hist_{p}_{m}.csv"
            _write_csv(path, ["bin_lo", "bin_hi", "count"],
                       [[f"{edges[b]:.9e}", f"{edges[b + 1]:.9e}", int(counts[b])]
                        for b in range(len(counts))])
            written.append(path)

    truth, pred = ev.truth, ev.predictions
    space = ev.report.space
    if field_space == "physical" and space == "scaled" and scaler is not None:
        truth, pred, space = scaler.unscale_fields(truth), scaler.unscale_fields(pred), "physical"
    fields_dir = out / "fields"
    fields_dir.mkdir(exist_ok=True)
    selection = {}
    for pi, p in enumerate(PARAM_ORDER):
        cases = select_cases(ev.per_scenario[:, pi, 2])
        selection[p] = cases
        for q, idx in zip(QUANTILES, cases):
            t, y = truth[idx, pi], pred[idx, pi]
            err = np.abs(t - y)
            stem = f"{p}_q{int(q * 100):03d}_s{idx}"
            path = fields_dir / f"{stem}.csv"
            _write_csv(path, ["x", "y", "true", "predicted", "abs_error"],
                       [[f"{c[0]:.9e}", f"{c[1]:.9e}", f"{a:.9e}", f"{b:.9e}", f"{e:.9e}"]
                        for c, a, b, e in zip(coords, t, y, err)])
            written.append(path)
            if grid is not None:
                for name, vals in (("true", t), ("predicted", y), ("abs_error", err)):
                    path = fields_dir / f"{stem}_{name}.svg"
                    path.write_text(svg_heatmap(vals, *grid, title=f"{p} {name} ({space})"))
                    written.append(path)
    return {"files": [str(p) for p in written], "selection": selection, "field_space": space}
