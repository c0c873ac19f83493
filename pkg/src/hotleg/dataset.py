"""Scenario datasets: scaling, splits, folds, on-disk format and table import.

On disk a dataset is a directory::

    manifest.json    counts, dtype, endianness, parameter order, units,
                     provenance and a sha256 per blob
    coords.f32le     N x 3, row-major
    inputs.f32le     M x n
    fields.f32le     M x 3 x N, row-major

In memory every array is float64.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import PARAM_ORDER
from .errors import (
    CorruptionError,
    DegenerateChannelError,
    IngestionError,
    InvalidArgumentError,
    ShapeError,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
UNITS = {
    "coords": "m (model scale)",
    "inputs": "m/s (assumed, model scale)",
    "P": "Pa (assumed)",
    "V_o": "m/s",
    "k": "m^2/s^2",
}
_BLOBS = ("coords", "inputs", "fields")


@dataclass
class ScenarioDataset:
    coords: np.ndarray          # (N, 3)
    inputs: np.ndarray          # (M, n)
    fields: np.ndarray          # (M, 3, N) ordered P, V_o, k
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        n_pts, m = self.coords.shape[0], self.inputs.shape[0]
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be N x 3, got {self.coords.shape}")
        if n_pts < 1 or m < 1:
            raise ShapeError("dataset needs at least one node and one scenario")
        if self.fields.shape != (m, len(PARAM_ORDER), n_pts):
            raise ShapeError(f"fields shape {self.fields.shape} != {(m, 3, n_pts)}")
        for name in _BLOBS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidArgumentError(f"non-finite values in {name}")
        if np.unique(self.coords, axis=0).shape[0] != n_pts:
            raise InvalidArgumentError("coordinate rows are not unique")
        self.meta.setdefault("parameter_order", list(PARAM_ORDER))

    @property
    def n_scenarios(self):
        return self.inputs.shape[0]

    @property
    def n_points(self):
        return self.coords.shape[0]

    def take(self, indices, role=None):
        """Subset of scenarios; ``role`` tags the partition ("train"/"test")."""
        indices = np.asarray(indices, dtype=np.int64)
        meta = dict(self.meta)
        meta["parent_indices"] = indices.tolist()
        meta["parent_sha256"] = self.fingerprint()
        if role is not None:
            meta["role"] = role
        return ScenarioDataset(self.coords, self.inputs[indices], self.fields[indices], meta)

    @property
    def role(self):
        return self.meta.get("role")

    def fingerprint(self):
        """sha256 over the float32 little-endian blobs, as written to disk."""
        h = hashlib.sha256()
        for name in _BLOBS:
            h.update(_f32(getattr(self, name)))
        return h.hexdigest()

    def subsample_nodes(self, step=4):
        """Every ``step``-th node after a canonical (x, y, z) sort."""
        order = canonical_order(self.coords)[::step]
        meta = dict(self.meta)
        meta.pop("grid", None)
        meta["node_subsample"] = {"step": step, "from_n_points": self.n_points}
        return ScenarioDataset(self.coords[order], self.inputs, self.fields[:, :, order], meta)


def canonical_order(coords):
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# --- scaling ----------------------------------------------------------------


@dataclass
class ScalerParams:
    """Min/max per channel: the inlet input(s), each field, each coordinate axis."""

    input_min: np.ndarray
    input_max: np.ndarray
    field_min: np.ndarray
    field_max: np.ndarray
    coord_min: np.ndarray
    coord_max: np.ndarray

    def __post_init__(self):
        for name in ("input_min", "input_max", "field_min", "field_max", "coord_min", "coord_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in (
            "input_min", "input_max", "field_min", "field_max", "coord_min", "coord_max")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    # coordinate axes may be constant (the centre plane has z = 0); they are
    # shifted but not stretched
    def _coord_span(self):
        span = self.coord_max - self.coord_min
        return np.where(span > 0, span, 1.0)

    def scale_inputs(self, u):
        return minmax_apply(u, self.input_min, self.input_max)

    def unscale_inputs(self, s):
        return minmax_invert(s, self.input_min, self.input_max)

    def scale_fields(self, y):
        return minmax_apply(y, self.field_min[:, None], self.field_max[:, None])

    def unscale_fields(self, s):
        return minmax_invert(s, self.field_min[:, None], self.field_max[:, None])

    def scale_coords(self, c):
        return (np.asarray(c, dtype=np.float64) - self.coord_min) / self._coord_span()

    def unscale_coords(self, s):
        return np.asarray(s, dtype=np.float64) * self._coord_span() + self.coord_min


def minmax_apply(x, lo, hi):
    x = np.asarray(x, dtype=np.float64)
    out = (x - lo) / (hi - lo)
    if out.size and (out.min() < 0.0 or out.max() > 1.0):
        log.debug("scaling outside the fitted range (extrapolating)")
    return out


def minmax_invert(s, lo, hi):
    return np.asarray(s, dtype=np.float64) * (hi - lo) + lo


def fit_scaler(dataset, train_indices=None):
    """Channel-wise min/max over the training scenarios only."""
    if train_indices is None:
        train_indices = np.arange(dataset.n_scenarios)
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise InvalidArgumentError("train indices are empty")
    u = dataset.inputs[train_indices]
    y = dataset.fields[train_indices]
    params = ScalerParams(
        input_min=u.min(axis=0), input_max=u.max(axis=0),
        field_min=y.min(axis=(0, 2)), field_max=y.max(axis=(0, 2)),
        coord_min=dataset.coords.min(axis=0), coord_max=dataset.coords.max(axis=0),
    )
    names = [f"u{i}" for i in range(u.shape[1])] + list(PARAM_ORDER)
    lo = np.concatenate([params.input_min, params.field_min])
    hi = np.concatenate([params.input_max, params.field_max])
    bad = [n for n, a, b in zip(names, lo, hi) if not b > a]
    if bad:
        raise DegenerateChannelError(f"constant channel(s) cannot be min-max scaled: {bad}")
    return params


def apply_scaler(values, params, kind="fields"):
    return getattr(params, f"scale_{kind}")(values)


def invert_scaler(values, params, kind="fields"):
    return getattr(params, f"unscale_{kind}")(values)


# --- splits -----------------------------------------------------------------


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidArgumentError(f"train fraction must be in (0, 1), got {self.train_fraction}")


def split_dataset(dataset, spec):
    """Seeded shuffle then partition into (train, test) index arrays, each sorted."""
    m = dataset if isinstance(dataset, (int, np.integer)) else dataset.n_scenarios
    if m < 2:
        raise InvalidArgumentError("need at least two scenarios to split")
    perm = np.random.default_rng(spec.seed).permutation(m)
    n_train = min(max(int(round(spec.train_fraction * m)), 1), m - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def kfold_indices(train_indices, k, seed):
    """k (train, validation) pairs; validation folds partition ``train_indices``."""
    idx = np.asarray(train_indices, dtype=np.int64)
    if k < 2:
        raise InvalidArgumentError("k must be >= 2")
    if k > idx.size:
        raise InvalidArgumentError(f"k={k} exceeds the {idx.size} available scenarios")
    shuffled = idx[np.random.default_rng(seed).permutation(idx.size)]
    folds = np.array_split(shuffled, k)
    pairs = []
    for i, val in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        pairs.append((np.sort(train), np.sort(val)))
    return pairs


# --- persistence --------------------------------------------------------------


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in _BLOBS:
        arr = getattr(dataset, name)
        data = _f32(arr)
        _atomic_write(path / f"{name}.f32le", data)
        files[name] = {
            "file": f"{name}.f32le",
            "shape": list(arr.shape),
            "bytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "counts": {
            "scenarios": dataset.n_scenarios,
            "points": dataset.n_points,
            "input_dim": dataset.inputs.shape[1],
            "parameters": len(PARAM_ORDER),
        },
        "dtype": "float32",
        "endianness": "little",
        "parameter_order": list(PARAM_ORDER),
        "units": UNITS,
        "provenance": {k: v for k, v in dataset.meta.items() if k != "parameter_order"},
        "files": files,
        "dataset_sha256": dataset.fingerprint(),
    }
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=2).encode())
    return path


def load_dataset(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CorruptionError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptionError(f"unsupported dataset format {manifest.get('format_version')}")
    if manifest.get("parameter_order") != list(PARAM_ORDER):
        raise CorruptionError(f"unexpected parameter order {manifest.get('parameter_order')}")
    arrays = {}
    for name in _BLOBS:
        info = manifest["files"][name]
        fpath = path / info["file"]
        if not fpath.exists():
            raise CorruptionError(f"missing blob file: {fpath}")
        data = fpath.read_bytes()
        shape = tuple(info["shape"])
        if len(data) != 4 * int(np.prod(shape)) or len(data) != info["bytes"]:
            raise CorruptionError(f"{fpath.name}: expected {info['bytes']} bytes, found {len(data)}")
        if hashlib.sha256(data).hexdigest() != info["sha256"]:
            raise CorruptionError(f"{fpath.name}: checksum mismatch")
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)
    meta = dict(manifest.get("provenance", {}))
    ds = ScenarioDataset(arrays["coords"], arrays["inputs"], arrays["fields"], meta)
    ds.meta["source_path"] = str(path)
    return ds


# --- table import -----------------------------------------------------------

DEFAULT_COLUMNS = {
    "scenario": "scenario", "v_in": "v_in",
    "x": "x", "y": "y", "z": "z",
    "P": "P", "V_o": "V_o", "k": "k",
}


def import_table(path, columns=None, delimiter=None):
    """Build a dataset from a long-format comma- or tab-delimited table.

    One row per (scenario, node). Every scenario must carry the same node set;
    nodes are put in canonical (x, y, z) order.
    """
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    path = Path(path)
    text = path.read_text()
    if delimiter is None:
        first = text.splitlines()[0] if text else ""
        delimiter = "\t" if "\t" in first else ","
    reader = csv.DictReader(text.splitlines(), delimiter=delimiter)
    missing = [c for c in cols.values() if c not in (reader.fieldnames or [])]
    if missing:
        raise IngestionError(f"{path.name}: missing column(s) {missing}")

    rows_by_scenario: dict[str, list] = {}
    v_by_scenario: dict[str, float] = {}
    for lineno, row in enumerate(reader, start=2):
        sid = row[cols["scenario"]].strip()
        try:
            values = [float(row[cols[c]]) for c in ("x", "y", "z", *PARAM_ORDER)]
            v = float(row[cols["v_in"]])
        except (TypeError, ValueError) as exc:
            raise IngestionError(f"{path.name}:{lineno}: unparsable value ({exc})") from None
        if sid in v_by_scenario and v_by_scenario[sid] != v:
            raise IngestionError(f"scenario {sid}: inlet velocity differs between rows")
        v_by_scenario[sid] = v
        rows_by_scenario.setdefault(sid, []).append(values)
    if not rows_by_scenario:
        raise IngestionError(f"{path.name}: no data rows")

    ids = list(rows_by_scenario)
    ref_coords, fields, offending = None, [], []
    for sid in ids:
        arr = np.asarray(rows_by_scenario[sid], dtype=np.float64)
        order = canonical_order(arr[:, :3])
        arr = arr[order]
        if np.unique(arr[:, :3], axis=0).shape[0] != arr.shape[0]:
            raise IngestionError(f"scenario {sid}: duplicate coordinate rows")
        if ref_coords is None:
            ref_coords = arr[:, :3]
        elif arr.shape[0] != ref_coords.shape[0] or not np.array_equal(arr[:, :3], ref_coords):
            offending.append(sid)
            continue
        fields.append(arr[:, 3:].T)
    if offending:
        raise IngestionError(
            f"node sets differ from scenario {ids[0]} in scenario(s): {', '.join(offending)}")
    inputs = np.array([[v_by_scenario[s]] for s in ids])
    meta = {"source": {"kind": "table", "path": str(path), "scenario_ids": ids}}
    return ScenarioDataset(ref_coords, inputs, np.stack(fields), meta)
