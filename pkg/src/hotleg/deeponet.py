"""Branch/trunk operator network with optional per-parameter linear heads.

The branch maps the (scaled) inlet velocity to one coefficient per node, the
trunk maps each (scaled) node coordinate to one value per output parameter.
They are fused by broadcasting over the parameter axis::

    fused[b, k, i] = branch(u_b)[i] * trunk(y_i)[k]

and, when heads are enabled, each parameter slice passes through its own
dense N x N affine map. Outputs have shape (batch, 3, N) in scaled space.

Every learnable value lives in one flat buffer whose order is also the
checkpoint blob order: branch layers (weights row-major, then bias), trunk
layers, then heads (weights row-major, then bias) for P, V_o, k.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import PARAM_ORDER
from .dataset import ScalerParams
from .errors import ConfigError, CorruptionError, InvalidArgumentError, ShapeError
from .nn import (
    DenseLayer,
    DropoutSpec,
    Mlp,
    build_mlp,
    compare_gradients,
    mlp_backward,
    mlp_forward,
    mlp_param_shapes,
    xavier_init,
)

CHECKPOINT_VERSION = 1
HEADER_FILE = "model.json"
BLOB_FILE = "weights.f32le"


@dataclass
class DeepOnetConfig:
    n_points: int
    n_input: int = 1
    n_params: int = 3
    branch_hidden: tuple = (512, 512, 512)
    trunk_hidden: tuple = (512, 512, 256)
    with_heads: bool = True
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.branch_hidden = tuple(int(h) for h in self.branch_hidden)
        self.trunk_hidden = tuple(int(h) for h in self.trunk_hidden)
        if not self.branch_hidden or not self.trunk_hidden:
            raise ConfigError("hidden layer lists must be non-empty")
        if min(self.branch_hidden + self.trunk_hidden) < 1:
            raise ConfigError("hidden widths must be >= 1")
        if self.n_points < 1 or self.n_input < 1 or self.n_params < 1:
            raise ConfigError("n_points, n_input and n_params must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def branch_sizes(self):
        return [self.n_input, *self.branch_hidden, self.n_points]

    @property
    def trunk_sizes(self):
        return [3, *self.trunk_hidden, self.n_params]

    def to_dict(self):
        d = asdict(self)
        d["branch_hidden"] = list(self.branch_hidden)
        d["trunk_hidden"] = list(self.trunk_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def paper(cls, **kw):
        return cls(n_points=11340, **kw)

    @classmethod
    def vanilla(cls, n_points, width, branch_layers=11, trunk_layers=10, **kw):
        return cls(n_points=n_points, branch_hidden=(width,) * branch_layers,
                   trunk_hidden=(width,) * trunk_layers, with_heads=False, **kw)


def layout(config):
    """``[(name, shape), ...]`` in flat-buffer / checkpoint order."""
    out = []
    for net, sizes in (("branch", config.branch_sizes), ("trunk", config.trunk_sizes)):
        shapes = mlp_param_shapes(sizes)
        for i in range(0, len(shapes), 2):
            out += [(f"{net}.{i // 2}.weight", shapes[i]), (f"{net}.{i // 2}.bias", shapes[i + 1])]
    if config.with_heads:
        n = config.n_points
        for name in PARAM_ORDER[: config.n_params]:
            out += [(f"head.{name}.weight", (n, n)), (f"head.{name}.bias", (n,))]
    return out


def count_params(config):
    return sum(int(np.prod(shape)) for _, shape in layout(config))


@dataclass
class DeepOnetModel:
    config: DeepOnetConfig
    params: np.ndarray                  # flat buffer, see module docstring
    branch: Mlp
    trunk: Mlp
    heads: list                         # [(W (N, N), c (N,)), ...] or []
    scaler: ScalerParams | None = None
    coords: np.ndarray | None = None    # physical node coordinates (N, 3)
    provenance: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return self.config.n_points

    @property
    def dtype(self):
        return self.params.dtype

    def blocks(self):
        """Named parameter views in checkpoint order."""
        names = [n for n, _ in layout(self.config)]
        arrays = []
        for layer in self.branch.layers + self.trunk.layers:
            arrays += [layer.weights, layer.bias]
        for w, c in self.heads:
            arrays += [w, c]
        return list(zip(names, arrays))

    def scaled_coords(self):
        if self.coords is None or self.scaler is None:
            raise ShapeError("model has no embedded coordinates/scaler")
        return self.scaler.scale_coords(self.coords)


def _bind(config, params):
    """Create the layer objects as views into ``params``."""
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        view = params[offset:offset + n].reshape(shape)
        offset += n
        return view

    nets = []
    for sizes in (config.branch_sizes, config.trunk_sizes):
        layers = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            act = "linear" if i == len(sizes) - 2 else "relu"
            layers.append(DenseLayer(take((a, b)), take((b,)), act))
        nets.append(Mlp(layers))
    heads = []
    if config.with_heads:
        n = config.n_points
        for _ in range(config.n_params):
            heads.append((take((n, n)), take((n,))))
    assert offset == params.size
    return nets[0], nets[1], heads


def build_deeponet(config, dtype=np.float64):
    """Xavier-uniform weights everywhere, zero biases, deterministic in ``config.seed``."""
    total = count_params(config)
    params = np.zeros(total, dtype=dtype)
    branch, trunk, heads = _bind(config, params)
    s_branch, s_trunk, s_heads = np.random.SeedSequence(config.seed).generate_state(3)
    bseeds = np.random.SeedSequence(int(s_branch)).generate_state(len(branch.layers))
    tseeds = np.random.SeedSequence(int(s_trunk)).generate_state(len(trunk.layers))
    hseeds = np.random.SeedSequence(int(s_heads)).generate_state(max(len(heads), 1))
    for net, seeds in ((branch, bseeds), (trunk, tseeds)):
        for layer, s in zip(net.layers, seeds):
            xavier_init(layer.in_dim, layer.out_dim, int(s), out=layer.weights)
    for (w, _), s in zip(heads, hseeds):
        xavier_init(w.shape[0], w.shape[1], int(s), out=w)
    return DeepOnetModel(config, params, branch, trunk, heads)


def fuse(branch_out, trunk_out):
    """``fused[..., k, i] = branch_out[..., i] * trunk_out[i, k]``.

    ``branch_out`` is (N,) or (B, N); ``trunk_out`` is (N, n_params).
    """
    branch_out = np.asarray(branch_out)
    trunk_out = np.asarray(trunk_out)
    if trunk_out.ndim != 2 or branch_out.shape[-1] != trunk_out.shape[0]:
        raise ShapeError(f"branch {branch_out.shape} and trunk {trunk_out.shape} disagree on N")
    return branch_out[..., None, :] * trunk_out.T


@dataclass
class FieldPrediction:
    values: np.ndarray      # (B, 3, N)
    space: str = "scaled"
    parameter_order: tuple = PARAM_ORDER


@dataclass
class _Cache:
    branch: object
    trunk: object
    b_out: np.ndarray
    t_out: np.ndarray
    fused: np.ndarray       # (3, B, N)


def _check_inputs(model, u_batch, coords):
    u_batch = np.atleast_2d(np.asarray(u_batch, dtype=model.dtype))
    coords = np.asarray(coords, dtype=model.dtype)
    if u_batch.shape[1] != model.config.n_input:
        raise ShapeError(f"input width {u_batch.shape[1]} != {model.config.n_input}")
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"coords must be N x 3, got {coords.shape}")
    # the branch emits exactly n_points coefficients, so N is fixed with or without heads
    if coords.shape[0] != model.n_points:
        raise ShapeError(f"model expects {model.n_points} nodes, got {coords.shape[0]}")
    return u_batch, coords


def forward_with_cache(model, u_batch, coords, dropout=None):
    u_batch, coords = _check_inputs(model, u_batch, coords)
    b_out, b_cache = mlp_forward(model.branch, u_batch, dropout)
    tdrop = None
    if dropout is not None and dropout.active:
        tdrop = DropoutSpec(dropout.rate, dropout.mode, dropout.seed + 1)
    t_out, t_cache = mlp_forward(model.trunk, coords, tdrop)
    # parameter-major (3, B, N) so every head matmul sees contiguous rows
    fused = np.ascontiguousarray(np.moveaxis(fuse(b_out, t_out), 1, 0))
    if model.heads:
        zk = np.empty_like(fused)
        for k, (w, c) in enumerate(model.heads):
            np.matmul(fused[k], w, out=zk[k])
            zk[k] += c
    else:
        zk = fused
    z = np.ascontiguousarray(np.moveaxis(zk, 0, 1))
    return z, _Cache(b_cache, t_cache, b_out, t_out, fused)


def deeponet_forward(model, u_batch, coords, mode="inference", dropout_seed=0):
    """Scaled-space prediction of shape (B, 3, N)."""
    dropout = DropoutSpec(model.config.dropout_rate, mode, dropout_seed)
    z, _ = forward_with_cache(model, u_batch, coords, dropout)
    return FieldPrediction(z, "scaled")


def grad_views(model, grads):
    """Bind a flat gradient buffer to the same layout as ``model.params``."""
    return _bind(model.config, grads)


def backward(model, cache, dz, grads):
    """Accumulate dL/dparams into the flat ``grads`` buffer (overwritten)."""
    gb, gt, gh = grad_views(model, grads)
    dzk = np.ascontiguousarray(np.moveaxis(dz, 1, 0))
    if model.heads:
        dfused = np.empty_like(dzk)
        for k, (w, _) in enumerate(model.heads):
            dw, dc = gh[k]
            np.matmul(cache.fused[k].T, dzk[k], out=dw)
            np.sum(dzk[k], axis=0, out=dc)
            np.matmul(dzk[k], w.T, out=dfused[k])
    else:
        dfused = dzk
    # fused[k, b, i] = B[b, i] * T[i, k]
    d_branch = np.einsum("kbi,ik->bi", dfused, cache.t_out, optimize=True)
    d_trunk = np.einsum("kbi,bi->ik", dfused, cache.b_out, optimize=True)
    mlp_backward(model.branch, cache.branch, d_branch,
                 grads=[(l.weights, l.bias) for l in gb.layers])
    mlp_backward(model.trunk, cache.trunk, d_trunk,
                 grads=[(l.weights, l.bias) for l in gt.layers])
    return grads


def mse_and_grad(z, target):
    """Mean over (batch, parameter, node) of squared residuals, and dL/dz."""
    r = z - target
    return float(np.mean(r * r)), r * (2.0 / r.size)


def grad_check(model, u_batch, coords, target, tolerance=1e-4, step=1e-5):
    """Finite-difference check of ``backward`` on a small model (float64)."""
    z, cache = forward_with_cache(model, u_batch, coords)
    _, dz = mse_and_grad(z, target)
    grads = np.zeros_like(model.params)
    backward(model, cache, dz, grads)

    def loss_of():
        return mse_and_grad(forward_with_cache(model, u_batch, coords)[0], target)[0]

    return compare_gradients([model.params], [grads], loss_of, tolerance, step=step)


# --- physical-space convenience ------------------------------------------


def predict(model, v_in, space="physical"):
    """Inlet velocity (scalar or 1-D) -> FieldPrediction on the model's nodes.

    Single code path shared by the CLI ``infer`` command and the HTTP server.
    """
    if space not in ("scaled", "physical"):
        raise InvalidArgumentError(f"unknown space {space!r}")
    u = np.asarray(v_in, dtype=np.float64).reshape(-1, model.config.n_input)
    z, _ = forward_with_cache(model, model.scaler.scale_inputs(u), model.scaled_coords())
    z = np.asarray(z, dtype=np.float64)
    if space == "physical":
        z = model.scaler.unscale_fields(z)
    return FieldPrediction(z, space)


# --- checkpoints ---------------------------------------------------------


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def checkpoint_save(model, path):
    """Write ``model.json`` + ``weights.f32le``. Blob lands before the header.

    Weights are stored as float32; a writable float64 model is rounded in
    place so the saved and in-memory model agree exactly afterwards.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    stored = np.ascontiguousarray(model.params, dtype="<f4")
    if model.params.flags.writeable:
        # snap the live weights to what was persisted so save/load is lossless
        model.params[...] = stored
    blob = stored.tobytes()
    digest = hashlib.sha256(blob).hexdigest()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "scaler": model.scaler.to_dict() if model.scaler is not None else None,
        "blob_sha256": digest,
        "blob_file": BLOB_FILE,
        "dtype": "float32",
        "endianness": "little",
        "param_count": int(model.params.size),
        "parameter_order": list(PARAM_ORDER),
        "layout": [{"name": n, "shape": list(s)} for n, s in layout(model.config)],
        "init": {"weights": "xavier_uniform", "bias": "zeros", "seed": model.config.seed},
        "coords": model.coords.tolist() if model.coords is not None else None,
        # the checksum of the previous save is not part of the new provenance
        "provenance": {k: v for k, v in model.provenance.items() if k != "blob_sha256"},
    }
    _atomic_write(path / BLOB_FILE, blob)
    _atomic_write(path / HEADER_FILE, json.dumps(header, indent=1, sort_keys=True).encode())
    return path


def read_header(path):
    hpath = Path(path) / HEADER_FILE
    if not hpath.exists():
        raise CorruptionError(f"missing checkpoint header: {hpath}")
    return json.loads(hpath.read_text())


def checkpoint_load(path, dtype=np.float64):
    path = Path(path)
    header = read_header(path)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CorruptionError(f"unsupported checkpoint format {header.get('format_version')}")
    config = DeepOnetConfig.from_dict(header["config"])
    bpath = path / header.get("blob_file", BLOB_FILE)
    if not bpath.exists():
        raise CorruptionError(f"missing weights file: {bpath}")
    blob = bpath.read_bytes()
    expected = count_params(config)
    if len(blob) != 4 * expected or header.get("param_count") != expected:
        raise CorruptionError(
            f"{bpath.name}: expected {expected} float32 values, found {len(blob) // 4}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CorruptionError(f"{bpath.name}: sha256 does not match header")
    params = np.frombuffer(blob, dtype="<f4").astype(dtype)
    if not np.all(np.isfinite(params)):
        raise CorruptionError(f"{bpath.name}: non-finite parameter values")
    branch, trunk, heads = _bind(config, params)
    scaler = ScalerParams.from_dict(header["scaler"]) if header.get("scaler") else None
    coords = np.asarray(header["coords"], dtype=np.float64) if header.get("coords") else None
    provenance = dict(header.get("provenance", {}), blob_sha256=header["blob_sha256"])
    return DeepOnetModel(config, params, branch, trunk, heads, scaler, coords, provenance)
