"""Dense feedforward primitives with hand-written backpropagation and Adam.

Weights follow the ``x @ W + b`` convention, so a layer mapping ``in_dim``
features to ``out_dim`` stores ``W`` with shape ``(in_dim, out_dim)``.
Parameters may live as views into one flat buffer; the optimizer then works on
the whole buffer in a single fused pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import InvalidArgumentError, InvalidStateError, NumericError, ShapeError

ACTIVATIONS = ("relu", "linear")


def xavier_init(in_dim, out_dim, seed, dtype=np.float64, out=None):
    """Glorot-uniform matrix of shape ``(in_dim, out_dim)``.

    Entries lie in ``[-a, a)`` with ``a = sqrt(6 / (in_dim + out_dim))``. When
    ``out`` is given the samples are written into it without temporaries,
    which keeps the paper-scale heads (11340 x 11340) affordable.
    """
    if in_dim < 1 or out_dim < 1:
        raise InvalidArgumentError(f"dimensions must be >= 1, got ({in_dim}, {out_dim})")
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    rng = np.random.default_rng(seed)
    if out is None:
        out = np.empty((in_dim, out_dim), dtype=dtype)
    elif out.shape != (in_dim, out_dim):
        raise ShapeError(f"out has shape {out.shape}, expected {(in_dim, out_dim)}")
    rng.random(out=out, dtype=out.dtype)
    out *= 2.0 * limit
    out -= limit
    return out


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]


@dataclass
class Mlp:
    layers: list[DenseLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers and self.layers[-1].activation != "linear":
            raise InvalidArgumentError("final layer must be linear")

    @property
    def layer_sizes(self):
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim


def mlp_param_shapes(sizes):
    shapes = []
    for a, b in zip(sizes, sizes[1:]):
        shapes += [(a, b), (b,)]
    return shapes


def build_mlp(sizes, seed, dtype=np.float64, buffer=None):
    """Xavier-initialised ReLU MLP with a linear output layer and zero biases.

    ``buffer`` is an optional flat array that receives the parameters in
    layer order (weights row-major, then bias); layers hold views into it.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise InvalidArgumentError(f"invalid layer sizes {sizes}")
    n = sum(int(np.prod(s)) for s in mlp_param_shapes(sizes))
    if buffer is None:
        buffer = np.zeros(n, dtype=dtype)
    elif buffer.size != n:
        raise ShapeError(f"buffer holds {buffer.size} values, MLP needs {n}")
    seeds = np.random.SeedSequence(seed).generate_state(len(sizes) - 1)
    layers, offset = [], 0
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        w = buffer[offset:offset + a * b].reshape(a, b)
        offset += a * b
        bias = buffer[offset:offset + b]
        offset += b
        xavier_init(a, b, int(seeds[i]), out=w)
        bias[:] = 0.0
        act = "linear" if i == len(sizes) - 2 else "relu"
        layers.append(DenseLayer(w, bias, act))
    return Mlp(layers)


def param_count(mlp):
    return sum(layer.in_dim * layer.out_dim + layer.out_dim for layer in mlp.layers)


@dataclass
class DropoutSpec:
    """Inverted dropout on hidden-layer outputs; identity in inference mode."""

    rate: float = 0.0
    mode: str = "inference"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "inference"):
            raise InvalidArgumentError(f"unknown dropout mode {self.mode!r}")

    @property
    def active(self):
        return self.mode == "train" and self.rate > 0.0


@dataclass
class MlpCache:
    owner: int
    sizes: tuple
    inputs: list = field(default_factory=list)   # input seen by each layer
    pre: list = field(default_factory=list)      # pre-activations per layer
    masks: list = field(default_factory=list)    # scaled dropout masks or None


def dropout_mask(shape, spec, rng, dtype):
    keep = rng.random(shape) >= spec.rate
    return keep.astype(dtype) / (1.0 - spec.rate)


def mlp_forward(mlp, batch, dropout=None):
    """Forward pass returning ``(output, cache)``."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != mlp.in_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match input dim {mlp.in_dim}")
    dropout = dropout or DropoutSpec()
    rng = np.random.default_rng(dropout.seed) if dropout.active else None
    cache = MlpCache(id(mlp), tuple(mlp.layer_sizes))
    h = batch
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        cache.inputs.append(h)
        z = h @ layer.weights
        z += layer.bias
        cache.pre.append(z)
        if layer.activation == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
        mask = None
        if rng is not None and i < last:
            mask = dropout_mask(h.shape, dropout, rng, h.dtype)
            h = h * mask
        cache.masks.append(mask)
    return h, cache


def mlp_backward(mlp, cache, upstream, grads=None, need_input_grad=False):
    """Backpropagate ``upstream = dL/d(output)`` through the cached pass.

    Returns ``(grads, grad_input)`` where ``grads`` is a list of ``(dW, db)``
    per layer. Passing preallocated ``grads`` writes into them in place.
    ReLU uses subgradient 0 at 0.
    """
    if cache.owner != id(mlp) or cache.sizes != tuple(mlp.layer_sizes):
        raise InvalidStateError("cache was produced by a different network")
    upstream = np.asarray(upstream)
    expected = cache.pre[-1].shape
    if upstream.shape != expected:
        raise ShapeError(f"upstream gradient {upstream.shape} != output {expected}")
    if grads is None:
        grads = [(np.empty_like(l.weights), np.empty_like(l.bias)) for l in mlp.layers]
    delta = upstream
    grad_input = None
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        if cache.masks[i] is not None:
            delta = delta * cache.masks[i]
        if layer.activation == "relu":
            delta = delta * (cache.pre[i] > 0)
        dw, db = grads[i]
        np.matmul(cache.inputs[i].T, delta, out=dw)
        np.sum(delta, axis=0, out=db)
        if i > 0 or need_input_grad:
            delta = delta @ layer.weights.T
    if need_input_grad:
        grad_input = delta
    return grads, grad_input


# --- Adam -----------------------------------------------------------------


@numba.njit(cache=True)
def _all_finite(g):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return False
    return True


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    for i in range(p.size):
        gi = g[i] + wd * p[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def effective_gradient(self, param, grad):
        # coupled L2: the decay term enters the moments like any gradient
        return grad + self.weight_decay * param


def adam_step(state, params, grads, names=None):
    """One in-place Adam update over matching lists of contiguous arrays.

    Moments are created on the first call. A non-finite gradient aborts the
    step before any parameter changes and names the offending block.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads lists differ in length")
    names = names or [f"block{i}" for i in range(len(params))]
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    for p, g, m, name in zip(params, grads, state.first_moment, names):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"{name}: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not _all_finite(g.reshape(-1)):
            raise NumericError(f"non-finite gradient in {name}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        _adam_kernel(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                     state.learning_rate, state.beta1, state.beta2, state.epsilon,
                     state.weight_decay, bc1, bc2)
    return state


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_error: float
    n_params: int
    tolerance: float


def _rel_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def compare_gradients(param_blocks, analytic_blocks, loss_of, tolerance, step=1e-5, floor=1e-6):
    """Central-difference check of every entry in ``param_blocks``.

    ``loss_of()`` re-evaluates the scalar loss with the current parameter
    values; entries are perturbed in place and restored.
    """
    if tolerance <= 0:
        raise InvalidArgumentError("tolerance must be positive")
    worst, n = 0.0, 0
    for p, a in zip(param_blocks, analytic_blocks):
        flat, aflat = p.reshape(-1), np.asarray(a).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_of()
            flat[j] = orig - step
            down = loss_of()
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, _rel_error(aflat[j], numeric, floor))
            n += 1
    return GradCheckReport(worst < tolerance, worst, n, tolerance)


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def finite_diff_check(mlp, loss_fn: LossFn, inputs, tolerance=1e-4, backward=None, step=1e-5):
    """Compare ``mlp_backward`` against central differences for every parameter.

    ``loss_fn(output)`` returns ``(loss, dloss/doutput)``. ``backward`` can be
    swapped for a deliberately wrong implementation in negative controls.
    """
    if tolerance <= 0:
        raise InvalidArgumentError("tolerance must be positive")
    if param_count(mlp) > 10_000:
        raise InvalidArgumentError("network too large for exhaustive finite differences")
    backward = backward or mlp_backward
    out, cache = mlp_forward(mlp, inputs)
    _, upstream = loss_fn(out)
    grads, _ = backward(mlp, cache, upstream)

    def loss_of():
        return float(loss_fn(mlp_forward(mlp, inputs)[0])[0])

    blocks, analytic = [], []
    for layer, (dw, db) in zip(mlp.layers, grads):
        blocks += [layer.weights, layer.bias]
        analytic += [dw, db]
    return compare_gradients(blocks, analytic, loss_of, tolerance, step=step)


def mse_loss(target):
    """Mean squared error over all entries, as a ``loss_fn`` closure."""
    target = np.asarray(target)

    def fn(out):
        r = out - target
        return float(np.mean(r * r)), 2.0 * r / r.size

    return fn


def half_sse_loss(target):
    target = np.asarray(target)

    def fn(out):
        r = out - target
        return 0.5 * float(np.sum(r * r)), r

    return fn


__all__: Sequence[str] = [
    "AdamState", "DenseLayer", "DropoutSpec", "GradCheckReport", "Mlp", "MlpCache",
    "adam_step", "build_mlp", "compare_gradients", "finite_diff_check", "half_sse_loss",
    "mlp_backward", "mlp_forward", "mse_loss", "param_count", "xavier_init",
]
