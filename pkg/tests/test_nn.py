import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hotleg.errors import InvalidArgumentError, InvalidStateError, NumericError, ShapeError
from hotleg.nn import (
    AdamState,
    DenseLayer,
    DropoutSpec,
    Mlp,
    adam_step,
    build_mlp,
    finite_diff_check,
    half_sse_loss,
    mlp_backward,
    mlp_forward,
    mse_loss,
    param_count,
    xavier_init,
)


def test_xavier_bound_unit_fan():
    w = xavier_init(1, 1, seed=7)
    assert abs(w[0, 0]) <= np.sqrt(3.0)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_xavier_inside_glorot_interval(a, b, seed):
    w = xavier_init(a, b, seed)
    assert w.shape == (a, b)
    assert np.all(np.abs(w) <= np.sqrt(6.0 / (a + b)))


def test_xavier_deterministic():
    assert np.array_equal(xavier_init(5, 9, 3), xavier_init(5, 9, 3))
    assert not np.array_equal(xavier_init(5, 9, 3), xavier_init(5, 9, 4))


def test_xavier_large_sample_mean():
    assert abs(xavier_init(512, 512, 11).mean()) < 0.01


@pytest.mark.parametrize("dims", [(0, 3), (3, 0), (-1, 2)])
def test_xavier_rejects_bad_dims(dims):
    with pytest.raises(InvalidArgumentError):
        xavier_init(*dims, seed=0)


def test_forward_identity_layer():
    mlp = Mlp([DenseLayer(np.eye(2), np.zeros(2), "linear")])
    out, _ = mlp_forward(mlp, np.array([[0.3, -0.2]]))
    assert np.array_equal(out, [[0.3, -0.2]])


def test_forward_relu_hand_values():
    layer = DenseLayer(np.array([[2.0]]), np.array([1.0]), "relu")
    # a ReLU output layer is not a valid Mlp, so exercise the layer via a linear tail
    mlp = Mlp([layer, DenseLayer(np.eye(1), np.zeros(1), "linear")])
    out, _ = mlp_forward(mlp, np.array([[3.0], [-3.0]]))
    assert out[:, 0].tolist() == [7.0, 0.0]


def test_forward_zero_weights_gives_bias():
    mlp = Mlp([DenseLayer(np.zeros((4, 3)), np.array([1.0, -2.0, 0.5]), "linear")])
    out, _ = mlp_forward(mlp, np.random.default_rng(0).normal(size=(6, 4)))
    assert np.all(out == [1.0, -2.0, 0.5])


def test_forward_shape_mismatch():
    mlp = build_mlp([3, 4, 2], seed=0)
    with pytest.raises(ShapeError):
        mlp_forward(mlp, np.zeros((2, 5)))


def test_mlp_rejects_broken_chain_and_relu_tail():
    with pytest.raises(ShapeError):
        Mlp([DenseLayer(np.zeros((2, 3)), np.zeros(3)), DenseLayer(np.zeros((4, 1)), np.zeros(1), "linear")])
    with pytest.raises(InvalidArgumentError):
        Mlp([DenseLayer(np.zeros((2, 3)), np.zeros(3), "relu")])


def test_build_mlp_layout_and_biases():
    mlp = build_mlp([3, 8, 8, 2], seed=1)
    assert mlp.layer_sizes == [3, 8, 8, 2]
    assert [l.activation for l in mlp.layers] == ["relu", "relu", "linear"]
    assert all(np.all(l.bias == 0) for l in mlp.layers)


def test_param_count_examples():
    assert param_count(build_mlp([2, 3], 0)) == 9
    assert param_count(build_mlp([1, 512, 512, 512, 11340], 0)) == 6_343_756


def test_param_count_trunk_enumerated():
    # enumeration of [3, 512, 512, 256, 3]: 2048 + 262656 + 131328 + 771
    trunk = build_mlp([3, 512, 512, 256, 3], 0)
    assert param_count(trunk) == sum(l.weights.size + l.bias.size for l in trunk.layers) == 396_803


def test_backward_zero_upstream():
    mlp = build_mlp([3, 5, 2], seed=2)
    out, cache = mlp_forward(mlp, np.ones((4, 3)))
    grads, _ = mlp_backward(mlp, cache, np.zeros_like(out))
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)


def test_backward_hand_gradient():
    mlp = Mlp([DenseLayer(np.array([[1.0]]), np.array([0.0]), "linear")])
    out, cache = mlp_forward(mlp, np.array([[2.0]]))
    _, up = half_sse_loss(np.array([[0.0]]))(out)
    grads, _ = mlp_backward(mlp, cache, up)
    assert grads[0][0][0, 0] == pytest.approx(4.0)


def test_backward_rejects_foreign_cache():
    a, b = build_mlp([2, 3, 1], 0), build_mlp([2, 3, 1], 0)
    _, cache = mlp_forward(a, np.ones((1, 2)))
    with pytest.raises(InvalidStateError):
        mlp_backward(b, cache, np.ones((1, 1)))


def test_finite_diff_linear_quadratic():
    mlp = build_mlp([3, 2], seed=4)
    x = np.random.default_rng(1).normal(size=(5, 3))
    rep = finite_diff_check(mlp, half_sse_loss(np.zeros((5, 2))), x, tolerance=1e-4)
    assert rep.passed and rep.worst_rel_error < 1e-8


def random_mlp(seed, max_width=5, max_layers=5):
    """Seeded net with random weights and biases. Non-zero biases keep ReLU
    pre-activations off the kink, where a one-sided difference is expected."""
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, max_width + 1)) for _ in range(int(rng.integers(2, max_layers + 1)))]
    mlp = build_mlp(sizes, seed=seed)
    for layer in mlp.layers:
        layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
    return mlp, sizes, rng


@pytest.mark.parametrize("seed", range(5))
def test_finite_diff_random_relu(seed):
    mlp, sizes, rng = random_mlp(seed)
    x = rng.normal(size=(4, sizes[0]))
    rep = finite_diff_check(mlp, mse_loss(rng.normal(size=(4, sizes[-1]))), x)
    assert rep.passed, rep


def test_finite_diff_catches_corrupted_gradient():
    mlp = build_mlp([3, 4, 2], seed=0)
    x = np.random.default_rng(0).normal(size=(3, 3))

    def doubled(m, cache, up):
        grads, gi = mlp_backward(m, cache, up)
        return [(2 * dw, 2 * db) for dw, db in grads], gi

    rep = finite_diff_check(mlp, mse_loss(np.ones((3, 2))), x, backward=doubled)
    assert not rep.passed


def test_finite_diff_guards():
    mlp = build_mlp([2, 2], 0)
    with pytest.raises(InvalidArgumentError):
        finite_diff_check(mlp, mse_loss(np.zeros((1, 2))), np.zeros((1, 2)), tolerance=0)
    big = build_mlp([100, 101], 0)
    with pytest.raises(InvalidArgumentError):
        finite_diff_check(big, mse_loss(np.zeros((1, 101))), np.zeros((1, 100)))


def test_dropout_identity_in_inference():
    mlp = build_mlp([3, 16, 2], 0)
    x = np.ones((4, 3))
    a, _ = mlp_forward(mlp, x)
    b, _ = mlp_forward(mlp, x, DropoutSpec(0.3, "inference", 5))
    assert np.array_equal(a, b)


def test_inverted_dropout_preserves_expectation():
    mlp = Mlp([DenseLayer(np.ones((1, 2000)), np.zeros(2000), "relu"),
               DenseLayer(np.eye(2000), np.zeros(2000), "linear")])
    x = np.ones((1, 1))
    means, zeros = [], []
    for seed in range(50):
        _, cache = mlp_forward(mlp, x, DropoutSpec(0.3, "train", seed))
        h = cache.inputs[1]
        means.append(h.mean())
        zeros.append(np.mean(h == 0))
    assert abs(np.mean(means) - 1.0) < 0.01
    assert abs(np.mean(zeros) - 0.3) < 0.01


def test_dropout_spec_validation():
    with pytest.raises(InvalidArgumentError):
        DropoutSpec(1.0)
    with pytest.raises(InvalidArgumentError):
        DropoutSpec(0.1, "eval")


def test_adam_zero_gradient_fixed_point():
    p = np.array([1.0, -2.0, 3.0])
    st_ = AdamState()
    for _ in range(4):
        adam_step(st_, [p], [np.zeros(3)])
    assert np.array_equal(p, [1.0, -2.0, 3.0])
    assert st_.step_count == 4


def test_adam_moments_decay_under_zero_gradient():
    st_ = AdamState()
    st_.first_moment, st_.second_moment = [np.full(3, 0.5)], [np.full(3, 0.25)]
    adam_step(st_, [np.zeros(3)], [np.zeros(3)])
    assert np.allclose(st_.first_moment[0], 0.45)
    assert np.allclose(st_.second_moment[0], 0.25 * 0.999)


def test_adam_first_step_is_signed_lr():
    g = np.array([0.5, -3.0, 1e-3])
    p = np.zeros(3)
    st_ = AdamState(learning_rate=1e-3)
    adam_step(st_, [p], [g])
    assert st_.step_count == 1
    assert np.allclose(p, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_coupled_l2_effective_gradient():
    st_ = AdamState(weight_decay=1e-8)
    assert st_.effective_gradient(1.0, 0.0) == 1e-8


def test_adam_matches_reference():
    rng = np.random.default_rng(3)
    p = rng.normal(size=7)
    ref = p.copy()
    m = v = np.zeros(7)
    st_ = AdamState(learning_rate=1e-2, weight_decay=1e-3)
    for t in range(1, 6):
        g = rng.normal(size=7)
        adam_step(st_, [p], [g])
        ge = g + 1e-3 * ref
        m = 0.9 * m + 0.1 * ge
        v = 0.999 * v + 0.001 * ge * ge
        ref = ref - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p, ref, rtol=1e-12, atol=1e-14)
    assert st_.step_count == 5


def test_adam_non_finite_gradient_names_block():
    p = np.zeros(2)
    with pytest.raises(NumericError, match="trunk"):
        adam_step(AdamState(), [np.zeros(1), p], [np.zeros(1), np.array([0.0, np.nan])],
                  names=["branch", "trunk"])
    assert np.array_equal(p, [0.0, 0.0])


def test_training_steps_deterministic():
    def run():
        mlp = build_mlp([2, 6, 1], seed=9)
        params = [a for l in mlp.layers for a in (l.weights, l.bias)]
        opt = AdamState()
        x = np.random.default_rng(0).normal(size=(8, 2))
        for _ in range(5):
            out, cache = mlp_forward(mlp, x)
            grads, _ = mlp_backward(mlp, cache, mse_loss(np.zeros((8, 1)))(out)[1])
            adam_step(opt, params, [a for pair in grads for a in pair])
        return np.concatenate([a.ravel() for a in params])

    assert np.array_equal(run(), run())
