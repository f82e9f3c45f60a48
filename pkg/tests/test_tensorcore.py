import math

import numpy as np
import pytest

from ttalab import tensorcore as tc
from ttalab.tensorcore import (
    Activation, BatchNorm, Conv2d, GraphError, Linear, Model, NonFiniteError, ShapeError, Tensor,
)


def _param(data):
    return Tensor(np.asarray(data, dtype=float), requires_grad=True)


def _identity_linear(n):
    lin = Linear("lin", n, n)
    lin.params[0].data = np.eye(n)
    lin.params[1].data = np.zeros(n)
    return lin


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_identity_linear_forward():
    model = Model([_identity_linear(3), Linear("out", 3, 2)], encoder_end=1)
    x = np.arange(6.0).reshape(2, 3)
    h = model.encode(x)
    np.testing.assert_array_equal(h.data, x)


def test_batchnorm_batch_mode_hand_value():
    bn = BatchNorm("bn", 1)
    out = bn(Tensor([[1.0], [3.0]]), "eval", "batch")
    # population variance 1, so output is (x - 2) / sqrt(1 + 1e-5)
    expected = np.array([[-1.0], [1.0]]) / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-5)


def test_batchnorm_running_mode_does_not_update_in_eval():
    bn = BatchNorm("bn", 2)
    bn.running_mean = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 0.25])
    x = Tensor(np.random.default_rng(0).normal(size=(5, 2)))
    out = bn(x, "eval", "running")
    np.testing.assert_allclose(out.data, (x.data - bn.running_mean) / np.sqrt(bn.running_var + 1e-5))
    np.testing.assert_array_equal(bn.running_mean, [1.0, -1.0])


def test_batchnorm_train_mode_updates_running_stats():
    bn = BatchNorm("bn", 1, momentum=0.1)
    bn(Tensor([[1.0], [3.0]]), "train", "running")
    np.testing.assert_allclose(bn.running_mean, [0.2])
    np.testing.assert_allclose(bn.running_var, [0.9 * 1 + 0.1 * 2.0])  # unbiased variance 2


def test_batchnorm_batch_mode_needs_two_samples():
    bn = BatchNorm("bn", 3)
    with pytest.raises(ShapeError, match="N >= 2"):
        bn(Tensor(np.zeros((1, 3))), "eval", "batch")


def test_softmax_rows_sum_to_one():
    model = tc.build_cnn(4, image_size=8, channels=(2, 3), hidden=5, seed=1)
    model.bn_mode = "batch"
    x = np.random.default_rng(0).uniform(size=(6, 3, 8, 8))
    p = tc.softmax(model.forward(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_shape_mismatch_names_unit():
    model = tc.build_cnn(3, image_size=8, seed=0)
    with pytest.raises(ShapeError, match="conv1"):
        model.forward(np.zeros((2, 3, 16, 16)))
    lin = Linear("fc_x", 4, 2)
    with pytest.raises(ShapeError, match="fc_x"):
        lin(Tensor(np.zeros((2, 5))), "eval", "running")


def test_encoder_end_bounds():
    units = [Linear("a", 2, 2), Linear("b", 2, 2)]
    with pytest.raises(ValueError):
        Model(units, encoder_end=0)
    with pytest.raises(ValueError):
        Model(units, encoder_end=2)


def test_forward_backward_leaves_parameters_unchanged():
    model = tc.build_cnn(3, image_size=8, channels=(2, 3), hidden=4)
    before = [p.data.copy() for p in model.parameters()]
    x = np.random.default_rng(2).uniform(size=(4, 3, 8, 8))
    model.bn_mode = "batch"
    model.backward(model.forward(x).sum())
    for b, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, p.data)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _small_model():
    return Model([Linear("a", 3, 4, np.random.default_rng(0)), Activation("r", "relu"),
                  Linear("b", 4, 2, np.random.default_rng(1))], encoder_end=2)


def test_sum_of_params_gives_unit_grads():
    model = _small_model()
    model.zero_grads()
    model.forward(np.zeros((1, 3)))
    total = None
    for p in model.parameters():
        total = p.sum() if total is None else total + p.sum()
    model.backward(total)
    for p in model.parameters():
        np.testing.assert_array_equal(p.grad, np.ones_like(p.data))


def test_zero_loss_gives_zero_grads():
    model = _small_model()
    model.zero_grads()
    out = model.forward(np.ones((2, 3)))
    model.backward(out.sum() * 0.0)
    for p in model.parameters():
        assert not np.any(p.grad)


def test_backward_twice_doubles_grads():
    model = _small_model()
    model.zero_grads()
    loss = model.forward(np.random.default_rng(3).normal(size=(5, 3))).sum()
    model.backward(loss)
    once = [p.grad.copy() for p in model.parameters()]
    model.backward(loss)
    for g, p in zip(once, model.parameters()):
        np.testing.assert_array_equal(p.grad, 2 * g)


def test_backward_without_forward_is_an_error():
    model = _small_model()
    with pytest.raises(GraphError):
        model.backward(Tensor(1.0))


# ---------------------------------------------------------------------------
# layer_grad_vectors / apply_update
# ---------------------------------------------------------------------------


def test_grad_vector_concatenation_order():
    lin = Linear("lin", 2, 2)
    lin.params[0].grad = np.array([[1.0, 2.0], [3.0, 4.0]])
    lin.params[1].grad = np.array([5.0, 6.0])
    model = Model([lin, Activation("r", "relu"), Linear("o", 2, 2)], encoder_end=2)
    for p in model.units[2].params:
        p.zero_grad()
    np.testing.assert_array_equal(tc.layer_grad_vectors(model)["lin"], [1, 2, 3, 4, 5, 6])


def test_grad_vectors_skip_activations():
    model = Model([Linear("a", 2, 2), Activation("r1", "relu"), Linear("b", 2, 2), Activation("r2", "relu"),
                   Linear("c", 2, 2)], encoder_end=4)
    model.zero_grads()
    snap = tc.layer_grad_vectors(model)
    assert list(snap) == ["a", "b", "c"]
    assert all(not np.any(v) for v in snap.values())
    assert [len(v) for v in snap.values()] == [u.n_params for u in model.parametric_units]


def test_grad_vectors_missing_grads():
    with pytest.raises(GraphError):
        tc.layer_grad_vectors(_small_model())


def test_apply_update_arithmetic():
    model = Model([Linear("a", 1, 1), Linear("b", 1, 1)], encoder_end=1)
    p = model.parameters()[0]
    p.data = np.array([[1.0]])
    model.zero_grads()
    p.grad = np.array([[0.5]])
    tc.apply_update(model, 0.1)
    np.testing.assert_allclose(p.data, [[0.95]])
    before = [q.data.copy() for q in model.parameters()]
    tc.apply_update(model, 0.0)
    for b, q in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, q.data)


def test_apply_update_rejects_nonfinite():
    model = _small_model()
    model.zero_grads()
    model.parameters()[2].grad[0] = np.nan
    with pytest.raises(NonFiniteError, match="'b'"):
        tc.apply_update(model, 0.1)


def test_two_half_steps_differ_from_one_full_step_on_quadratic():
    # f(x) = x^2 from x = 1: two steps of h=0.1 give 0.64, one step of 0.2 gives 0.6
    def run(steps, lr):
        x = _param([1.0])
        for _ in range(steps):
            x.grad = np.zeros(1)
            tc.backward((x * x).sum())
            x.data = x.data - lr * x.grad
        return x.data[0]

    assert run(2, 0.1) == pytest.approx(0.64)
    assert run(1, 0.2) == pytest.approx(0.6)
    assert run(2, 0.1) != pytest.approx(run(1, 0.2))


# ---------------------------------------------------------------------------
# numeric gradient checks
# ---------------------------------------------------------------------------


def test_gradcheck_linear_model_is_exact():
    lin = Linear("lin", 4, 3, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 4))
    c = np.random.default_rng(2).normal(size=(5, 3))
    err = tc.numeric_gradient_check(lin.params, lambda: (lin(Tensor(x), "eval", "running") * c).sum())
    assert err < 1e-6


def test_gradcheck_mlp_cross_entropy():
    model = tc.build_mlp(4, 6, hidden=(8, 5), seed=3)
    x = np.random.default_rng(4).normal(size=(7, 6))
    y = np.array([0, 1, 2, 3, 0, 1, 2])
    onehot = np.eye(4)[y]

    def loss():
        return -(tc.log_softmax(model.forward(x), axis=1) * onehot).sum() * (1 / 7)

    assert tc.numeric_gradient_check(model.parameters(), loss) < 1e-4


def test_gradcheck_unused_parameter_is_zero():
    a, unused = _param([1.0, 2.0]), _param([3.0])
    assert tc.numeric_gradient_check([a, unused], lambda: (a * a).sum()) < 1e-6
    assert not np.any(unused.grad)


@pytest.mark.parametrize("kind", ["conv2d", "batchnorm_batch", "batchnorm_running", "batchnorm_train",
                                  "relu", "avgpool2", "flatten"])
def test_gradcheck_each_layer_kind(kind):
    r = np.random.default_rng(7)
    if kind == "conv2d":
        unit = Conv2d("c", 2, 3, r)
        x = Tensor(r.normal(size=(2, 2, 5, 5)), requires_grad=True)
    elif kind.startswith("batchnorm"):
        unit = BatchNorm("bn", 3)
        unit.params[0].data = r.uniform(0.5, 1.5, 3)
        unit.params[1].data = r.normal(size=3)
        unit.running_mean, unit.running_var = r.normal(size=3), r.uniform(0.5, 2, 3)
        x = Tensor(r.normal(size=(4, 3, 2, 2)), requires_grad=True)
    else:
        unit = Activation("a", kind)
        x = Tensor(r.normal(size=(3, 2, 4, 4)) + 0.05, requires_grad=True)
    mode, bn_mode = {"batchnorm_train": ("train", "running"), "batchnorm_running": ("eval", "running")}.get(
        kind, ("eval", "batch"))
    running = (getattr(unit, "running_mean", None), getattr(unit, "running_var", None))
    weights = None

    def loss():
        nonlocal weights
        if hasattr(unit, "running_mean"):
            unit.running_mean, unit.running_var = running[0].copy(), running[1].copy()
        out = unit(x, mode, bn_mode)
        if weights is None:
            weights = np.random.default_rng(8).normal(size=out.shape)
        return (out * weights).sum()

    assert tc.numeric_gradient_check(unit.params + [x], loss) < 1e-4


# ---------------------------------------------------------------------------
# probability helpers
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("logits, tau, expected", [
    ([0.0, 0.0], 1.0, [0.5, 0.5]),
    ([1.0, 0.0], 0.1, [math.exp(10) / (math.exp(10) + 1), 1 / (math.exp(10) + 1)]),
    ([1000.0, 999.0], 1.0, [1 / (1 + math.exp(-1)), 1 - 1 / (1 + math.exp(-1))]),
])
def test_stable_softmax_examples(logits, tau, expected):
    np.testing.assert_allclose(tc.stable_softmax(logits, tau), expected, rtol=1e-12)


def test_stable_softmax_rounded_values():
    np.testing.assert_allclose(tc.stable_softmax([1.0, 0.0], 0.1), [0.9999546, 4.54e-5], atol=1e-7)
    np.testing.assert_allclose(tc.stable_softmax([1000.0, 999.0]), [0.7311, 0.2689], atol=1e-4)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_stable_softmax_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        tc.stable_softmax([1.0, 2.0], tau)


def test_entropy_examples():
    assert tc.entropy(np.full(10, 0.1)) == pytest.approx(2.302585092994046, abs=1e-12)
    assert tc.entropy([0.0, 1.0, 0.0]) == 0.0
    p = np.array([0.2, 0.3, 0.5])
    assert tc.cross_entropy(p, p) == pytest.approx(tc.entropy(p), abs=1e-15)


def test_entropy_rejects_negative():
    with pytest.raises(ValueError):
        tc.entropy([1.5, -0.5])
    with pytest.raises(ValueError):
        tc.cross_entropy([0.5, 0.5], [1.5, -0.5])


def test_cross_entropy_clamps():
    assert tc.cross_entropy([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))


def test_determinism_bit_identical():
    def run():
        m = tc.build_cnn(3, image_size=8, channels=(2, 3), hidden=4, seed=5)
        m.bn_mode = "batch"
        x = np.random.default_rng(6).uniform(size=(4, 3, 8, 8))
        m.zero_grads()
        out = m.forward(x)
        m.backward(tc.log_softmax(out, axis=1).sum())
        return out.data, [p.grad for p in m.parameters()]

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


def test_gradcheck_skips_relu_kinks():
    a = _param([5e-4, 0.7])
    loss = lambda: tc.relu(a).sum()  # noqa: E731
    assert tc.numeric_gradient_check([a], loss) > 0.1  # the first entry straddles the kink
    assert tc.numeric_gradient_check([a], loss, skip_kinks=True) < 1e-9


def test_conv2d_matches_direct_loops():
    r = np.random.default_rng(11)
    unit = Conv2d("c", 2, 3, r)
    x = r.normal(size=(2, 2, 5, 4))
    w, b = unit.params[0].data, unit.params[1].data
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 3, 5, 4))
    for n in range(2):
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    want[n, o, i, j] = np.sum(padded[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(unit(Tensor(x), "eval", "running").data, want, atol=1e-12)
