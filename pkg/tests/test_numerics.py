import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lmvp import numerics as nx
from lmvp.numerics import AdamState, ContractError, NumericalError, Tensor

import gradcases
from oracles import naive_conv, naive_gru


def t64(a, grad=False):
    return Tensor(np.asarray(a, np.float64), requires_grad=grad)


# ---------------------------------------------------------------- conv2d

def test_conv_identity_1x1(rng):
    x = rng.uniform(size=(2, 5, 5, 3)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0] = np.eye(3)
    np.testing.assert_array_equal(nx.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_zero_kernel(rng):
    x = rng.uniform(size=(1, 6, 6, 2))
    out = nx.conv2d(t64(x), t64(np.zeros((3, 3, 2, 4))))
    assert out.shape == (1, 6, 6, 4)
    assert not out.data.any()


def test_conv_valid_summation():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out = nx.conv2d(t64(x), t64(np.ones((2, 2, 1, 1))), padding="valid")
    assert out.data.reshape(-1).tolist() == [10.0]


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("padding", ["same-zero", "same-replicate", "valid"])
def test_conv_matches_loops(rng, stride, padding):
    x, w = rng.uniform(-1, 1, (2, 7, 6, 3)), rng.uniform(-1, 1, (3, 3, 3, 4))
    out = nx.conv2d(t64(x), t64(w), stride, padding).data
    pad = 0 if padding == "valid" else 1
    ref = naive_conv(x, w, stride, pad, "replicate" if padding == "same-replicate" else "zero")
    np.testing.assert_allclose(out, ref, atol=1e-12)
    if padding != "valid":
        assert out.shape[1:3] == (-(-7 // stride), -(-6 // stride))


def test_conv_wide_input_route(rng):
    # C_in above the im2col threshold takes the per-offset path
    x, w = rng.uniform(-1, 1, (1, 5, 5, 12)), rng.uniform(-1, 1, (3, 3, 12, 2))
    np.testing.assert_allclose(nx.conv2d(t64(x), t64(w), 2).data, naive_conv(x, w, 2, 1), atol=1e-12)


def test_conv_shape_errors():
    x = t64(np.zeros((1, 4, 4, 2)))
    with pytest.raises(ContractError, match="input channels 2 != kernel input channels 3"):
        nx.conv2d(x, t64(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ContractError, match="odd kernel"):
        nx.conv2d(x, t64(np.zeros((2, 2, 2, 1))))
    with pytest.raises(ContractError, match="stride"):
        nx.conv2d(x, t64(np.zeros((3, 3, 2, 1))), stride=0)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_conv_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-1, 1, (1, 6, 6, 2)), rng.uniform(-1, 1, (1, 6, 6, 2))
    w = t64(rng.uniform(-1, 1, (3, 3, 2, 3)))
    lhs = nx.conv2d(t64(a * x + b * y), w).data
    rhs = a * nx.conv2d(t64(x), w).data + b * nx.conv2d(t64(y), w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# ---------------------------------------------------------------- dense / activations

def test_dense_examples():
    x = t64([1.0, 1.0])
    assert nx.dense(x, t64(np.eye(2)), t64([0.0, 0.0])).data.tolist() == [1.0, 1.0]
    assert nx.dense(x, t64(np.zeros((2, 2))), t64([3.0, -1.0])).data.tolist() == [3.0, -1.0]
    assert nx.dense(x, t64([[1, 2], [3, 4]]), t64([0.0, 0.0])).data.tolist() == [3.0, 7.0]
    with pytest.raises(ContractError):
        nx.dense(t64([1.0, 2.0, 3.0]), t64(np.eye(2)), t64([0.0, 0.0]))


def test_activation_values():
    z = t64([0.0])
    assert nx.activation(z, "sigmoid").data[0] == 0.5
    assert nx.activation(z, "tanh").data[0] == 0.0
    assert nx.activation(t64([-1.0]), "relu").data[0] == 0.0
    np.testing.assert_allclose(nx.activation(t64([-1.0, 2.0]), "leaky_relu").data, [-0.2, 2.0])
    with pytest.raises(ContractError):
        nx.activation(z, "swish")


def test_relu_subgradient_at_zero():
    x = t64([0.0, 1.0], grad=True)
    g = nx.backprop(nx.sum_all(nx.activation(x, "relu")), [x])[0]
    assert g.tolist() == [0.0, 1.0]


def test_sigmoid_extreme_inputs_stay_finite():
    out = nx.activation(t64([-800.0, 800.0]), "sigmoid").data
    assert out.tolist() == [0.0, 1.0]


def test_nonfinite_rejected():
    with pytest.raises(NumericalError):
        nx.tensor([1.0, np.nan])
    with pytest.raises(NumericalError):
        nx.log(t64([0.0]))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    out = nx.softmax_sites(t64(np.zeros((1, 3, 3, 4)))).data
    np.testing.assert_array_equal(out, 0.25)


def test_softmax_direct_exponentiation():
    out = nx.softmax_sites(t64([[[[10.0, 0.0, 0.0]]]])).data.ravel()
    e = np.exp([10.0, 0.0, 0.0])
    np.testing.assert_allclose(out, e / e.sum(), rtol=1e-12)
    np.testing.assert_allclose(out, [0.99990, 0.0000454, 0.0000454], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(z=arrays(np.float64, (2, 3, 3, 5), elements=st.floats(-30, 30)), shift=st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(z, shift):
    a = nx.softmax_sites(t64(z)).data
    b = nx.softmax_sites(t64(z + shift)).data
    assert np.all(a > 0)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------- conv GRU

def _gru_params(rng, Cx, Ch, scale=0.5):
    return {"w_zr": rng.uniform(-scale, scale, (3, 3, Cx + Ch, 2 * Ch)),
            "b_zr": rng.uniform(-scale, scale, 2 * Ch),
            "w_h": rng.uniform(-scale, scale, (3, 3, Cx + Ch, Ch)),
            "b_h": rng.uniform(-scale, scale, Ch)}


def test_gru_zero_case():
    p = {k: t64(np.zeros_like(v)) for k, v in _gru_params(np.random.default_rng(0), 2, 3).items()}
    out = nx.conv_gru_step(t64(np.zeros((1, 4, 4, 3))), t64(np.zeros((1, 4, 4, 2))), p)
    assert not out.data.any()


def test_gru_saturated_update_gate_keeps_state(rng):
    raw = _gru_params(rng, 2, 3)
    raw["b_zr"][:3] = 1000.0  # update gate
    p = {k: t64(v) for k, v in raw.items()}
    h = rng.uniform(-0.9, 0.9, (1, 4, 4, 3))
    out = nx.conv_gru_step(t64(h), t64(rng.uniform(-1, 1, (1, 4, 4, 2))), p)
    np.testing.assert_array_equal(out.data, h)


def test_gru_matches_unrolled_formulas(rng):
    raw = _gru_params(rng, 2, 3)
    h, x = rng.uniform(-1, 1, (2, 5, 4, 3)), rng.uniform(-1, 1, (2, 5, 4, 2))
    out = nx.conv_gru_step(t64(h), t64(x), {k: t64(v) for k, v in raw.items()}).data
    ref = naive_gru(h, x, raw["w_zr"], raw["b_zr"], raw["w_h"], raw["b_h"])
    np.testing.assert_allclose(out, ref, atol=1e-6)
    assert np.all(np.abs(out) < 1)


def test_gru_shape_mismatch(rng):
    p = {k: t64(v) for k, v in _gru_params(rng, 2, 3).items()}
    with pytest.raises(ContractError):
        nx.conv_gru_step(t64(np.zeros((1, 4, 4, 4))), t64(np.zeros((1, 4, 4, 2))), p)


# ---------------------------------------------------------------- backprop

def test_backprop_square(rng):
    x = t64(rng.uniform(-1, 1, 6), grad=True)
    (g,) = nx.backprop(nx.sum_all(nx.square(x)), [x])
    np.testing.assert_array_equal(g, 2 * x.data)


def test_backprop_independent_param_is_zero(rng):
    x, p = t64(rng.uniform(size=3), grad=True), t64(rng.uniform(size=3), grad=True)
    grads = nx.backprop(nx.sum_all(x), {"x": x, "p": p})
    assert grads["p"].tolist() == [0.0, 0.0, 0.0]


def test_backprop_rejects_nonscalar(rng):
    x = t64(rng.uniform(size=3), grad=True)
    with pytest.raises(ContractError, match="scalar"):
        nx.backprop(nx.square(x), [x])


def test_backprop_reports_only_wrt(rng):
    a, b = t64(rng.uniform(size=3), grad=True), t64(rng.uniform(size=3), grad=True)
    loss = nx.sum_all(nx.mul(a, b))
    grads = nx.backprop(loss, {"a": a})
    assert set(grads) == {"a"}
    np.testing.assert_array_equal(grads["a"], b.data)


def test_backprop_shared_subexpression(rng):
    # y used twice: gradients from both uses must accumulate
    x = t64(rng.uniform(-1, 1, 4), grad=True)
    y = nx.scale(x, 3.0)
    (g,) = nx.backprop(nx.sum_all(nx.mul(y, y)), [x])
    np.testing.assert_allclose(g, 18 * x.data)


def test_no_grad_records_nothing(rng):
    x = t64(rng.uniform(size=3), grad=True)
    with nx.no_grad():
        y = nx.square(x)
    assert not y.requires_grad and y.parents == ()


def test_finite_difference_three_layer_net(rng):
    from oracles import central_diff, max_rel_err
    x = rng.uniform(-1, 1, (1, 6, 6, 2))
    ws = [rng.uniform(-1, 1, s) for s in [(3, 3, 2, 4), (3, 3, 4, 4), (3, 3, 4, 1)]]

    def net(ts, xt):
        h = nx.activation(nx.conv2d(xt, ts[0]), "tanh")
        h = nx.activation(nx.conv2d(h, ts[1], stride=2), "tanh")
        return nx.sum_all(nx.square(nx.conv2d(h, ts[2])))

    leaves = [t64(w, grad=True) for w in ws]
    grads = nx.backprop(net(leaves, t64(x)), leaves)
    for i, w in enumerate(ws):
        def f(wi, i=i):
            ts = [t64(v) for v in ws]
            ts[i] = t64(wi)
            return float(net(ts, t64(x)).data)
        assert max_rel_err(grads[i], central_diff(f, w)) <= 1e-3


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_gradient_single_instance(name):
    assert gradcases.check(gradcases.CASES[name], np.random.default_rng(7)) <= 1e-3


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    nx.adam_update(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_is_signed_lr():
    p = {"w": np.zeros(4)}
    g = np.array([0.5, -3.0, 1e-3, -2e-2])
    st_ = AdamState(lr=0.01, beta1=0.5, beta2=0.999, eps=1e-12)
    nx.adam_update(p, {"w": g}, st_)
    # m_hat = g, v_hat = g^2 after one step
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-6)
    assert st_.t["w"] == 1


def test_adam_deterministic(rng):
    g = rng.normal(size=(3, 3)).astype(np.float32)
    out = []
    for _ in range(2):
        p = {"w": np.ones((3, 3), np.float32)}
        s = AdamState()
        for _ in range(3):
            nx.adam_update(p, {"w": g}, s)
        out.append(p["w"].tobytes())
    assert out[0] == out[1]


def test_adam_matches_textbook(rng):
    lr, b1, b2, eps = 0.01, 0.9, 0.99, 1e-8
    w = rng.normal(size=5)
    p = {"w": w.copy()}
    s = AdamState(lr, b1, b2, eps)
    m = v = np.zeros(5)
    for t in range(1, 6):
        g = rng.normal(size=5)
        nx.adam_update(p, {"w": g}, s)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        nx.adam_update({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())
