import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qsep import tensor as T
from qsep.tensor import Tensor


def _rng(seed=0):
    return np.random.default_rng(seed)


def _check(fn, inputs, tol=1e-6, **kw):
    report = T.gradient_check(fn, inputs, tol=tol, **kw)
    assert report.passed, report


def _weighted_sum(y, seed=1):
    # random projection so every output element contributes a distinct weight
    w = _rng(seed).standard_normal(y.shape)
    return T.sum_(T.mul(y, Tensor(w)))


# --- elementwise -----------------------------------------------------------


def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_symmetry_point():
    assert T.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_abs_gradient_away_from_zero():
    x = Tensor([-2.0, 3.0], requires_grad=True)
    T.backward(T.sum_(T.abs_(x)))
    assert x.grad.tolist() == [-1.0, 1.0]


def test_elementwise_dispatch_and_unknown_kind():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert T.elementwise("add", a, b).data.tolist() == [4.0, 7.0]
    assert T.elementwise("scale", a, 3).data.tolist() == [3.0, 6.0]
    assert T.elementwise("neg", a).data.tolist() == [-1.0, -2.0]
    with pytest.raises(ValueError):
        T.elementwise("pow", a, b)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_log_of_non_positive_raises():
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))


def test_non_finite_forward_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.exp(Tensor([1000.0]))


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_gradients(kind):
    r = _rng()
    a, b = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    _check(lambda x, y: _weighted_sum(T.elementwise(kind, x, y)), [a, b])


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "exp", "neg", "abs", "tanh", "scale"])
def test_unary_gradients(kind):
    # keep inputs away from the kinks of relu/abs
    x = _rng(2).uniform(0.2, 1.5, size=(4, 3)) * np.sign(_rng(3).standard_normal((4, 3)))
    fn = (lambda t: T.elementwise(kind, t, 2.5)) if kind == "scale" else (lambda t: T.elementwise(kind, t))
    _check(lambda t: _weighted_sum(fn(t)), [x])


def test_log_and_leaky_relu_and_clip_gradients():
    x = _rng(4).uniform(0.5, 2.0, size=(5,))
    _check(lambda t: _weighted_sum(T.log(t)), [x])
    y = np.array([-1.3, -0.4, 0.6, 2.0])
    _check(lambda t: _weighted_sum(T.leaky_relu(t, 0.2)), [y])
    _check(lambda t: _weighted_sum(T.clip(t, -1.0, 1.0)), [y])


# --- matmul / shape ops ----------------------------------------------------


def test_matmul_examples():
    assert T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]])).data.tolist() == [[1, 2], [3, 4]]
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    r = _rng(5)
    _check(lambda a, b: _weighted_sum(T.matmul(a, b)), [r.standard_normal((3, 4)), r.standard_normal((4, 2))])


def test_concat_split_round_trip():
    a, b = _rng(6).standard_normal((2, 3)), _rng(7).standard_normal((4, 3))
    c = T.concat([Tensor(a), Tensor(b)], axis=0)
    x, y = T.split(c, [2, 4], axis=0)
    assert np.array_equal(x.data, a) and np.array_equal(y.data, b)


def test_mean_and_reshape():
    assert T.mean(Tensor([2.0, 4.0])).item() == 3.0
    x = np.arange(12.0).reshape(3, 4)
    assert T.reshape(Tensor(x), (2, 6)).data.tolist() == x.reshape(2, 6).tolist()
    with pytest.raises(ValueError):
        T.reshape(Tensor(x), (5, 2))


def test_shape_op_gradients():
    r = _rng(8)
    x, y = r.standard_normal((2, 3, 4)), r.standard_normal((2, 2, 4))
    _check(lambda a, b: _weighted_sum(T.concat([a, b], axis=1)), [x, y])
    _check(lambda a: _weighted_sum(T.reshape(a, (4, 6))), [x])
    _check(lambda a: _weighted_sum(T.transpose(a, (2, 0, 1))), [x])
    _check(lambda a: _weighted_sum(T.slice_axis(a, 2, 1, 3)), [x])
    _check(lambda a: _weighted_sum(T.reduce("sum", a, (0, 2))), [x])
    _check(lambda a: _weighted_sum(T.reduce("mean", a, 1)), [x])
    _check(lambda a: _weighted_sum(T.expand(a, (5, 3, 4))), [r.standard_normal((1, 3, 4))])
    _check(lambda a, b: _weighted_sum(T.bias_add(a, b)), [x, r.standard_normal(3)])


# --- convolution -----------------------------------------------------------


def _naive_conv(x, w, stride, padding):
    (pt, pb), (pl, pr) = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    kh, kw = w.shape[2:]
    ho = (xp.shape[2] - kh) // stride[0] + 1
    wo = (xp.shape[3] - kw) // stride[1] + 1
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride[0]:i * stride[0] + kh, j * stride[1]:j * stride[1] + kw]
            for o in range(w.shape[0]):
                out[:, o, i, j] = (patch * w[o]).sum(axis=(1, 2, 3))
    return out


def test_conv_identity_kernel():
    x = _rng(9).standard_normal((3, 5, 6))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_direct_sum_example():
    y = T.conv2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor([[[[1.0, 0.0], [0.0, 1.0]]]]))
    assert y.data.tolist() == [[[5.0]]]


def test_conv_output_shape_arithmetic():
    assert T.conv_output_size(512, 4, 2, (1, 1)) == 256
    assert T.same_padding(4, 2) == (1, 1)
    assert T.same_padding(4, 1) == (1, 2)
    y = T.conv2d(Tensor(np.zeros((1, 512, 8))), Tensor(np.zeros((2, 1, 4, 4))), (2, 1), ((1, 1), (1, 2)))
    assert y.shape == (2, 256, 8)


def test_conv_kernel_larger_than_input_raises():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))


@pytest.mark.parametrize("stride", [(1, 1), (2, 2), (2, 1), (1, 3)])
def test_conv_matches_direct_sum(stride):
    r = _rng(10)
    x, w = r.standard_normal((2, 3, 9, 8)), r.standard_normal((4, 3, 4, 3))
    pad = ((1, 2), (0, 1))
    assert np.allclose(T.conv2d(Tensor(x), Tensor(w), stride, pad).data, _naive_conv(x, w, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride", [(1, 1), (2, 2), (2, 1)])
def test_conv_gradients(stride):
    r = _rng(11)
    x, w = r.standard_normal((2, 3, 8, 6)), r.standard_normal((4, 3, 4, 4))
    pad = (T.same_padding(4, stride[0]), T.same_padding(4, stride[1]))
    _check(lambda a, b: _weighted_sum(T.conv2d(a, b, stride, pad)), [x, w])


@pytest.mark.parametrize("stride", [(1, 1), (2, 2), (2, 1)])
def test_transpose_conv_is_adjoint(stride):
    r = _rng(12)
    x, w = r.standard_normal((2, 3, 8, 6)), r.standard_normal((4, 3, 4, 4))
    pad = (T.same_padding(4, stride[0]), T.same_padding(4, stride[1]))
    y = T.conv2d(Tensor(x), Tensor(w), stride, pad)
    g = r.standard_normal(y.shape)
    xt = T.conv2d_transpose(Tensor(g), Tensor(w), stride, pad, (8, 6))
    lhs, rhs = float(np.sum(y.data * g)), float(np.sum(x * xt.data))
    assert abs(lhs - rhs) / abs(lhs) < 1e-10


def test_transpose_conv_shapes_and_linearity():
    w = _rng(13).standard_normal((3, 2, 4, 4))
    y = T.conv2d_transpose(Tensor(np.zeros((3, 1, 1))), Tensor(w), (2, 2), ((1, 1), (1, 1)), (2, 2))
    assert y.shape == (2, 2, 2) and not np.any(y.data)
    with pytest.raises(ValueError):
        T.conv2d_transpose(Tensor(np.zeros((3, 1, 1))), Tensor(w), (2, 2), ((1, 1), (1, 1)), (5, 5))


def test_transpose_conv_gradients():
    r = _rng(14)
    g, w = r.standard_normal((2, 4, 4, 3)), r.standard_normal((4, 3, 4, 4))
    _check(lambda a, b: _weighted_sum(T.conv2d_transpose(a, b, (2, 2), ((1, 1), (1, 1)), (8, 6))), [g, w])


def test_tiled_conv_equals_concat_then_conv():
    r = _rng(15)
    z, w = r.standard_normal((2, 5)), r.standard_normal((3, 5, 4, 4))
    pad = ((1, 1), (1, 2))
    tiled = np.broadcast_to(z[:, :, None, None], (2, 5, 8, 6))
    ref = _naive_conv(tiled, w, (2, 1), pad)
    assert np.allclose(T.tiled_conv2d(Tensor(z), Tensor(w), (8, 6), (2, 1), pad).data, ref, atol=1e-12)
    _check(lambda a, b: _weighted_sum(T.tiled_conv2d(a, b, (8, 6), (2, 1), pad)), [z, w])


def test_reduced_precision_conv_is_close():
    r = _rng(16)
    x, w = r.standard_normal((2, 3, 8, 6)), r.standard_normal((4, 3, 4, 4))
    ref = T.conv2d(Tensor(x), Tensor(w), (2, 1), ((1, 1), (1, 2))).data
    with T.conv_precision("float32"):
        y = T.conv2d(Tensor(x), Tensor(w), (2, 1), ((1, 1), (1, 2))).data
    assert y.dtype == np.float64
    assert np.allclose(y, ref, atol=1e-4)
    assert T.conv_dtype() is np.float64


# --- normalization ---------------------------------------------------------


def test_instance_norm_examples():
    const = T.instance_norm(Tensor(np.full((1, 3, 3), 7.0)))
    assert np.max(np.abs(const.data)) <= 1e-3
    y = T.instance_norm(Tensor([[[1.0, 3.0]]]))
    assert np.allclose(y.data, [[[-0.9999950000374997, 0.9999950000374997]]], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-100, 100)))
def test_instance_norm_moments(x):
    y = T.instance_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=(1, 2))) < 1e-10)
    assert np.all(y.var(axis=(1, 2)) <= 1.0 + 1e-12)
    spread = x.reshape(3, -1).var(axis=1)
    varied = spread > 1.0  # eps is negligible only when the channel actually varies
    assert np.all(y.reshape(3, -1).var(axis=1)[varied] >= 1 - 1e-3)


def test_instance_norm_gradient():
    _check(lambda a: _weighted_sum(T.instance_norm(a)), [_rng(17).standard_normal((2, 3, 4, 5))])


def test_adain_examples():
    x = _rng(18).standard_normal((3, 6, 5))
    assert np.allclose(T.adain(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data, T.instance_norm(Tensor(x)).data)
    yb = np.array([0.5, -1.0, 2.0])
    collapsed = T.adain(Tensor(x), Tensor(np.zeros(3)), Tensor(yb)).data
    assert np.array_equal(collapsed, np.broadcast_to(yb[:, None, None], x.shape))
    with pytest.raises(ValueError):
        T.adain(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_adain_gradient():
    r = _rng(19)
    _check(lambda a, s, b: _weighted_sum(T.adain(a, s, b)),
           [r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3)), r.standard_normal((2, 3))])


# --- GRU -------------------------------------------------------------------


def _scalar_gru():
    vals = dict(w_ir=0.5, w_hr=-0.7, b_r=0.1, w_iz=0.3, w_hz=0.2, b_z=-0.1, w_in=0.4, w_hn=0.6, b_n=0.2)
    return {k: Tensor(np.array([[v]]) if k.startswith("w") else np.array([v])) for k, v in vals.items()}


def test_gru_hand_evaluated_steps():
    states, final = T.gru_forward(_scalar_gru(), [Tensor([2.0])])
    assert final.data[0] == pytest.approx(0.2875327669922985, abs=1e-15)
    _, final = T.gru_forward(_scalar_gru(), [Tensor([2.0]), Tensor([-1.0])])
    assert final.data[0] == pytest.approx(0.03866405118162937, abs=1e-15)


def test_gru_saturated_update_gate_keeps_zero_state():
    p = {k: Tensor(_rng(20).standard_normal((2, 3) if k.startswith("w_i") else (3, 3) if k.startswith("w_h") else 3))
         for k in T.GRU_KEYS}
    p["w_iz"], p["w_hz"], p["b_z"] = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), Tensor(np.full(3, 40.0))
    states, final = T.gru_forward(p, [Tensor(v) for v in _rng(21).standard_normal((4, 2))])
    assert len(states) == 4
    assert np.max(np.abs(final.data)) < 1e-15


def test_gru_errors_and_gradient():
    with pytest.raises(ValueError):
        T.gru_forward(_scalar_gru(), [])
    r = _rng(22)
    shapes = {k: (2, 3) if k.startswith("w_i") else (3, 3) if k.startswith("w_h") else (3,) for k in T.GRU_KEYS}
    values = [r.standard_normal(shapes[k]) * 0.7 for k in T.GRU_KEYS]
    xs = r.standard_normal((2, 2))

    def fn(*ps):
        _, final = T.gru_forward(dict(zip(T.GRU_KEYS, ps)), [Tensor(x) for x in xs])
        return T.sum_(final)

    _check(fn, values, tol=1e-4)


# --- backward / Adam -------------------------------------------------------


def test_backward_accumulates_shared_leaf():
    x = Tensor([1.5, -2.0], requires_grad=True)
    y = T.add(T.mul(x, x), T.scale(x, 3.0))
    grads = T.backward(T.sum_(y))
    assert np.allclose(grads[x], 2 * x.data + 3.0)
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        T.backward(T.scale(Tensor([1.0, 2.0], requires_grad=True), 2.0))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


def _adam_reference(p, grads, lr, b1, b2, eps):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_bias_corrected_reference():
    r = _rng(23)
    p0 = r.standard_normal(5)
    grads = [r.standard_normal(5) for _ in range(4)]
    params = {"w": Tensor(p0.copy(), requires_grad=True)}
    state = T.AdamState()
    for g in grads:
        T.adam_step(params, {"w": g}, state, lr=0.01)
    assert state.t == 4
    assert np.allclose(params["w"].data, _adam_reference(p0, grads, 0.01, 0.5, 0.999, 1e-8), atol=1e-14)


def test_adam_first_step_moves_by_lr():
    # with bias correction the first update is lr * sign(g) (up to eps)
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    T.adam_step(params, {"w": np.array([3.0, -0.2, 1e-3])}, T.AdamState(), lr=0.1)
    assert np.allclose(params["w"].data, [-0.1, 0.1, -0.1], atol=1e-5)


def test_gradient_check_detects_wrong_backward():
    def bad(a):
        return T.make_op(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    report = T.gradient_check(lambda a: T.sum_(bad(a)), [np.array([1.0, 2.0])])
    assert not report.passed
