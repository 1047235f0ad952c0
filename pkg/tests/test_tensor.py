import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimofan import kernels
from mimofan import tensor as T
from mimofan.tensor import Tape, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- Tensor container -----------------------------------------------------


def test_tensor_requires_rank4_and_positive_dims():
    with pytest.raises(T.DimensionError):
        Tensor(np.zeros((2, 2)))
    with pytest.raises(T.DimensionError):
        Tensor(np.zeros((1, 0, 2, 2)))


def test_tensor_casts_integer_data():
    assert Tensor(np.ones((1, 1, 2, 2), dtype=np.int32)).dtype == np.float64


# -- conv2d ---------------------------------------------------------------


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((2, 3, 5, 4)))
    k = np.zeros((3, 3, 1, 1))
    k[np.arange(3), np.arange(3)] = 1.0
    out = T.conv2d(x, t64(k), t64(np.zeros((1, 3, 1, 1))))
    assert np.max(np.abs(out.data - x.data)) <= 1e-12


def test_conv_ones_hand_count():
    out = T.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), pad=1)
    np.testing.assert_array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_output_shape():
    out = T.conv2d(t64(np.zeros((2, 3, 8, 8))), t64(np.zeros((4, 3, 3, 3))), pad=1)
    assert out.shape == (2, 4, 8, 8)
    out = T.conv2d(t64(np.zeros((1, 2, 7, 6))), t64(np.zeros((3, 2, 3, 3))), stride=2)
    assert out.shape == (1, 3, 3, 2)


def test_conv_is_cross_correlation():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 0, 0] = 1.0  # picks the top-left neighbour without a flip
    out = T.conv2d(t64(x), t64(k), pad=1)
    assert out.data[0, 0, 1, 1] == x[0, 0, 0, 0]


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(T.DimensionError, match="channel"):
        T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))


def _direct_conv(x, k, b, stride, pad):
    # straight-line loop oracle
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for i in range(n):
        for o in range(co):
            for y in range(oh):
                for xx in range(ow):
                    patch = xp[i, :, y * stride : y * stride + kh, xx * stride : xx * stride + kw]
                    out[i, o, y, xx] = np.sum(patch * k[o]) + b[0, o, 0, 0]
    return out


@pytest.mark.parametrize("cin,cout,k,stride,pad", [(3, 2, 3, 1, 1), (2, 4, 3, 1, 1), (3, 3, 1, 1, 0), (2, 3, 3, 2, 1), (4, 1, 2, 1, 0)])
def test_conv_matches_loop_oracle(cin, cout, k, stride, pad):
    rng = np.random.default_rng(cin * 100 + cout)
    x = rng.standard_normal((2, cin, 6, 5))
    w = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal((1, cout, 1, 1))
    out = T.conv2d(t64(x), t64(w), t64(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, _direct_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_tap_and_column_paths_agree():
    rng = np.random.default_rng(3)
    x = t64(rng.standard_normal((2, 6, 7, 5)), grad=True)
    w = t64(rng.standard_normal((2, 6, 3, 3)), grad=True)
    g = rng.standard_normal((2, 2, 7, 5))
    a_out, a_grads = T._conv_taps(x, w, 1, 7, 5)
    b_out, b_grads = T._conv_cols(x, w, 1, 1, 7, 5)
    np.testing.assert_allclose(a_out, b_out, rtol=1e-12, atol=1e-12)
    for ga, gb in zip(a_grads(g, True, True), b_grads(g, True, True)):
        np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-12)


# -- pooling / upsampling ---------------------------------------------------


def test_avg_pool_hand_case():
    np.testing.assert_array_equal(T.avg_pool2(t64([[[[0, 2], [4, 6]]]])).data, [[[[3]]]])


def test_avg_pool_constant_and_shape():
    out = T.avg_pool2(Tensor(np.full((1, 1, 256, 256), 0.3, dtype=np.float32)))
    assert out.shape == (1, 1, 128, 128)
    assert np.all(out.data == np.float32(0.3))


def test_avg_pool_rejects_odd():
    with pytest.raises(T.DimensionError):
        T.avg_pool2(t64(np.zeros((1, 1, 3, 4))))


def test_upsample_examples():
    np.testing.assert_allclose(T.upsample2_bilinear(t64([[[[0.0, 1.0]]]])).data[0, 0, 0], [0, 0.25, 0.75, 1])
    np.testing.assert_array_equal(T.upsample2_bilinear(t64([[[[2.5]]]])).data, np.full((1, 1, 2, 2), 2.5))
    c = T.upsample2_bilinear(t64(np.full((2, 3, 3, 4), -1.25)))
    assert c.shape == (2, 3, 6, 8) and np.all(c.data == -1.25)


def _bilinear_oracle(x):
    # general half-pixel formula: src = (dst + 0.5) / 2 - 0.5, clamped
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for oy in range(2 * h):
        sy = min(max((oy + 0.5) / 2 - 0.5, 0), h - 1)
        y0 = int(math.floor(sy))
        y1, fy = min(y0 + 1, h - 1), sy - y0
        for ox in range(2 * w):
            sx = min(max((ox + 0.5) / 2 - 0.5, 0), w - 1)
            x0 = int(math.floor(sx))
            x1, fx = min(x0 + 1, w - 1), sx - x0
            top = (1 - fx) * x[:, :, y0, x0] + fx * x[:, :, y0, x1]
            bot = (1 - fx) * x[:, :, y1, x0] + fx * x[:, :, y1, x1]
            out[:, :, oy, ox] = (1 - fy) * top + fy * bot
    return out


def test_upsample_matches_half_pixel_formula():
    x = np.random.default_rng(1).standard_normal((2, 2, 4, 3))
    np.testing.assert_allclose(T.upsample2_bilinear(t64(x)).data, _bilinear_oracle(x), atol=1e-12)


# -- batch norm -------------------------------------------------------------


def _bn_params(c):
    return t64(np.ones((1, c, 1, 1))), t64(np.zeros((1, c, 1, 1)))


def test_bn_constant_input_collapses():
    g, b = _bn_params(2)
    out = T.batch_norm(t64(np.full((2, 2, 3, 3), 4.0)), g, b, T.BatchNormState.fresh(2, np.float64), True)
    assert np.max(np.abs(out.data)) <= 1e-3


def test_bn_train_statistics_and_running_update():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    g, b = _bn_params(3)
    state = T.BatchNormState.fresh(3, np.float64)
    out = T.batch_norm(t64(x), g, b, state, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    mean = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var_unbiased, rtol=1e-12)


def test_bn_eval_hand_case():
    state = T.BatchNormState(np.array([1.0]), np.array([4.0]))
    gamma, beta = t64([[[[2.0]]]]), t64([[[[0.5]]]])
    out = T.batch_norm(t64([[[[3.0, -1.0]]]]), gamma, beta, state, False)
    expect = (np.array([3.0, -1.0]) - 1.0) / math.sqrt(4.0 + 1e-5) * 2.0 + 0.5
    np.testing.assert_allclose(out.data[0, 0, 0], expect, rtol=1e-14)
    assert state.running_mean[0] == 1.0  # eval leaves stats alone


# -- elementwise and channel ops ------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_channels(t64(np.zeros((1, 2, 1, 1)))).data.ravel(), [0.5, 0.5])
    out = T.softmax_channels(t64(np.array([math.log(3), 0.0]).reshape(1, 2, 1, 1)))
    np.testing.assert_allclose(out.data.ravel(), [0.75, 0.25], rtol=1e-14)


def test_softmax_stable_for_large_logits():
    out = T.softmax_channels(t64(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1)))
    assert np.all(np.isfinite(out.data)) and out.data[0, 0, 0, 0] == 1.0


def test_concat_and_add_shapes():
    out = T.concat_channels([t64(np.zeros((1, 2, 4, 4))), t64(np.ones((1, 3, 4, 4)))])
    assert out.shape == (1, 5, 4, 4)
    with pytest.raises(T.DimensionError):
        T.concat_channels([t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 4, 2)))])
    with pytest.raises(T.DimensionError):
        T.add(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 4, 4))))


def test_relu_values():
    np.testing.assert_array_equal(T.relu(t64([[[[-1.0, 0.0, 2.0]]]])).data, [[[[0, 0, 2]]]])


# -- tape semantics ---------------------------------------------------------


def test_sum_gradient_is_ones():
    x = t64(np.random.default_rng(0).standard_normal((2, 3, 4, 5)), grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(x)
    x.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_second_backward_accumulates():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(T.scale(x, 3.0))
    x.zero_grad()
    tape.backward(loss)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 6.0))


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        y = T.relu(x)
    with pytest.raises(T.ContractError):
        tape.backward(y)
    with pytest.raises(T.ContractError):
        tape.backward(t64([[[[1.0]]]]))


def test_node_order_is_topological_and_visits_once():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        a = T.relu(x)
        b = T.add(a, a)  # fan-out: a feeds b twice
        loss = T.tensor_sum(b)
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen for i in node.inputs)
        seen.add(id(node.output))
    x.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))


def test_verify64_rejects_float32_and_nonfinite():
    with pytest.raises(T.ContractError):
        with Tape("verify64"):
            T.relu(Tensor(np.ones((1, 1, 1, 1), np.float32), requires_grad=True))
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        with Tape("verify64"):
            T.scale(t64([[[[1e308]]]], grad=True), 10.0)


def test_unknown_precision():
    with pytest.raises(ValueError):
        Tape("fp16")


# -- properties -------------------------------------------------------------

small = st.integers(1, 4)


@settings(max_examples=40, deadline=None)
@given(n=small, c=small, h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_softmax_sums_to_one(n, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h, w)) * 10
    p = T.softmax_channels(t64(x)).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(n=small, c=small, h=st.integers(1, 3), w=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_pool_upsample_preserve_mean(n, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, 2 * h, 2 * w))
    y = T.upsample2_bilinear(T.avg_pool2(t64(x))).data
    assert abs(y.mean() - x.mean()) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_ops_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    k = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)

    def run():
        y = T.conv2d(Tensor(x), Tensor(k), pad=1)
        return T.softmax_channels(T.upsample2_bilinear(T.avg_pool2(T.relu(y)))).data

    assert np.array_equal(run(), run())


# -- compiled vs fallback kernels -----------------------------------------


needs_compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled kernels not built")


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bitwise_equal(dtype):
    rng = np.random.default_rng(5)
    py, cy = kernels.python_backend, kernels.compiled_backend
    for shape, k, stride, pad in [((2, 3, 7, 6), 3, 1, 1), ((1, 2, 9, 8), 3, 2, 1), ((2, 1, 5, 5), 1, 1, 0), ((1, 2, 6, 7), 2, 2, 0)]:
        x = rng.standard_normal(shape).astype(dtype)
        cols = py.im2col(x, k, k, stride, pad)
        assert np.array_equal(cols, cy.im2col(x, k, k, stride, pad))
        assert np.array_equal(py.col2im(cols, shape, k, k, stride, pad), cy.col2im(cols, shape, k, k, stride, pad))
    x = rng.standard_normal((2, 3, 5, 4)).astype(dtype)
    assert np.array_equal(py.upsample2(x), cy.upsample2(x))
    g = rng.standard_normal((2, 3, 10, 8)).astype(dtype)
    assert np.array_equal(py.upsample2_backward(g), cy.upsample2_backward(g))
    y = rng.standard_normal((2, 9, 4, 7, 6)).astype(dtype)
    assert np.array_equal(py.tap_gather(y, 3, 3, 5, 4), cy.tap_gather(y, 3, 3, 5, 4))
    g = rng.standard_normal((2, 4, 5, 4)).astype(dtype)
    assert np.array_equal(py.tap_scatter(g, 3, 3, 7, 6), cy.tap_scatter(g, 3, 3, 7, 6))


@needs_compiled
def test_backend_switch_gives_identical_network_step():
    from mimofan.metrics import dps_loss
    from mimofan.network import NetworkConfig, build
    from mimofan.pyramid import label_pyramid

    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 1, 16, 16)).astype(np.float32))
    y = label_pyramid(Tensor((rng.random((2, 1, 16, 16)) > 0.5).astype(np.float32)), 3)
    grads = {}
    for name in ("python", "cython"):
        with kernels.use_backend(name):
            model = build(NetworkConfig(scales=3, filters=2), 0)
            with Tape() as tape:
                loss = dps_loss(model.forward(x), y)
            model.zero_grad()
            tape.backward(loss)
            grads[name] = (loss.item(), {k: p.grad.copy() for k, p in model.params.items()})
    assert grads["python"][0] == grads["cython"][0]
    for k, g in grads["python"][1].items():
        assert np.array_equal(g, grads["cython"][1][k]), k


def test_backend_names():
    assert kernels.backend_name() in kernels.available_backends()
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")
