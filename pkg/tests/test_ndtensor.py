import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deen.errors import ContractError, DegenerateBatchError, DimensionError
from deen.ndtensor import Tensor, check_gradients, no_grad, ops, snapshot
from deen.ndtensor import _im2col_py, kernels


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- oracles


def conv_oracle(x, w, stride, pad, dil):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for y in range(oh):
                for xo in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                iy = y * stride - pad + i * dil
                                ix = xo * stride - pad + j * dil
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[b, ci, iy, ix] * w[oc, ci, i, j]
                    out[b, oc, y, xo] = acc
    return out


def bn_oracle(x, gamma, beta, eps):
    out = np.empty_like(x)
    for ch in range(x.shape[1]):
        vals = x[:, ch].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[:, ch] = gamma[ch] * (x[:, ch] - mu) / math.sqrt(var + eps) + beta[ch]
    return out


# ----------------------------------------------------------------- conv2d


def test_conv_pointwise_scales():
    out = ops.conv2d(T(np.ones((1, 1, 3, 3))), T([[[[2.0]]]]))
    assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_zero_weight_gives_zero():
    x = T(np.random.default_rng(0).standard_normal((2, 3, 5, 4)))
    out = ops.conv2d(x, T(np.zeros((4, 3, 3, 3))), padding=1)
    assert out.shape == (2, 4, 5, 4)
    assert not out.data.any()


def test_conv_dilated_ramp_matches_loops():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    w = np.ones((1, 1, 3, 3))
    out = ops.conv2d(T(x), T(w), stride=1, padding=2, dilation=2)
    assert out.shape == (1, 1, 5, 5)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, 1, 2, 2), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (1, 3, 3), (2, 2, 2)])
def test_conv_random_matches_loops(stride, pad, dil):
    rng = np.random.default_rng(stride * 10 + pad + dil)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    out = ops.conv2d(T(x), T(w), stride=stride, padding=pad, dilation=dil)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, stride, pad, dil), atol=1e-12)


def test_conv_output_size_formula():
    for h, k, s, p, d in [(9, 3, 2, 1, 1), (8, 3, 1, 3, 3), (7, 3, 3, 0, 2), (5, 1, 1, 0, 1)]:
        out = ops.conv2d(T(np.zeros((1, 1, h, h))), T(np.zeros((1, 1, k, k))), s, p, d)
        assert out.shape[2] == (h + 2 * p - d * (k - 1) - 1) // s + 1


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 2, 3, 3))))


def test_conv_no_window():
    with pytest.raises(DimensionError):
        ops.conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))), dilation=2)


def test_pointwise_conv_equals_linear():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 3, 4))
    w = rng.standard_normal((6, 5, 1, 1))
    conv = ops.conv2d(T(x), T(w)).data
    flat = x.transpose(0, 2, 3, 1).reshape(-1, 5)
    lin = ops.linear(T(flat), T(w[:, :, 0, 0].T)).data.reshape(2, 3, 4, 6).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(conv, lin, atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(dtype):
    from deen.ndtensor import _im2col_c

    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 4, 9, 7)).astype(dtype)
    for k, s, p, d in [(3, 1, 1, 1), (3, 1, 2, 2), (3, 1, 3, 3), (3, 2, 1, 1), (1, 1, 0, 1)]:
        oh = (9 + 2 * p - d * (k - 1) - 1) // s + 1
        ow = (7 + 2 * p - d * (k - 1) - 1) // s + 1
        a = _im2col_py.im2col(x, k, k, s, p, d, oh, ow)
        b = _im2col_c.im2col(x, k, k, s, p, d, oh, ow)
        assert a.dtype == b.dtype == dtype
        assert np.array_equal(a, b)
        g = rng.standard_normal(a.shape).astype(dtype)
        ga = _im2col_py.col2im(g, 3, 4, 9, 7, k, k, s, p, d, oh, ow)
        gb = _im2col_c.col2im(g, 3, 4, 9, 7, k, k, s, p, d, oh, ow)
        assert np.array_equal(ga, gb)


def test_compiled_backend_selected():
    assert kernels.BACKEND == "cython"


# -------------------------------------------------------------- batchnorm


def _bn(x, gamma=None, beta=None, training=True, momentum=0.1, eps=1e-5, state=None):
    c = x.shape[1]
    gamma = T(np.ones(c) if gamma is None else gamma)
    beta = T(np.zeros(c) if beta is None else beta)
    rm, rv = state if state is not None else (np.zeros(c), np.ones(c))
    return ops.batchnorm2d(T(x), gamma, beta, rm, rv, training, momentum, eps)


def test_bn_constant_channels_to_zero():
    x = np.ones((2, 3, 2, 2)) * np.array([1.0, -4.0, 7.0])[None, :, None, None]
    assert np.abs(_bn(x).data).max() == 0.0


def test_bn_standardised_input_affine():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = _bn(x, gamma=np.full(2, 2.0), beta=np.full(2, 3.0), eps=1e-5)
    np.testing.assert_allclose(out.data, 2 * x + 3, atol=1e-4)


def test_bn_matches_two_pass_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 2, 2))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    out = _bn(x, gamma, beta, eps=1e-5)
    np.testing.assert_allclose(out.data, bn_oracle(x, gamma, beta, 1e-5), atol=1e-12)
    per_ch = out.data.transpose(1, 0, 2, 3).reshape(3, -1)
    np.testing.assert_allclose(per_ch.mean(axis=1), beta, atol=1e-10)
    np.testing.assert_allclose(per_ch.std(axis=1), np.abs(gamma), rtol=1e-4)


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 2, 3, 3)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    _bn(x, momentum=0.25, state=(rm, rv))
    m = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(rm, 0.25 * m.mean(axis=1))
    np.testing.assert_allclose(rv, 0.75 + 0.25 * m.var(axis=1, ddof=1))
    out = _bn(x, training=False, eps=0.0, state=(rm, rv))
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv)[None, :, None, None]
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        _bn(np.ones((1, 2, 1, 1)))
    _bn(np.ones((1, 2, 1, 1)), training=False)


# ----------------------------------------------------------------- linear


def test_linear_identity_and_bias():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(ops.linear(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)
    out = ops.linear(T(np.zeros((2, 3))), T(np.ones((3, 2))), T([1.5, -2.0]))
    assert np.array_equal(out.data, [[1.5, -2.0], [1.5, -2.0]])


def test_linear_triple_loop():
    rng = np.random.default_rng(7)
    x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    expect = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            expect[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(3))
    np.testing.assert_allclose(ops.linear(T(x), T(w), T(b)).data, expect, atol=1e-14)


def test_linear_dim_mismatch():
    with pytest.raises(DimensionError):
        ops.linear(T(np.zeros((2, 3))), T(np.zeros((4, 2))))


# ---------------------------------------------------------------- softmax


def test_softmax_analytic_cases():
    np.testing.assert_allclose(ops.softmax(T(np.full((2, 4), 0.7)), axis=1).data, 0.25, atol=1e-15)
    np.testing.assert_allclose(ops.softmax(T([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-1e3, 1e3),
)
def test_softmax_sums_to_one_and_shift_invariant(vals, c):
    x = np.array(vals)
    y = ops.softmax(T(x)).data
    assert (y > 0).all()
    assert abs(y.sum() - 1) < 1e-6
    np.testing.assert_allclose(ops.softmax(T(x + c)).data, y, atol=1e-9)


# ---------------------------------------------------------------- pooling


def test_gap_cases():
    assert np.array_equal(ops.global_avg_pool(T(np.full((2, 3, 4, 5), 1.25))).data, np.full((2, 3), 1.25))
    x = np.random.default_rng(0).standard_normal((2, 3, 1, 1))
    assert np.array_equal(ops.global_avg_pool(T(x)).data, x.reshape(2, 3))
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 5))
    expect = np.array([[sum(x[n, c].ravel()) / 20 for c in range(3)] for n in range(2)])
    np.testing.assert_allclose(ops.global_avg_pool(T(x)).data, expect, atol=1e-14)


def test_adaptive_pool_even_factor():
    x = np.random.default_rng(2).standard_normal((1, 2, 8, 4))
    out = ops.adaptive_avg_pool2d(T(x), (4, 2)).data
    expect = x.reshape(1, 2, 4, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(out, expect, atol=1e-14)
    with pytest.raises(DimensionError):
        ops.adaptive_avg_pool2d(T(x), (16, 4))


# ------------------------------------------------------------ elementwise


def test_elementwise_examples():
    assert np.array_equal(ops.relu(T([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    u = T([0.3, -1.2, 4.0])
    assert ops.euclidean_distance(u, u).item() <= 1e-6
    assert ops.euclidean_distance(T([0.0, 0.0]), T([3.0, 4.0])).item() == pytest.approx(5.0, abs=1e-12)
    c = ops.concat([T(np.ones((2, 3))), T(np.zeros((1, 3)))], axis=0)
    assert c.shape == (3, 3)
    np.testing.assert_allclose(ops.l2_normalize(T([[3.0, 4.0], [0.0, 0.0]])).data, [[0.6, 0.8], [0, 0]])


def test_elementwise_shape_errors():
    with pytest.raises(DimensionError):
        ops.add(T(np.zeros(3)), T(np.zeros(4)))
    with pytest.raises(DimensionError):
        ops.concat([T(np.zeros((2, 3))), T(np.zeros((2, 4)))], axis=0)
    with pytest.raises(DimensionError):
        ops.euclidean_distance(T(np.zeros(2)), T(np.zeros(3)))


# --------------------------------------------------------------- backward


def test_backward_sum_and_dot():
    x = T([1.0, -2.0, 3.5], grad=True)
    ops.sum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    x = T([1.0, -2.0, 3.5], grad=True)
    ops.dot(x, x).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_nonscalar_rejected():
    x = T(np.ones(3), grad=True)
    with pytest.raises(ContractError):
        ops.scale(x, 2.0).backward()


def test_fanout_accumulation_is_exactly_double():
    rng = np.random.default_rng(9)
    x = T(rng.standard_normal((2, 3, 5, 5)), grad=True)
    w = T(rng.standard_normal((2, 3, 3, 3)))

    def f(inp):
        return ops.sum(ops.relu(ops.conv2d(inp, w, padding=1)))

    f(x).backward()
    single = x.grad.copy()
    x.grad = None
    (f(x) + f(x)).backward()
    assert np.array_equal(x.grad, 2 * single)


def test_no_grad_records_nothing():
    x = T(np.ones(3), grad=True)
    with no_grad():
        y = ops.scale(x, 3.0)
    assert not y.requires_grad


def test_tape_order_visits_once():
    from deen.ndtensor import Tape

    x = T(np.ones(3), grad=True)
    y = ops.scale(x, 2.0)
    z = ops.add(y, ops.mul(y, x))
    tape = Tape.build(ops.sum(z))
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


# --------------------------------------------------------------- gradchecks

N_INSTANCES = 20


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


GRAD_CASES = {
    "conv_d1": lambda r: (lambda x, w: ops.conv2d(x, w, 1, 1, 1), [_rand(r, 2, 3, 5, 4), _rand(r, 2, 3, 3, 3)]),
    "conv_d2": lambda r: (lambda x, w: ops.conv2d(x, w, 1, 2, 2), [_rand(r, 1, 2, 6, 5), _rand(r, 3, 2, 3, 3)]),
    "conv_d3": lambda r: (lambda x, w: ops.conv2d(x, w, 1, 3, 3), [_rand(r, 1, 2, 5, 5), _rand(r, 2, 2, 3, 3)]),
    "conv_stride2": lambda r: (lambda x, w: ops.conv2d(x, w, 2, 1, 1), [_rand(r, 2, 2, 6, 5), _rand(r, 2, 2, 3, 3)]),
    "conv_1x1": lambda r: (lambda x, w: ops.conv2d(x, w), [_rand(r, 2, 3, 2, 3), _rand(r, 4, 3, 1, 1)]),
    "bn_train": lambda r: (
        lambda x, g, b: ops.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True),
        [_rand(r, 3, 3, 2, 2), _rand(r, 3), _rand(r, 3)],
    ),
    "bn_eval": lambda r: (
        lambda x, g, b: ops.batchnorm2d(x, g, b, np.full(3, 0.2), np.full(3, 1.7), False),
        [_rand(r, 2, 3, 2, 2), _rand(r, 3), _rand(r, 3)],
    ),
    "bn_1d": lambda r: (
        lambda x, g, b: ops.batchnorm2d(x, g, b, np.zeros(4), np.ones(4), True),
        [_rand(r, 5, 4), _rand(r, 4), _rand(r, 4)],
    ),
    "linear": lambda r: (lambda x, w, b: ops.linear(x, w, b), [_rand(r, 3, 4), _rand(r, 4, 2), _rand(r, 2)]),
    "softmax": lambda r: (lambda x: ops.softmax(x, axis=1), [_rand(r, 3, 5)]),
    "log_softmax": lambda r: (lambda x: ops.log_softmax(x, axis=1), [_rand(r, 3, 5)]),
    "gap": lambda r: (ops.global_avg_pool, [_rand(r, 2, 3, 3, 4)]),
    "adaptive_pool": lambda r: (lambda x: ops.adaptive_avg_pool2d(x, (3, 2)), [_rand(r, 2, 2, 7, 5)]),
    "relu": lambda r: (ops.relu, [_rand(r, 4, 5)]),
    "add": lambda r: (ops.add, [_rand(r, 3, 4), _rand(r, 3, 4)]),
    "sub_mul": lambda r: (lambda x, y: ops.mul(ops.sub(x, y), y), [_rand(r, 3, 4), _rand(r, 3, 4)]),
    "scale_shift": lambda r: (lambda x: ops.shift(ops.scale(x, -1.7), 0.3), [_rand(r, 5)]),
    "concat": lambda r: (lambda x, y: ops.concat([x, y], axis=1), [_rand(r, 2, 3), _rand(r, 2, 2)]),
    "l2_normalize": lambda r: (lambda x: ops.l2_normalize(x, axis=1), [_rand(r, 3, 4)]),
    "euclidean": lambda r: (ops.euclidean_distance, [_rand(r, 3, 4), _rand(r, 3, 4)]),
    "pairwise": lambda r: (ops.pairwise_distance, [_rand(r, 3, 4), _rand(r, 5, 4)]),
    "matmul_batched": lambda r: (ops.matmul, [_rand(r, 2, 3, 4), _rand(r, 2, 4, 2)]),
    "transpose_reshape": lambda r: (
        lambda x: ops.reshape(ops.transpose(x, (2, 0, 1)), (4, 6)),
        [_rand(r, 2, 3, 4)],
    ),
    "index": lambda r: (lambda x: ops.index(x, (np.array([0, 2, 0]), np.array([1, 1, 3]))), [_rand(r, 3, 4)]),
    "mean_axis": lambda r: (lambda x: ops.mean(x, axis=(0, 2)), [_rand(r, 2, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_ops(name):
    for k in range(N_INSTANCES):
        fn, inputs = GRAD_CASES[name](np.random.default_rng(1000 + k))
        rep = check_gradients(fn, inputs, seed=k)
        assert rep.ok, (name, k, rep)


# ------------------------------------------------------------- snapshots


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_snapshot_roundtrip(tmp_path, dtype):
    x = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
    path = tmp_path / "x.ndts"
    snapshot.save(path, x)
    y = snapshot.load(path)
    assert y.dtype == dtype and np.array_equal(x, y)
    raw = path.read_bytes()
    assert raw[:4] == b"NDTS" and len(raw) == 8 + 3 * 8 + x.nbytes


def test_snapshot_rejects_garbage():
    from deen.errors import DataError

    with pytest.raises(DataError):
        snapshot.from_bytes(b"nope")
