import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctstandard.autodiff import (
    SGD,
    MissingGradientError,
    NotScalarError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    grad_check,
    sgd_momentum_step,
)
from ctstandard.autodiff import functional as F


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_oracle(x, k, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    out[b, o, i, j] = np.sum(xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * k[o])
    return out


def scatter_oracle(x, k, stride, pad):
    """Transposed convolution as a scatter-add of kernel copies."""
    n, c, h, w = x.shape
    _, f, kh, kw = k.shape
    full = np.zeros((n, f, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for b in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    full[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[b, ci, i, j] * k[ci]
    return full[:, :, pad:full.shape[2] - pad, pad:full.shape[3] - pad]


# --- conv2d ------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = F.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_two_by_two_sum():
    out = F.conv2d(t64([[[[1, 2], [3, 4]]]]), t64([[[[1, 0], [0, 1]]]]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 5.0


def test_conv_stride_two_shape():
    rng = np.random.default_rng(0)
    out = F.conv2d(t64(rng.normal(size=(1, 1, 4, 4))), t64(rng.normal(size=(1, 1, 4, 4))), stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, k = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(F.conv2d(t64(x), t64(k), stride, pad).data, conv_oracle(x, k, stride, pad), atol=1e-12)


def test_conv_channel_mismatch_and_bad_stride():
    with pytest.raises(ShapeError):
        F.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 2, 2))))
    with pytest.raises(ValueError):
        F.conv2d(t64(np.zeros((1, 1, 4, 4))), t64(np.zeros((1, 1, 2, 2))), stride=0)


# --- conv2d_transpose --------------------------------------------------------------

def test_transpose_identity():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(F.conv2d_transpose(t64(x), t64(np.ones((1, 1, 1, 1)))).data, x)


def test_transpose_scatter_example():
    out = F.conv2d_transpose(t64([[[[2.0]]]]), t64(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, [[[[2, 2], [2, 2]]]])


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (2, 0)])
def test_transpose_matches_scatter_oracle(stride, pad):
    rng = np.random.default_rng(3 + stride + pad)
    x, k = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(3, 2, 4, 4))
    out = F.conv2d_transpose(t64(x), t64(k), stride, pad)
    assert out.shape[2] == (4 - 1) * stride - 2 * pad + 4
    np.testing.assert_allclose(out.data, scatter_oracle(x, k, stride, pad), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(1, 0), (1, 1), (2, 1), (2, 0)]))
def test_adjoint_identity(seed, sp):
    stride, pad = sp
    rng = np.random.default_rng(seed)
    a, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 4, 4))
    y = F.conv2d(t64(a), t64(k), stride, pad).data
    b = rng.normal(size=y.shape)
    lhs = float(np.sum(y * b))
    rhs = float(np.sum(a * F.conv2d_transpose(t64(b), t64(k), stride, pad).data[:, :, :8, :8]))
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


# --- elementwise / softmax --------------------------------------------------------

def test_leaky_relu_examples():
    np.testing.assert_allclose(F.leaky_relu(t64([-1.0, 0.0, 2.0]), 0.2).data, [-0.2, 0.0, 2.0])
    np.testing.assert_array_equal(F.leaky_relu(t64([-3.0, 3.0]), 0.0).data, [0.0, 3.0])
    x = t64([-1.0])
    with Tape() as tape:
        y = F.sum(F.leaky_relu(x, 0.2))
    assert backward(y, tape)[x][0] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        F.leaky_relu(x, 1.0)


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])
    big = F.softmax(t64([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [0.5, 0.5])
    e = np.exp(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(F.softmax(t64([1.0, 2.0, 3.0])).data, e / e.sum(), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    p = F.softmax(t64(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(F.softmax(t64(x + c)).data, p, atol=1e-6)


# --- backward -----------------------------------------------------------------------

def test_backward_sum_and_square():
    a = t64([1.0, -2.0, 3.0])
    with Tape() as tape:
        s = F.sum(a)
    np.testing.assert_array_equal(backward(s, tape)[a], np.ones(3))
    with Tape() as tape:
        s = F.sum(F.mul(a, a))
    np.testing.assert_array_equal(backward(s, tape)[a], 2 * a.data)


def test_backward_needs_scalar():
    a = t64([1.0, 2.0])
    with Tape() as tape:
        y = F.mul(a, 2.0)
    with pytest.raises(NotScalarError):
        backward(y, tape)


def test_unreached_tensor_gets_no_gradient():
    a, b = t64([1.0]), t64([2.0])
    with Tape() as tape:
        y = F.sum(F.mul(a, 3.0))
    grads = backward(y, tape)
    assert b not in grads or np.all(grads[b] == 0)


def test_backward_deterministic():
    rng = np.random.default_rng(1)
    x, k = t64(rng.normal(size=(2, 2, 6, 6))), t64(rng.normal(size=(3, 2, 3, 3)))
    with Tape() as tape:
        y = F.sum(F.square(F.leaky_relu(F.conv2d(x, k, 1, 1))))
    g1, g2 = backward(y, tape), backward(y, tape)
    assert np.array_equal(g1[k], g2[k]) and np.array_equal(g1[x], g2[x])


def test_forward_stays_finite():
    rng = np.random.default_rng(2)
    x = t64(rng.normal(size=(1, 1, 8, 8)) * 100)
    k = t64(rng.normal(size=(2, 1, 4, 4)))
    with Tape() as tape:
        y = F.mean(F.sigmoid(F.conv2d(x, k, 2, 1)))
    assert np.isfinite(y.data).all()
    assert all(np.isfinite(g).all() for g in backward(y, tape).values())


# --- grad_check ----------------------------------------------------------------------

def test_grad_check_sum_of_squares():
    res = grad_check(lambda a: F.sum(F.square(a)), t64([1.0, 2.0]))
    assert res.max_rel_error < 1e-8


def test_grad_check_leaky_away_from_kink():
    res = grad_check(lambda a: F.sum(F.leaky_relu(a, 0.2)), t64([-1.5, 0.7, 2.0]))
    assert res.max_rel_error < 1e-6 and not res.excluded


def test_grad_check_flags_kink():
    res = grad_check(lambda a: F.sum(F.leaky_relu(a, 0.2)), t64([0.0, 1.0]))
    assert res.excluded == [(0, 0)]
    assert res.max_rel_error < 1e-6


def test_grad_check_rejects_float32():
    with pytest.raises(ValueError):
        grad_check(lambda a: F.sum(a), Tensor(np.ones(2, dtype=np.float32)))


OPS = {
    "exp": lambda a: F.sum(F.exp(a)),
    "sigmoid": lambda a: F.sum(F.sigmoid(a)),
    "sqrt": lambda a: F.sum(F.sqrt(F.add(F.square(a), 1.0))),
    "abs": lambda a: F.sum(F.abs(a)),
    "softmax": lambda a: F.sum(F.mul(F.softmax(a), F.exp(a))),
    "log_softmax": lambda a: F.sum(F.mul(F.log_softmax(a), a)),
    "mean": lambda a: F.sum(F.mean(F.square(a), axis=1)),
    "l2_norm": lambda a: F.sum(F.l2_norm(a, axis=-1)),
    "concat": lambda a: F.sum(F.square(F.concat([a, F.mul(a, 2.0)], axis=0))),
    "reshape": lambda a: F.sum(F.mul(F.reshape(a, (-1,)), np.arange(6.0))),
}


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(sorted(OPS)), st.integers(0, 1000))
def test_ops_match_finite_differences(name, seed):
    x = t64(np.random.default_rng(seed).uniform(0.2, 1.5, size=(2, 3)) * np.array([1, -1, 1]))
    res = grad_check(OPS[name], x)
    assert res.max_rel_error < 1e-4


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([(1, 0), (2, 1)]))
def test_conv_gradients_match_finite_differences(seed, sp):
    rng = np.random.default_rng(seed)
    stride, pad = sp
    x, k, kt = t64(rng.normal(size=(1, 2, 5, 5))), t64(rng.normal(size=(2, 2, 3, 3))), t64(rng.normal(size=(2, 1, 3, 3)))
    res = grad_check(lambda a, b, c: F.sum(F.square(F.conv2d_transpose(F.conv2d(a, b, stride, pad), c, stride, pad))),
                     [x, k, kt])
    assert res.max_rel_error < 1e-4


# --- SGD -----------------------------------------------------------------------------

def test_sgd_single_step():
    p = Tensor(np.array([0.0]), name="p")
    sgd_momentum_step([p], {p: np.array([1.0])}, lr=0.1, momentum=0.0)
    assert p.data[0] == pytest.approx(-0.1)


def test_sgd_two_step_recurrence():
    p = Tensor(np.array([0.0]), name="p")
    opt = SGD([p], lr=1.0, momentum=0.5)
    opt.step({p: np.array([1.0])})
    opt.step({p: np.array([1.0])})
    assert p.data[0] == pytest.approx(-2.5)


def test_sgd_zero_grad_and_missing():
    p = Tensor(np.array([3.0]), name="p")
    sgd_momentum_step([p], {p: np.array([0.0])}, lr=1.0, momentum=0.5)
    assert p.data[0] == 3.0
    with pytest.raises(MissingGradientError):
        sgd_momentum_step([p], {}, lr=1.0, momentum=0.5)
    with pytest.raises(ValueError):
        sgd_momentum_step([p], {p: np.zeros(1)}, lr=0.0, momentum=0.5)


def test_sgd_state_round_trip():
    p = Tensor(np.array([1.0, 2.0]), name="w")
    opt = SGD([p], lr=0.1, momentum=0.9)
    opt.step({p: np.array([1.0, -1.0])})
    saved = opt.state()
    opt.step({p: np.array([5.0, 5.0])})
    opt.load_state(saved)
    np.testing.assert_array_equal(opt.velocity[p], [1.0, -1.0])


# --- checkpoints -----------------------------------------------------------------------

from ctstandard.autodiff import CheckpointError, dump_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint  # noqa: E402


def test_checkpoint_layout_by_hand():
    blob = dump_checkpoint({"w": np.array([[1.5, -2.0]], dtype=np.float32)})
    assert blob[:4] == b"STCT"
    version, count, name_len = np.frombuffer(blob[4:16], "<u4")
    assert (version, count, name_len) == (1, 1, 1)
    assert blob[16:17] == b"w"
    rank = np.frombuffer(blob[17:21], "<u4")[0]
    dims = np.frombuffer(blob[21:37], "<u8")
    assert rank == 2 and list(dims) == [1, 2]
    np.testing.assert_array_equal(np.frombuffer(blob[37:], "<f4"), [1.5, -2.0])


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 4)),
                              elements=st.floats(-1e6, 1e6, width=32)),
                       max_size=4))
def test_checkpoint_round_trip(tensors):
    back = parse_checkpoint(dump_checkpoint(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_file_and_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": np.zeros(3)})
    assert load_checkpoint(path)["a"].shape == (3,)
    good = path.read_bytes()
    for bad in (b"XXXX" + good[4:], good[:-2], good + b"\0"):
        with pytest.raises(CheckpointError):
            parse_checkpoint(bad)
