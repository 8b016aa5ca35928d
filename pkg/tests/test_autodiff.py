import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critsampler import autodiff as ad
from critsampler.autodiff import Mask, Tensor, conv2d
from critsampler.models import PixelCNN
from critsampler.rng import make_rng

N_INSTANCES = 100


def numeric_grad(f, arrays, i, eps=1e-5):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    a = arrays[i]
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = a[idx]
        a[idx] = old + eps
        fp = f(*arrays)
        a[idx] = old - eps
        fm = f(*arrays)
        a[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale


def check_op(build, arrays, rng):
    """Contract the op output with a random tensor and compare gradients."""
    out_shape = build(*[Tensor(a) for a in arrays]).data.shape
    proj = rng.normal(size=out_shape)

    def scalar(*arrs):
        with ad.no_grad():
            return float((build(*[Tensor(a) for a in arrs]).data * proj).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (build(*ts) * proj).sum().backward()
    return max(rel_err(t.grad, numeric_grad(scalar, [a.copy() for a in arrays], i)) for i, t in enumerate(ts))


UNARY = {
    "sigmoid": (ad.sigmoid, lambda r, s: r.normal(scale=2, size=s)),
    "log": (ad.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "log_sigmoid": (ad.log_sigmoid, lambda r, s: r.normal(scale=3, size=s)),
    "tanh": (ad.tanh, lambda r, s: r.normal(size=s)),
    "sum": (lambda x: ad.tsum(x), lambda r, s: r.normal(size=s)),
    "sum_axis": (lambda x: ad.tsum(x, axis=(1, 2)), lambda r, s: r.normal(size=s)),
    "mean": (ad.tmean, lambda r, s: r.normal(size=s)),
    "neg": (lambda x: -x, lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_finite_difference(name):
    op, draw = UNARY[name]
    rng = make_rng(100)
    worst = 0.0
    for _ in range(N_INSTANCES):
        shape = tuple(rng.integers(1, 4, size=3))
        worst = max(worst, check_op(op, [draw(rng, shape)], rng))
    assert worst < 1e-5


@pytest.mark.parametrize("name", ["add", "mul", "sub", "add_scalar", "mul_scalar"])
def test_binary_ops_finite_difference(name):
    rng = make_rng(101)
    worst = 0.0
    for _ in range(N_INSTANCES):
        shape = tuple(rng.integers(1, 4, size=3))
        a = rng.normal(size=shape)
        if name.endswith("scalar"):
            b = rng.normal(size=())
        else:
            b = rng.normal(size=shape)
        op = {"add": ad.add, "add_scalar": ad.add, "mul": ad.mul, "mul_scalar": ad.mul, "sub": lambda x, y: x - y}[name]
        worst = max(worst, check_op(op, [a, b], rng))
    assert worst < 1e-5


@pytest.mark.parametrize("padding", ["circular", "zeros"])
@pytest.mark.parametrize("mask_kind", [None, "A", "B"])
def test_conv2d_finite_difference(padding, mask_kind):
    rng = make_rng(102)
    worst = 0.0
    for _ in range(N_INSTANCES):
        B, C, O = rng.integers(1, 3, size=3)
        H = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5]))
        mask = Mask(k, mask_kind) if mask_kind else None
        x = rng.normal(size=(B, C, H, H))
        w = rng.normal(size=(O, C, k, k))
        b = rng.normal(size=(O,))
        worst = max(worst, check_op(lambda x, w, b: conv2d(x, w, b, mask=mask, padding=padding), [x, w, b], rng))
    assert worst < 1e-5


def test_conv2d_kernel_larger_than_input_zero_padding():
    # cropped taps must still give the right values and gradients
    rng = make_rng(103)
    x = rng.normal(size=(2, 1, 2, 2))
    w = rng.normal(size=(3, 1, 13, 13))
    out = conv2d(Tensor(x), Tensor(w), padding="zeros").data
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(2):
            for j in range(2):
                for di in range(-1, 2):
                    for dj in range(-1, 2):
                        if 0 <= i + di < 2 and 0 <= j + dj < 2:
                            ref[:, o, i, j] += w[o, 0, 6 + di, 6 + dj] * x[:, 0, i + di, j + dj]
    np.testing.assert_allclose(out, ref, atol=1e-13)
    assert check_op(lambda x, w: conv2d(x, w, padding="zeros"), [x, w], rng) < 1e-5


def test_conv2d_identity_and_constant():
    rng = make_rng(104)
    x = rng.normal(size=(2, 1, 4, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)
    c = 0.7
    out = conv2d(Tensor(np.full((1, 1, 5, 5), c)), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.array([0.25])))
    np.testing.assert_allclose(out.data, 9 * c + 0.25, rtol=1e-15)


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), mask=Mask(5, "A"))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), padding="reflect")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 2**31 - 1))
def test_circular_conv_shift_equivariance(dy, dx, seed):
    rng = make_rng(seed)
    x = rng.normal(size=(1, 2, 6, 6))
    w = Tensor(rng.normal(size=(3, 2, 5, 5)))
    b = Tensor(rng.normal(size=3))
    shift = lambda a: np.roll(a, (dy, dx), axis=(2, 3))
    np.testing.assert_allclose(conv2d(Tensor(shift(x)), w, b).data, shift(conv2d(Tensor(x), w, b).data), atol=1e-12)


@pytest.mark.parametrize("kind", ["A", "B"])
@pytest.mark.parametrize("k", [1, 3, 5, 13])
def test_mask_structure(kind, k):
    m = Mask(k, kind).array
    c = k // 2
    assert m[c, c] == (1.0 if kind == "B" else 0.0)
    flat = m.ravel()
    centre = c * k + c
    assert np.all(flat[centre + 1 :] == 0)
    assert np.all(flat[:centre] == 1)


def test_mask_errors():
    with pytest.raises(ValueError):
        Mask(4, "A")
    with pytest.raises(ValueError):
        Mask(3, "C")


def jacobian(f, x):
    """Dense Jacobian of ``f`` at ``x`` (flattened spatial dims) via reverse mode."""
    n = x.size
    J = np.zeros((n, n))
    for v in range(n):
        t = Tensor(x.copy(), requires_grad=True)
        out = f(t)
        sel = np.zeros(out.shape)
        sel.reshape(-1)[v] = 1.0
        (out * sel).sum().backward()
        J[v] = t.grad.reshape(-1)
    return J


def test_masked_cnn_jacobian_autoregressive_8x8():
    model = PixelCNN(depth=3, width=4, kernel=13, rng=make_rng(105))
    x = make_rng(106).choice([-1.0, 1.0], size=(1, 1, 8, 8))
    J = jacobian(model.logits, x)
    upper = np.triu(np.ones((64, 64), dtype=bool))  # v' >= v
    assert np.all(J[upper] == 0.0)
    # every output sees its left neighbour and the site above it
    assert all(J[v, v - 1] != 0 for v in range(64) if v % 8)
    assert all(J[v, v - 8] != 0 for v in range(8, 64))


def test_circular_padding_would_break_autoregressivity():
    # why the masked layers pad with zeros: wrap-around leaks future sites
    rng = make_rng(107)
    w = Tensor(rng.normal(size=(1, 1, 3, 3)))
    f = lambda t: conv2d(t, w, mask=Mask(3, "A"), padding="circular")
    J = jacobian(f, rng.normal(size=(1, 1, 4, 4)))
    assert np.any(J[np.triu(np.ones((16, 16), dtype=bool))] != 0)


def test_elementwise_examples():
    assert ad.sigmoid(Tensor(np.array(0.0))).data == 0.5
    x = Tensor(np.array(0.0), requires_grad=True)
    ad.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25, abs=1e-15)
    y = Tensor(np.ones((2, 3)), requires_grad=True)
    ad.tsum(y).backward()
    np.testing.assert_array_equal(y.grad, np.ones((2, 3)))


def test_shape_errors_and_log_domain():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        ad.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
    with pytest.raises(FloatingPointError):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sigmoid(x) * 2.0
    assert not y.requires_grad and not y._parents


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = ad.adam_init([p])
    ad.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
    g = np.array([3.0, -0.5, 1e3])
    ad.adam_step([p], [g], ad.adam_init([p]), lr=1e-3)
    np.testing.assert_allclose(p.data, 1.0 - 1e-3 * np.sign(g), rtol=1e-9)


def test_adam_quadratic_bowl():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    c = np.array([1.0, -2.0])
    p = Tensor(np.array([4.0, 4.0]), requires_grad=True)
    state = ad.adam_init([p])
    for step in range(5000):
        g = A @ (p.data - c)
        if np.linalg.norm(g) < 1e-6:
            break
        # the default rate cannot close the last 1e-6 in 5000 steps from distance 6
        ad.adam_step([p], [g], state, lr=0.05)
    assert np.linalg.norm(A @ (p.data - c)) < 1e-6


def test_adam_rejects_non_finite():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(FloatingPointError):
        ad.adam_step([p], [np.array([np.nan, 0.0])], ad.adam_init([p]))


def test_adam_deterministic():
    r = make_rng(108)
    grads = [r.normal(size=4) for _ in range(20)]
    outs = []
    for _ in range(2):
        p = Tensor(np.ones(4), requires_grad=True)
        s = ad.adam_init([p])
        for g in grads:
            ad.adam_step([p], [g], s)
        outs.append(p.data.copy())
    np.testing.assert_array_equal(*outs)
