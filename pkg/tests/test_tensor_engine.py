"""Tensor engine against independent oracles: loop convolutions, closed-form
pooling and interpolation, finite differences and algebraic properties."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stairnet.tensor import (
    ConvSpec,
    Tensor,
    add,
    amax,
    backend,
    batchnorm2d,
    bilinear_matrix,
    check_gradients,
    concat,
    conv2d,
    conv_transpose2d,
    meta,
    mul,
    no_grad,
    pool2d,
    relu,
    resize_bilinear,
    sigmoid,
    split,
    sum_,
)


def loop_conv(x, w, b, stride, pad, dil, groups):
    n, c, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    keff = k + (k - 1) * (dil - 1)
    ho = (h + 2 * pad - keff) // stride + 1
    wo = (wd + 2 * pad - keff) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    cout_g = cout // groups
    for bi in range(n):
        for o in range(cout):
            g = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for u in range(k):
                            for v in range(k):
                                acc += (w[o, ci, u, v]
                                        * xp[bi, g * cin_g + ci, i * stride + u * dil,
                                             j * stride + v * dil])
                    out[bi, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


CONV_CASES = [
    # cin, cout, k, stride, dilation, padding, groups, bias
    (3, 4, 3, 1, 1, None, 1, True),
    (3, 5, 3, 2, 1, 1, 1, False),
    (2, 3, 3, 1, 3, None, 1, True),
    (4, 6, 3, 1, 2, 0, 2, True),
    (4, 4, 3, 1, 2, None, 4, False),
    (4, 4, 3, 2, 1, 1, 4, False),
    (3, 2, 1, 1, 1, 0, 1, True),
    (2, 3, 5, 1, 1, 2, 1, False),
    (3, 3, 7, 1, 1, 3, 1, False),
]


@pytest.mark.parametrize("case", CONV_CASES)
@pytest.mark.parametrize("algo", ["auto", "im2col", "direct"])
def test_conv2d_matches_loop_oracle(case, algo, kernel_backend, rng):
    cin, cout, k, s, d, p, g, has_bias = case
    spec = ConvSpec(cin, cout, k, stride=s, dilation=d, padding=p, groups=g, bias=has_bias)
    x = rng.standard_normal((2, cin, 9, 8))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(cout) if has_bias else None
    got = conv2d(Tensor(x), Tensor(w), spec, None if b is None else Tensor(b), algo=algo).data
    ref = loop_conv(x, w, b, s, spec.padding, d, g)
    assert got.shape == ref.shape
    assert np.max(np.abs(got - ref)) <= 1e-12 * max(1.0, np.abs(ref).max())


def test_same_padding_preserves_size():
    for k in (1, 3, 5, 7):
        for d in (1, 2, 3, 4):
            spec = ConvSpec(2, 2, k, dilation=d)
            assert spec.output_size(13, 10) == (13, 10)
            assert spec.effective_kernel == k + (k - 1) * (d - 1)


def test_conv_transpose_is_adjoint_of_conv(kernel_backend, rng):
    spec = ConvSpec(3, 4, 4, stride=2, padding=1, bias=False)
    x = rng.standard_normal((2, 3, 8, 6))
    w = rng.standard_normal(spec.weight_shape)
    y = conv2d(Tensor(x), Tensor(w), spec).data
    r = rng.standard_normal(y.shape)
    # conv_transpose with the swapped spec uses the same (cout, cin, k, k) array
    tspec = ConvSpec(4, 3, 4, stride=2, padding=1, bias=False)
    back = conv_transpose2d(Tensor(r), Tensor(w), tspec).data
    assert back.shape == x.shape
    assert np.isclose(np.sum(y * r), np.sum(x * back), rtol=1e-12)


def test_conv_transpose_output_size_doubles():
    spec = ConvSpec(8, 4, 4, stride=2, padding=1, bias=False)
    x = Tensor(np.ones((1, 8, 5, 3)))
    w = Tensor(np.ones(spec.transpose_weight_shape))
    assert conv_transpose2d(x, w, spec).shape == (1, 4, 10, 6)


def test_conv_input_gradient_is_transpose_conv(rng):
    spec = ConvSpec(3, 4, 3, stride=1, padding=1, bias=False)
    x = Tensor(rng.standard_normal((1, 3, 6, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal(spec.weight_shape))
    g = rng.standard_normal((1, 4, 6, 5))
    conv2d(x, w, spec).backward(g)
    flipped = Tensor(np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]))
    ref = conv2d(Tensor(g), flipped, ConvSpec(4, 3, 3, padding=1, bias=False)).data
    np.testing.assert_allclose(x.grad, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_loop_oracle_and_tie_rule(kernel_backend, rng):
    x = rng.standard_normal((2, 3, 6, 8))
    out = pool2d(Tensor(x), "max", 2).data
    ref = x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, ref)

    tie = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    pool2d(tie, "max", 2).backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(tie.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_avgpool_closed_form(kernel_backend, rng):
    x = rng.standard_normal((1, 2, 8, 12))
    out = pool2d(Tensor(x), "avg", 4).data
    ref = x.reshape(1, 2, 2, 4, 3, 4).mean(axis=(3, 5))
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-14)
    t = Tensor(x, requires_grad=True)
    pool2d(t, "avg", 4).backward(np.ones((1, 2, 2, 3)))
    np.testing.assert_allclose(t.grad, np.full(x.shape, 1 / 16))


def test_pool_stride_differs_from_window(kernel_backend, rng):
    x = rng.standard_normal((1, 1, 5, 5))
    out = pool2d(Tensor(x), "max", 3, stride=2).data
    ref = np.array([[x[0, 0, i:i + 3, j:j + 3].max() for j in (0, 2)] for i in (0, 2)])
    np.testing.assert_array_equal(out[0, 0], ref)


def test_bilinear_upsample_closed_form():
    # half-pixel centres: a 2-vector upsampled to 4 gives a, .75a+.25b, .25a+.75b, b
    m = bilinear_matrix(2, 4)
    np.testing.assert_allclose(m, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    np.testing.assert_allclose(bilinear_matrix(7, 3).sum(axis=1), 1.0)


def test_bilinear_reproduces_linear_ramps_in_the_interior():
    h, w = 6, 5
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = (2.0 * yy - 0.5 * xx + 1.0)[None, None]
    out = resize_bilinear(Tensor(img), 12, 10).data[0, 0]
    oy = (np.arange(12) + 0.5) / 2 - 0.5
    ox = (np.arange(10) + 0.5) / 2 - 0.5
    ref = 2.0 * oy[:, None] - 0.5 * ox[None, :] + 1.0
    # exact away from the clamped border rows/columns
    np.testing.assert_allclose(out[1:-1, 1:-1], ref[1:-1, 1:-1], atol=1e-12)


def test_batchnorm_train_normalises_and_updates_running_stats(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    y = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True, 0.1).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    y = batchnorm2d(Tensor(x), Tensor(np.array([2.0, 1.0])), Tensor(np.array([0.5, 0.0])),
                    rm.copy(), rv.copy(), False).data
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    ref = ref * np.array([2.0, 1.0])[None, :, None, None] + np.array([0.5, 0.0])[None, :, None, None]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


# --- autodiff semantics -----------------------------------------------------------

def test_fanout_accumulates_gradients():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = sum_(mul(x, x) + x * 3.0)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_second_backward_is_an_error():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = sum_(mul(x, x))
    y.backward()
    with pytest.raises(RuntimeError, match="once"):
        y.backward()


def test_leaf_grads_accumulate_until_zeroed():
    x = Tensor(np.array([1.0]), requires_grad=True)
    sum_(x * 2.0).backward()
    sum_(x * 2.0).backward()
    assert x.grad[0] == 4.0
    x.zero_grad()
    assert x.grad is None


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = sum_(x * 2.0)
    assert not y.requires_grad and y.node_id is None


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_output_raises():
    x = Tensor(np.array([1e308]))
    with pytest.raises(FloatingPointError):
        mul(x, 1e10)


def test_meta_mode_propagates_shapes_without_data():
    spec = ConvSpec(3, 8, 3, stride=2, padding=1)
    with meta():
        from stairnet.tensor.core import placeholder
        x = Tensor(placeholder((2, 3, 64, 48), np.float32))
        y = conv2d(x, Tensor(placeholder(spec.weight_shape, np.float32)), spec)
        z = resize_bilinear(relu(y), 64, 48)
    assert y.shape == (2, 8, 32, 24) and z.shape == (2, 8, 64, 48)
    assert z.data.strides == (0, 0, 0, 0)


def test_dtype_mismatch_rejected():
    spec = ConvSpec(1, 1, 3)
    with pytest.raises(TypeError):
        conv2d(Tensor(np.ones((1, 1, 4, 4)), dtype=np.float32),
               Tensor(np.ones(spec.weight_shape), dtype=np.float64), spec,
               Tensor(np.zeros(1), dtype=np.float32))


def test_float32_path_stays_float32(rng):
    spec = ConvSpec(2, 3, 3)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal(spec.weight_shape).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(3, np.float32), requires_grad=True)
    y = sum_(relu(conv2d(x, w, spec, b)))
    y.backward()
    assert y.dtype == np.float32 and w.grad.dtype == np.float32 and x.grad.dtype == np.float32


# --- finite differences -------------------------------------------------------------

def test_check_gradients_detects_a_wrong_gradient():
    from stairnet.tensor.core import make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # missing 2x

    x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
    res = check_gradients(lambda: sum_(bad_square(x)), {"x": x})
    assert res.worst > 0.4


def test_check_gradients_skips_relu_kinks():
    x = Tensor(np.array([1e-7, -2.0, 3.0]), requires_grad=True)
    res = check_gradients(lambda: sum_(relu(x)), {"x": x}, eps=1e-5)
    assert res.skipped == 1 and res.checked == 2 and res.worst < 1e-8


def test_smooth_composite_gradient(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    res = check_gradients(lambda: sum_(mul(sigmoid(add(a, b)), a)), {"a": a, "b": b})
    assert res.worst < 1e-6 and res.checked == 12


def test_amax_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[[[1.0]], [[3.0]], [[3.0]]]]), requires_grad=True)
    amax(x, 1).backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad.reshape(-1), [0.0, 1.0, 0.0])


# --- properties -------------------------------------------------------------------------

small = st.integers(min_value=1, max_value=4)


@settings(max_examples=40, deadline=None)
@given(n=small, c=small, h=st.integers(3, 7), w=st.integers(3, 7), cout=small,
       k=st.sampled_from([1, 3]), d=st.integers(1, 2), seed=st.integers(0, 2 ** 16))
def test_conv_is_linear_in_input(n, c, h, w, cout, k, d, seed):
    r = np.random.default_rng(seed)
    spec = ConvSpec(c, cout, k, dilation=d, bias=False)
    wt = Tensor(r.standard_normal(spec.weight_shape))
    x1, x2 = r.standard_normal((2, n, c, h, w))
    alpha = float(r.standard_normal())
    lhs = conv2d(Tensor(x1 + alpha * x2), wt, spec).data
    rhs = conv2d(Tensor(x1), wt, spec).data + alpha * conv2d(Tensor(x2), wt, spec).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * max(1.0, abs(alpha)))


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 2 ** 16))
def test_split_inverts_concat(sizes, seed):
    r = np.random.default_rng(seed)
    parts = [Tensor(r.standard_normal((2, s, 3))) for s in sizes]
    joined = concat(parts, axis=1)
    for a, b in zip(split(joined, sizes, axis=1), parts):
        np.testing.assert_array_equal(a.data, b.data)


@settings(max_examples=40, deadline=None)
@given(shape=st.tuples(st.integers(1, 4), st.integers(1, 4)), seed=st.integers(0, 2 ** 16))
def test_relu_gradient_is_the_positive_mask(shape, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal(shape), requires_grad=True)
    sum_(relu(x)).backward()
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), oh=st.integers(1, 9), ow=st.integers(1, 9),
       seed=st.integers(0, 2 ** 16))
def test_resize_preserves_constants_and_is_adjoint(h, w, oh, ow, seed):
    r = np.random.default_rng(seed)
    const = resize_bilinear(Tensor(np.full((1, 1, h, w), 2.5)), oh, ow).data
    np.testing.assert_allclose(const, 2.5)
    x = Tensor(r.standard_normal((1, 2, h, w)), requires_grad=True)
    g = r.standard_normal((1, 2, oh, ow))
    y = resize_bilinear(x, oh, ow)
    y.backward(g)
    assert np.isclose(np.sum(y.data * g), np.sum(x.data * x.grad), rtol=1e-10, atol=1e-12)


def test_backends_agree_bitwise_on_pooling(rng):
    impls = backend.available()
    if len(impls) < 2:
        pytest.skip("compiled kernels not built")
    x = rng.standard_normal((2, 3, 8, 8))
    outs = [impl.maxpool_forward(x, 2, 2)[0] for impl in impls.values()]
    np.testing.assert_array_equal(outs[0], outs[1])
