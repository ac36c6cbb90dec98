import numpy as np
import pytest

from bkaand import autodiff as ad

from conftest import check_gradients, finite_diff_grads, relative_error


def var(a, dtype=np.float32, grad=False):
    return ad.Variable(np.asarray(a, dtype=dtype), requires_grad=grad)


# ---------------------------------------------------------------------------
# affine


def test_affine_identity_weights():
    out = ad.affine(var([[1.0, 2.0]]), var(np.eye(2)), var([0.0, 0.0]))
    np.testing.assert_allclose(out.value, [[1.0, 2.0]])


def test_affine_scalar_evaluation():
    out = ad.affine(var([[1.0, 1.0]]), var([[1.0], [1.0]]), var([0.5]))
    np.testing.assert_allclose(out.value, [[2.5]])


def test_affine_zero_input_passes_bias():
    out = ad.affine(var([[0.0, 0.0]]), var([[7.0], [-3.0]]), var([3.0]))
    np.testing.assert_allclose(out.value, [[3.0]])


def test_affine_shape_mismatch_names_axis():
    with pytest.raises(ad.ShapeError, match="axis"):
        ad.affine(var([[1.0, 2.0, 3.0]]), var(np.eye(2)), var([0.0, 0.0]))


# ---------------------------------------------------------------------------
# conv


def conv2d_oracle(x, k, stride, padding):
    """Direct nested-loop cross-correlation."""
    b, c, h, w = x.shape
    f, _, kk, _ = k.shape
    ho = (h + 2 * padding - kk) // stride + 1
    wo = (w + 2 * padding - kk) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, f, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + kk, j * stride : j * stride + kk]
                    out[bi, fi, i, j] = (patch * k[fi]).sum()
    return out


def test_conv_sum_of_ones():
    out = ad.conv2d(var(np.ones((1, 1, 3, 3))), var(np.ones((1, 1, 3, 3))), var([0.0]))
    np.testing.assert_allclose(out.value, [[[[9.0]]]])


def test_conv_identity_kernel():
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1.0
    x = np.random.default_rng(0).random((1, 1, 5, 5)).astype(np.float32)
    out = ad.conv2d(var(x), var(k), var([0.0]), stride=1, padding=1)
    np.testing.assert_allclose(out.value, x, atol=1e-7)


@pytest.mark.parametrize("shape,fk,stride,padding", [
    ((1, 1, 4, 4), (1, 1, 2, 2), 1, 0),
    ((2, 3, 8, 8), (4, 3, 3, 3), 1, 1),
    ((2, 3, 8, 8), (2, 3, 4, 4), 2, 1),
    ((1, 2, 6, 6), (3, 2, 3, 3), 3, 0),
])
def test_conv_matches_nested_loop_oracle(shape, fk, stride, padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(shape).astype(np.float32)
    k = rng.standard_normal(fk).astype(np.float32)
    out = ad.conv2d(var(x), var(k), var(np.zeros(fk[0])), stride=stride, padding=padding)
    np.testing.assert_allclose(out.value, conv2d_oracle(x, k, stride, padding), atol=1e-5)


def test_conv_non_integral_output_raises():
    with pytest.raises(ad.ShapeError, match="non-integral"):
        ad.conv2d(var(np.ones((1, 1, 5, 5))), var(np.ones((1, 1, 2, 2))), var([0.0]), stride=2)


def test_tconv_inverts_conv_spatial_mapping():
    # tconv output size: (h-1)*s - 2p + k (+op); conv of that size maps back
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    k = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = ad.tconv2d(var(x), var(k), var(np.zeros(3)), stride=2, padding=1)
    assert out.value.shape == (1, 3, 8, 8)


def test_tconv_is_adjoint_of_conv():
    # <conv(x), y> == <x, tconv(y)> for zero bias, shared kernel geometry
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 8, 8))
    k = rng.standard_normal((3, 2, 4, 4))
    y = rng.standard_normal((1, 3, 4, 4))
    cx = ad.conv2d(var(x, np.float64), var(k, np.float64), var(np.zeros(3), np.float64),
                   stride=2, padding=1).value
    ty = ad.tconv2d(var(y, np.float64), var(k, np.float64),
                    var(np.zeros(2), np.float64), stride=2, padding=1).value
    np.testing.assert_allclose((cx * y).sum(), (x * ty).sum(), rtol=1e-10)


# ---------------------------------------------------------------------------
# activations


def test_sigmoid_at_zero():
    assert ad.sigmoid(var(0.0)).value == pytest.approx(0.5)


def test_leaky_relu_negative_slope():
    assert ad.leaky_relu(var(-1.0), 0.2).value == pytest.approx(-0.2)


def test_tanh_at_zero():
    assert ad.tanh(var(0.0)).value == pytest.approx(0.0)


def test_sigmoid_range():
    out = ad.sigmoid(var(np.linspace(-10, 10, 101))).value
    assert ((out > 0) & (out < 1)).all()


# ---------------------------------------------------------------------------
# backward


def test_backward_square():
    w = var(3.0, np.float64, grad=True)
    ad.backward(ad.multiply(w, w))
    assert w.grad == pytest.approx(6.0)


def test_backward_sigmoid_at_zero():
    w = var(0.0, np.float64, grad=True)
    ad.backward(ad.sigmoid(w))
    assert w.grad == pytest.approx(0.25)


def test_backward_rejects_non_scalar():
    w = var([1.0, 2.0], grad=True)
    with pytest.raises(ad.UsageError, match="scalar"):
        ad.backward(ad.square(w))


def test_backward_accumulates_across_calls():
    w = var(3.0, np.float64, grad=True)
    out1 = ad.multiply(w, w)
    ad.backward(out1)
    ad.backward(ad.multiply(w, w))
    assert w.grad == pytest.approx(12.0)


def test_backward_composed_loss_matches_finite_differences():
    rng = np.random.default_rng(7)

    def make():
        return [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)),
                rng.standard_normal(2)]

    def build(vs):
        x, w, b = vs
        h = ad.leaky_relu(ad.affine(x, w, b), 0.2)
        return ad.mean(ad.square(ad.sigmoid(h)))

    check_gradients(make, build)


# ---------------------------------------------------------------------------
# per-primitive gradient checks (64-bit verification mode)


def _gradcheck_primitive(op, shapes, seed=0):
    rng = np.random.default_rng(seed)

    def make():
        return [rng.standard_normal(s) for s in shapes]

    def build(vs):
        return ad.mean(ad.square(op(*vs)))

    check_gradients(make, build)


def test_gradcheck_affine():
    _gradcheck_primitive(lambda x, w, b: ad.affine(x, w, b), [(3, 5), (5, 4), (4,)])


def test_gradcheck_conv2d():
    _gradcheck_primitive(
        lambda x, k, b: ad.conv2d(x, k, b, stride=2, padding=1),
        [(2, 2, 6, 6), (3, 2, 4, 4), (3,)],
    )


def test_gradcheck_tconv2d():
    _gradcheck_primitive(
        lambda x, k, b: ad.tconv2d(x, k, b, stride=2, padding=1),
        [(2, 2, 3, 3), (2, 3, 4, 4), (3,)],
    )


@pytest.mark.parametrize("fn", [
    lambda x: ad.leaky_relu(x, 0.2),
    ad.sigmoid,
    ad.tanh,
    lambda x: ad.log(ad.add_scalar(ad.sigmoid(x), 0.5)),
])
def test_gradcheck_elementwise(fn):
    _gradcheck_primitive(fn, [(4, 5)], seed=11)


# ---------------------------------------------------------------------------
# properties


def test_backward_linearity():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((3, 3))
    a, b = 2.5, -1.25

    def grad_of(weight_f, weight_g):
        w = var(x0, np.float64, grad=True)
        f = ad.mean(ad.square(w))
        g = ad.mean(ad.sigmoid(w))
        ad.backward(ad.add(ad.scale(f, weight_f), ad.scale(g, weight_g)))
        return w.grad.copy()

    combined = grad_of(a, b)
    separate = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
    np.testing.assert_allclose(combined, separate, atol=1e-6)


def test_forward_backward_determinism():
    rng = np.random.default_rng(9)
    x0, w0 = rng.standard_normal((4, 4)).astype(np.float32), rng.standard_normal((4, 2)).astype(np.float32)

    def run():
        x = var(x0, grad=True)
        w = var(w0, grad=True)
        out = ad.mean(ad.square(ad.sigmoid(ad.affine(x, w, var(np.zeros(2))))))
        ad.backward(out)
        return out.value.copy(), x.grad.copy(), w.grad.copy()

    r1, r2 = run(), run()
    for a, b in zip(r1, r2):
        assert np.array_equal(a, b)


def test_clamp_gradient_masked():
    w = var([0.5, 2.0, -2.0], np.float64, grad=True)
    ad.backward(ad.sum_all(ad.clamp(w, 0.0, 1.0)))
    np.testing.assert_allclose(w.grad, [1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Adam


def _scalar_param(v):
    return ad.Parameter(np.array([v], dtype=np.float32), "p")


def test_adam_first_step_scalar_evaluation():
    p = _scalar_param(0.0)
    p.grad[:] = 1.0
    state = ad.AdamState.for_parameter(p, beta1=0.5, beta2=0.999, epsilon=1e-8)
    ad.adam_step(p, state, lr=0.002)
    assert p.value[0] == pytest.approx(-0.002, rel=1e-5)
    assert state.step_count == 1
    assert p.grad[0] == 0.0


def test_adam_zero_gradient_keeps_value():
    p = _scalar_param(1.5)
    state = ad.AdamState.for_parameter(p)
    ad.adam_step(p, state, lr=0.01)
    assert p.value[0] == pytest.approx(1.5)
    assert state.step_count == 1


def test_adam_determinism():
    results = []
    for _ in range(2):
        p = _scalar_param(0.7)
        p.grad[:] = -0.3
        state = ad.AdamState.for_parameter(p)
        for _ in range(5):
            p.grad[:] = -0.3
            ad.adam_step(p, state, lr=0.01)
        results.append(p.value.copy())
    assert np.array_equal(results[0], results[1])
