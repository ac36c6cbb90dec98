import numpy as np
import pytest

from bkaand import autodiff as ad
from bkaand.model import Architecture


def finite_diff_grads(build_loss, arrays, h=1e-4):
    """Central finite differences of a scalar loss w.r.t. each float64 array.

    ``build_loss`` takes the list of arrays and returns the loss value as a
    float. Stays independent of the autodiff path it is used to check.
    """
    grads = []
    for idx, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss(arrays)
            flat[i] = orig - h
            down = build_loss(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_gradients(make_vars, build_loss, h=1e-4, tol=1e-3):
    """Autodiff vs central differences in float64. ``make_vars`` returns the
    float64 value arrays; ``build_loss`` maps arrays -> scalar Variable."""
    arrays = make_vars()
    variables = [ad.Variable(a.copy(), requires_grad=True) for a in arrays]
    out = build_loss(variables)
    ad.backward(out)
    numeric = finite_diff_grads(
        lambda arrs: float(build_loss([ad.Variable(a) for a in arrs]).value), arrays, h=h
    )
    for var, num in zip(variables, numeric):
        err = relative_error(var.grad, num)
        assert err < tol, f"gradient mismatch: relative error {err:.2e}"


@pytest.fixture
def tiny_mlp_arch():
    return Architecture(
        input_height=2, input_width=2, input_channels=1, latent_dim=2,
        variant="mlp", mlp_hidden=(8, 6),
    )


@pytest.fixture
def tiny_conv_arch():
    return Architecture(input_height=8, input_width=8, input_channels=1, latent_dim=3)


def synthetic_gaussian_images(n, seed=0, center=0.5, spread=0.15):
    """n 2-D points from a Gaussian, clipped into [0,1], shaped [n,1,1,2]."""
    rng = np.random.default_rng(seed)
    pts = np.clip(rng.normal(center, spread, size=(n, 2)), 0.0, 1.0)
    return pts.reshape(n, 1, 1, 2).astype(np.float32)
