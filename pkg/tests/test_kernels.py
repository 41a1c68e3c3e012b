import numpy as np
import pytest

from implreg import kernels
from implreg._accel import USE_NUMBA

from conftest import offgrid

pytestmark = pytest.mark.skipif(not USE_NUMBA, reason="numba disabled")


@pytest.mark.parametrize("seed", range(5))
def test_numba_and_numpy_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(6, 7, 3))
    coords = rng.uniform(-1.5, 7.5, size=(40, 2))
    coords[:5] = np.round(coords[:5])  # exercise grid-line convention
    up = rng.normal(size=(40, 3))
    u = rng.normal(size=(40, 2))
    nb, npk = kernels.numba_kernels, kernels.numpy_kernels
    np.testing.assert_allclose(nb["sample"](img, coords), npk["sample"](img, coords), atol=1e-12)
    np.testing.assert_allclose(
        nb["spatial_grad"](img, coords), npk["spatial_grad"](img, coords), atol=1e-12
    )
    np.testing.assert_allclose(
        nb["sample_backward"](img.shape, coords, up),
        npk["sample_backward"](img.shape, coords, up),
        atol=1e-12,
    )
    for a, b in zip(nb["sample_grad2"](img, coords, up, u), npk["sample_grad2"](img, coords, up, u)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_grid_line_gradient_is_central_difference():
    row = np.array([0.0, 1.0, 4.0, 9.0])[None, :, None]
    g = kernels.spatial_grad(row, np.array([[2.0, 0.0]]))
    assert g[0, 0, 0] == pytest.approx((9.0 - 1.0) / 2)
