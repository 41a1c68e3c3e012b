import numpy as np
import pytest
import scipy.linalg
from scipy.ndimage import gaussian_filter

from implreg.grid import (
    AffineWarp,
    DisplacementField,
    Image,
    ShapeError,
    StationaryVelocityField,
    compose,
    downsample,
    identity_grid,
    jacobian_det,
    pixel_grid,
    sample,
    sample_grad,
    sample_grad2,
    svf_exp,
    svf_exp_backward,
    upsample_image,
    upsample_warp,
    warp_image,
)

from conftest import assert_close_rel, central_fd, offgrid


def smooth_field(rng, h, w, max_mag, sigma=3.0):
    raw = rng.normal(size=(h, w, 2))
    f = np.stack([gaussian_filter(raw[..., i], sigma, mode="wrap") for i in range(2)], axis=-1)
    return f * (max_mag / np.abs(f).max())


# -- identity_grid -----------------------------------------------------------


def test_identity_grid_zero():
    assert np.array_equal(identity_grid(2, 2).disp, np.zeros((2, 2, 2)))
    assert np.array_equal(identity_grid(1, 1).disp, np.zeros((1, 1, 2)))
    np.testing.assert_array_equal(jacobian_det(identity_grid(8, 8)).data, 1.0)


# -- sample --------------------------------------------------------------------


def test_sample_constant_mean_and_ramp(rng):
    const = Image(np.full((5, 6, 2), 3.5))
    np.testing.assert_allclose(sample(const, offgrid(rng, 20, 0, 4)), 3.5)
    img = Image(np.array([[0.0, 1.0], [2.0, 3.0]]))
    assert sample(img, [[0.5, 0.5]])[0, 0] == pytest.approx(1.5)
    ramp = Image(np.tile(np.arange(6.0), (4, 1)))
    assert sample(ramp, [[1.25, 0.0]])[0, 0] == pytest.approx(1.25)


def test_sample_reproduces_affine_functions(rng):
    h, w = 9, 11
    grid = pixel_grid(h, w)
    vals = (0.3 * grid[:, 0] - 1.7 * grid[:, 1] + 2.0).reshape(h, w)
    pts = rng.uniform(0, [w - 1, h - 1], size=(200, 2))
    np.testing.assert_allclose(sample(Image(vals), pts)[:, 0], 0.3 * pts[:, 0] - 1.7 * pts[:, 1] + 2.0, atol=1e-12)


def test_sample_zero_padding():
    img = Image(np.ones((3, 3)))
    assert sample(img, [[-1.0, 1.0]])[0, 0] == 0.0
    assert sample(img, [[2.5, 1.0]])[0, 0] == pytest.approx(0.5)
    assert sample(img, [[5.0, 5.0]])[0, 0] == 0.0


def test_sample_shape_errors():
    with pytest.raises(ShapeError):
        sample(Image(np.zeros((3, 3))), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        sample_grad(Image(np.zeros((3, 3, 2))), np.zeros((4, 2)), np.zeros((4, 1)))


# -- sample_grad -------------------------------------------------------------


def test_sample_grad_constant_and_ramp(rng):
    coords = offgrid(rng, 10, 0.5, 3.5)
    _, dc = sample_grad(Image(np.full((5, 5), 2.0)), coords, np.ones((10, 1)))
    np.testing.assert_allclose(dc, 0.0, atol=1e-14)
    ramp = Image(np.tile(np.arange(6.0), (6, 1)))
    _, dc = sample_grad(ramp, offgrid(rng, 10, 1, 4), np.ones((10, 1)))
    np.testing.assert_allclose(dc, np.tile([1.0, 0.0], (10, 1)), atol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_sample_grad_matches_fd(seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(4, 4, 2))
    coords = offgrid(rng, 5, -0.8, 3.8)
    up = rng.normal(size=(5, 2))
    d_img, d_coords = sample_grad(img, coords, up)
    f_img = central_fd(lambda a: np.sum(up * sample(a, coords)), img)
    f_coords = central_fd(lambda c: np.sum(up * sample(img, c)), coords)
    assert_close_rel(d_img, f_img, 1e-4)
    assert_close_rel(d_coords, f_coords, 1e-4)


# -- sample_grad2 ------------------------------------------------------------


def test_sample_grad2_constant_image(rng):
    coords = offgrid(rng, 6, 0.5, 3.5)
    _, d_coords, d_up = sample_grad2(
        np.full((5, 5, 1), 4.0), coords, rng.normal(size=(6, 1)), rng.normal(size=(6, 2))
    )
    # d_img is not zero: d_coords is linear in the image values
    np.testing.assert_allclose(d_coords, 0.0, atol=1e-13)
    np.testing.assert_allclose(d_up, 0.0, atol=1e-13)


def test_sample_grad2_no_pure_second_derivative(rng):
    # bilinear: d2/dx2 = d2/dy2 = 0 inside a cell; only the mixed term survives
    img = rng.normal(size=(5, 5, 1))
    coords = offgrid(rng, 8, 0.5, 3.5)
    up = np.ones((8, 1))
    _, dc, _ = sample_grad2(img, coords, up, np.tile([1.0, 0.0], (8, 1)))
    np.testing.assert_allclose(dc[:, 0], 0.0, atol=1e-14)
    assert np.any(np.abs(dc[:, 1]) > 1e-6)
    _, dc, _ = sample_grad2(img, coords, up, np.tile([0.0, 1.0], (8, 1)))
    np.testing.assert_allclose(dc[:, 1], 0.0, atol=1e-14)


@pytest.mark.parametrize("seed", range(50))
def test_sample_grad2_matches_fd_of_sample_grad(seed):
    rng = np.random.default_rng(100 + seed)
    img = rng.normal(size=(4, 4, 2))
    coords = offgrid(rng, 5, -0.8, 3.8)
    up = rng.normal(size=(5, 2))
    u = rng.normal(size=(5, 2))

    def h(img_, coords_, up_):
        return np.sum(u * sample_grad(img_, coords_, up_)[1])

    d_img, d_coords, d_up = sample_grad2(img, coords, up, u)
    assert_close_rel(d_img, central_fd(lambda a: h(a, coords, up), img), 1e-3)
    assert_close_rel(d_coords, central_fd(lambda c: h(img, c, up), coords, eps=1e-5), 1e-3)
    assert_close_rel(d_up, central_fd(lambda q: h(img, coords, q), up), 1e-3)


# -- warp_image ---------------------------------------------------------------


def test_warp_identity_and_translation(rng):
    img = Image(rng.normal(size=(8, 9, 2)))
    np.testing.assert_array_equal(warp_image(img, identity_grid(8, 9)).data, img.data)
    np.testing.assert_allclose(warp_image(img, AffineWarp()).data, img.data)
    ramp = Image(np.add.outer(np.arange(12.0) * 10, np.arange(12.0)))
    disp = np.zeros((12, 12, 2))
    disp[..., 0], disp[..., 1] = 3.0, -2.0
    out = warp_image(ramp, DisplacementField(disp)).data[..., 0]
    np.testing.assert_allclose(out[2:9, 0:9], ramp.data[0:7, 3:12, 0])


def test_warp_image_matches_pointwise_sample(rng):
    img = Image(rng.normal(size=(10, 10, 1)))
    warp = DisplacementField(smooth_field(rng, 10, 10, 2.0))
    out = warp_image(img, warp).data
    for r, c in [(0, 0), (3, 7), (9, 9), (5, 2)]:
        expect = sample(img, [[c + warp.disp[r, c, 0], r + warp.disp[r, c, 1]]])
        np.testing.assert_allclose(out[r, c], expect[0], atol=1e-12)


def test_warp_resolution_mismatch():
    with pytest.raises(ShapeError):
        warp_image(Image(np.zeros((4, 4))), identity_grid(4, 5))


# -- svf_exp --------------------------------------------------------------------


def test_svf_exp_zero_and_constant():
    assert svf_exp(StationaryVelocityField(np.zeros((6, 6, 2)))).is_identity()
    v = np.zeros((24, 24, 2))
    v[..., 0] = 2.0
    out = svf_exp(StationaryVelocityField(v, 7)).disp
    # zero padding bleeds ~5 px inward along the flow through the squarings
    np.testing.assert_allclose(out[4:17, 4:17], np.broadcast_to([2.0, 0.0], (13, 13, 2)), atol=1e-6)


def test_svf_exp_linear_field_matches_expm():
    h = w = 33
    a = np.array([[0.05, -0.08], [0.06, 0.03]])
    c = np.array([16.0, 16.0])
    rel = pixel_grid(h, w) - c
    v = (rel @ a.T).reshape(h, w, 2)
    out = svf_exp(StationaryVelocityField(v, 7)).disp
    expect = (rel @ (scipy.linalg.expm(a) - np.eye(2)).T).reshape(h, w, 2)
    inner = (slice(10, 23), slice(10, 23))
    np.testing.assert_allclose(out[inner], expect[inner], rtol=1e-3, atol=1e-3 * np.abs(expect[inner]).max())


def test_svf_exp_backward_matches_fd(rng):
    v = smooth_field(rng, 7, 7, 1.5, sigma=1.5)
    g = rng.normal(size=(7, 7, 2))
    analytic = svf_exp_backward(v, 3, g)
    fd = central_fd(lambda vv: np.sum(g * svf_exp(StationaryVelocityField(vv, 3)).disp), v, eps=1e-5)
    assert_close_rel(analytic, fd, 1e-3)


@pytest.mark.parametrize("seed", range(10))
def test_svf_inverse_consistency(seed):
    rng = np.random.default_rng(seed)
    v = smooth_field(rng, 48, 48, 2.0, sigma=4.0)
    fwd = svf_exp(StationaryVelocityField(v))
    bwd = svf_exp(StationaryVelocityField(-v))
    res = compose(fwd, bwd).disp
    assert np.abs(res[6:-6, 6:-6]).max() <= 0.1


@pytest.mark.parametrize("seed", range(100))
def test_svf_exp_positive_jacobian(seed):
    rng = np.random.default_rng(seed)
    v = smooth_field(rng, 32, 32, 2.0)
    assert jacobian_det(svf_exp(StationaryVelocityField(v, 7))).data.min() > 0


# -- compose ------------------------------------------------------------------


def test_compose_identity_and_translations(rng):
    w = DisplacementField(smooth_field(rng, 12, 12, 1.5))
    idn = identity_grid(12, 12)
    np.testing.assert_allclose(compose(idn, w).disp, w.disp)
    np.testing.assert_allclose(compose(w, idn).disp, w.disp)
    a = np.broadcast_to([1.5, -0.5], (20, 20, 2))
    b = np.broadcast_to([-0.25, 2.0], (20, 20, 2))
    out = compose(DisplacementField(a), DisplacementField(b)).disp
    np.testing.assert_allclose(out[4:16, 4:16], np.broadcast_to([1.25, 1.5], (12, 12, 2)))
    with pytest.raises(ShapeError):
        compose(identity_grid(3, 3), identity_grid(3, 4))


@pytest.mark.parametrize("seed", range(10))
def test_compose_associative(seed):
    rng = np.random.default_rng(seed)
    f, g, h = (DisplacementField(smooth_field(rng, 40, 40, 1.5, sigma=5.0)) for _ in range(3))
    left = compose(compose(f, g), h).disp
    right = compose(f, compose(g, h)).disp
    assert np.abs(left - right)[5:-5, 5:-5].max() <= 0.05


# -- jacobian_det --------------------------------------------------------------


def test_jacobian_uniform_scaling():
    s = 1.3
    grid = pixel_grid(10, 10).reshape(10, 10, 2)
    det = jacobian_det(DisplacementField((s - 1.0) * (grid - 4.5))).data[1:-1, 1:-1]
    np.testing.assert_allclose(det, s * s)


# -- downsample / upsample -------------------------------------------------------


def test_downsample_examples(rng):
    np.testing.assert_allclose(downsample(Image(np.full((8, 8), 2.5)), 4).data, 2.5)
    assert downsample(Image(np.array([[0.0, 1.0], [2.0, 3.0]])), 2).data[0, 0, 0] == pytest.approx(1.5)
    img = rng.normal(size=(64, 64, 1))
    assert downsample(Image(img), 4).data.mean() == pytest.approx(img.mean(), abs=1e-6)
    with pytest.raises(ShapeError):
        downsample(Image(np.zeros((6, 6))), 4)
    with pytest.raises(ValueError):
        downsample(Image(np.zeros((6, 6))), 3)


def test_upsample_warp_examples():
    assert upsample_warp(identity_grid(4, 4), 2).is_identity()
    d = np.broadcast_to([1.0, 0.0], (4, 4, 2))
    np.testing.assert_allclose(upsample_warp(DisplacementField(d), 2).disp, np.broadcast_to([2.0, 0.0], (8, 8, 2)))


def test_upsample_warp_commutes_with_warping(rng):
    h = w = 16
    grid = pixel_grid(h, w).reshape(h, w, 2)
    ramp = Image(0.7 * grid[..., 0] + 0.2 * grid[..., 1])
    warp = DisplacementField(smooth_field(rng, h, w, 1.0, sigma=3.0))
    coarse = warp_image(ramp, warp)
    fine = warp_image(upsample_image(ramp, 2), upsample_warp(warp, 2))
    ref = upsample_image(coarse, 2)
    inner = (slice(6, 26), slice(6, 26))
    np.testing.assert_allclose(fine.data[inner], ref.data[inner], rtol=1e-2)
