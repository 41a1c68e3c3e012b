import numpy as np
import pytest

from implreg.grid import (
    AffineWarp,
    DisplacementField,
    FeaturePyramid,
    ShapeError,
    StationaryVelocityField,
    downsample,
    identity_grid,
    jacobian_det,
    warp_image,
)
from implreg.objectives import RegularizerKind, mse_loss, soft_dice
from implreg.solver import (
    ConfigError,
    MemoryTracker,
    SolverConfig,
    SolverDiverged,
    adam_init,
    adam_step,
    optimize_affine,
    optimize_scale,
    register_multiscale,
)


def blob(h, w, cx, cy, s=5.0, amp=1.0):
    y, x = np.mgrid[0:h, 0:w]
    return amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))[..., None]


def square(h, w, r0, c0, size):
    s = np.zeros((h, w, 1))
    s[r0 : r0 + size, c0 : c0 + size] = 1.0
    return s


def pyramid(img, scales):
    return [downsample(img, s) for s in scales]


# -- config -------------------------------------------------------------------


def test_config_defaults():
    cfg = SolverConfig()
    assert cfg.scales == (4, 2, 1) and cfg.iters == (200, 100, 50)
    assert cfg.learning_rate == 0.003
    assert SolverConfig(optimizer="adam").learning_rate == 0.5
    assert cfg.rel_tol == 1e-4 and cfg.patience == 5


@pytest.mark.parametrize(
    "kw",
    [
        {"scales": (2, 4, 1)},
        {"scales": (4, 2)},
        {"scales": (4, 2, 1), "iters": (1, 2)},
        {"rel_tol": 0},
        {"patience": 0},
        {"optimizer": "lbfgs"},
        {"warp_kind": "bspline"},
        {"betas": (0.9, 1.0)},
    ],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        SolverConfig(**kw)


# -- optimize_scale -------------------------------------------------------------


def test_identical_images_stop_early():
    f = blob(16, 16, 8, 8)
    cfg = SolverConfig(scales=(1,), iters=(100,))
    warp, trace = optimize_scale(f, f, identity_grid(16, 16), cfg)
    assert len(trace) <= cfg.patience + 1
    assert warp.is_identity()


def test_constant_loss_runs_patience_plus_one():
    rng = np.random.default_rng(2)
    ff, fm = rng.normal(size=(2, 8, 8, 1))
    for patience in (1, 3, 5, 9):
        cfg = SolverConfig(scales=(1,), iters=(100,), patience=patience, lr=0.0)
        _, trace = optimize_scale(ff, fm, identity_grid(8, 8), cfg)
        assert len(trace) == patience + 1


def test_blob_shift_recovered():
    h = w = 32
    ff = blob(h, w, 16, 16)
    fm = blob(h, w, 19, 14)
    cfg = SolverConfig(scales=(1,), iters=(500,), lr=10.0, grad_sigma=4.0)
    warp, _ = optimize_scale(ff, fm, identity_grid(h, w), cfg)
    y, x = np.mgrid[0:h, 0:w]
    core = ((x - 16) ** 2 + (y - 16) ** 2) <= 9
    mean = warp.disp[core].mean(axis=0)
    assert np.all(np.abs(mean - [3.0, -2.0]) < 0.5)


def test_zero_learning_rate_leaves_warp():
    rng = np.random.default_rng(0)
    ff, fm = rng.normal(size=(2, 8, 8, 1))
    init = DisplacementField(rng.normal(scale=0.3, size=(8, 8, 2)))
    cfg = SolverConfig(scales=(1,), iters=(20,), lr=0.0)
    warp, trace = optimize_scale(ff, fm, init, cfg)
    np.testing.assert_array_equal(warp.disp, init.disp)
    assert len(set(trace)) == 1


def test_nan_loss_diverges(monkeypatch):
    import implreg.solver as solver_mod
    from implreg.objectives import LossReport

    monkeypatch.setattr(
        solver_mod, "mse_loss", lambda ff, fm, w: LossReport(float("nan"), np.zeros((16, 16, 2)))
    )
    cfg = SolverConfig(scales=(1,), iters=(50,))
    with pytest.raises(SolverDiverged, match="diverged"):
        optimize_scale(np.zeros((16, 16, 1)), np.zeros((16, 16, 1)), identity_grid(16, 16), cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_step_diverges():
    ff = blob(16, 16, 8, 8)
    fm = blob(16, 16, 9, 8)
    cfg = SolverConfig(scales=(1,), iters=(50,), lr=1e306, grad_sigma=0.0)
    with pytest.raises(SolverDiverged, match="diverged"):
        optimize_scale(ff, fm, identity_grid(16, 16), cfg)


def test_shape_mismatch():
    cfg = SolverConfig(scales=(1,), iters=(5,))
    with pytest.raises(ShapeError):
        optimize_scale(np.zeros((8, 8, 1)), np.zeros((8, 8, 1)), identity_grid(4, 4), cfg)


@pytest.mark.parametrize("seed", range(20))
def test_sgd_on_blobs_is_monotone_over_windows(seed):
    rng = np.random.default_rng(seed)
    h = w = 24
    c = rng.uniform(9, 15, size=2)
    shift = rng.uniform(-2, 2, size=2)
    ff = blob(h, w, *c, s=4.0)
    fm = blob(h, w, *(c + shift), s=4.0)
    cfg = SolverConfig(scales=(1,), iters=(200,), lr=3.0, grad_sigma=2.0)
    _, trace = optimize_scale(ff, fm, identity_grid(h, w), cfg)
    t = np.asarray(trace)
    for i in range(0, len(t) - 20):
        assert t[i + 20] <= t[i] + 1e-15


def test_regularized_inner_loop():
    ff = blob(16, 16, 8, 8)
    fm = blob(16, 16, 10, 8)
    reg = RegularizerKind("tv", weight=0.5)
    cfg = SolverConfig(scales=(1,), iters=(50,), lr=3.0, regularizer=reg)
    warp, trace = optimize_scale(ff, fm, identity_grid(16, 16), cfg)
    assert trace[-1] < trace[0]


# -- svf ------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_svf_adam_has_no_folds(seed):
    rng = np.random.default_rng(seed)
    h = w = 32
    c = rng.uniform(12, 20, size=2)
    ff = blob(h, w, *c, s=4.0) + blob(h, w, *(c + 5), s=3.0)
    fm = blob(h, w, *(c + rng.uniform(-3, 3, 2)), s=4.0) + blob(h, w, *(c + 5), s=3.0)
    cfg = SolverConfig(
        scales=(2, 1), iters=(100, 50), optimizer="adam", warp_kind="svf", grad_sigma=1.0
    )
    res = register_multiscale(pyramid(ff, cfg.scales), pyramid(fm, cfg.scales), cfg)
    assert res.loss_traces[-1][-1] < res.loss_traces[0][0] or res.loss_traces[0][0] == 0
    for warp in res.warps:
        assert isinstance(warp, DisplacementField)
        assert jacobian_det(warp).data.min() > 0


# -- multiscale -------------------------------------------------------------------


def test_multiscale_identical_pyramids():
    f = blob(32, 32, 16, 16) + blob(32, 32, 8, 20)
    cfg = SolverConfig()
    res = register_multiscale(pyramid(f, cfg.scales), pyramid(f, cfg.scales), cfg)
    assert res.final_warp.is_identity()
    assert all(max(t) < 1e-12 for t in res.loss_traces)
    assert [w.shape for w in res.warps] == [(8, 8), (16, 16), (32, 32)]


def test_multiscale_single_scale_matches_optimize_scale():
    rng = np.random.default_rng(4)
    ff = blob(16, 16, 8, 8)
    fm = blob(16, 16, 9.5, 7)
    cfg = SolverConfig(scales=(1,), iters=(40,), lr=3.0)
    res = register_multiscale([ff], [fm], cfg)
    warp, trace = optimize_scale(ff, fm, identity_grid(16, 16), cfg)
    np.testing.assert_array_equal(res.final_warp.disp, warp.disp)
    assert res.loss_traces[0] == trace


def test_multiscale_accepts_feature_pyramid():
    f = blob(16, 16, 8, 8)
    g = blob(16, 16, 9, 8)
    cfg = SolverConfig(scales=(2, 1), iters=(10, 10), lr=3.0)
    fp = FeaturePyramid((f, downsample(f, 2)), (1, 2))
    gp = FeaturePyramid((g, downsample(g, 2)), (1, 2))
    a = register_multiscale(fp, gp, cfg)
    b = register_multiscale(pyramid(f, cfg.scales), pyramid(g, cfg.scales), cfg)
    np.testing.assert_array_equal(a.final_warp.disp, b.final_warp.disp)


def test_multiscale_level_count_mismatch():
    cfg = SolverConfig()
    with pytest.raises(ShapeError):
        register_multiscale([np.zeros((8, 8, 1))] * 2, [np.zeros((8, 8, 1))] * 2, cfg)


def test_multiscale_deterministic():
    rng = np.random.default_rng(7)
    ff = blob(32, 32, 14, 16) + 0.1 * rng.normal(size=(32, 32, 1))
    fm = blob(32, 32, 17, 15)
    cfg = SolverConfig(lr=3.0)
    a = register_multiscale(pyramid(ff, cfg.scales), pyramid(fm, cfg.scales), cfg)
    b = register_multiscale(pyramid(ff, cfg.scales), pyramid(fm, cfg.scales), cfg)
    for wa, wb in zip(a.warps, b.warps):
        assert wa.disp.tobytes() == wb.disp.tobytes()
    assert a.loss_traces == b.loss_traces


def test_phantom_retention_and_memory_hook():
    ff = blob(16, 16, 8, 8)
    fm = blob(16, 16, 10, 7)
    peaks = {}
    for k in (0, 2, 4):
        tracker = MemoryTracker()
        cfg = SolverConfig(scales=(2, 1), iters=(30, 30), lr=3.0, rel_tol=1e-12, retain_k=k)
        res = register_multiscale(pyramid(ff, cfg.scales), pyramid(fm, cfg.scales), cfg, tracker)
        assert [len(p) for p in res.phantom] == [k, k]
        peaks[k] = tracker.peak
    step = peaks[2] - peaks[0]
    assert step > 0 and peaks[4] - peaks[0] == 2 * step


def test_memory_independent_of_iterations_without_phantom():
    ff = blob(16, 16, 8, 8)
    fm = blob(16, 16, 10, 7)
    peaks = []
    for n in (5, 50):
        tracker = MemoryTracker()
        cfg = SolverConfig(scales=(2, 1), iters=(n, n), lr=3.0, rel_tol=1e-12)
        register_multiscale(pyramid(ff, cfg.scales), pyramid(fm, cfg.scales), cfg, tracker)
        peaks.append(tracker.peak)
    assert peaks[0] == peaks[1]


# -- affine -------------------------------------------------------------------------


def test_affine_identical_images_keep_identity():
    f = square(32, 32, 8, 8, 12)
    cfg = SolverConfig(scales=(1,), iters=(50,), optimizer="adam", lr=0.5)
    warp, trace = optimize_affine(f, f, cfg)
    assert warp.is_identity()


def test_affine_overlapping_squares_converge():
    ff = square(64, 64, 20, 18, 32)
    fm = square(64, 64, 12, 26, 32)
    cfg = SolverConfig(scales=(1,), iters=(400,), optimizer="adam", lr=0.5, rel_tol=1e-9)
    warp, trace = optimize_affine(ff, fm, cfg)
    assert 1 - soft_dice(ff, fm, warp).value > 0.99


def test_affine_multiscale_carry():
    ff = square(64, 64, 20, 18, 24)
    fm = square(64, 64, 14, 24, 24)
    cfg = SolverConfig(
        scales=(2, 1), iters=(200, 100), optimizer="adam", lr=0.5, warp_kind="affine"
    )
    res = register_multiscale(pyramid(ff, cfg.scales), pyramid(fm, cfg.scales), cfg)
    assert all(isinstance(w, AffineWarp) for w in res.warps)
    np.testing.assert_allclose(res.final_warp.translation, [6.0, -6.0], atol=0.3)


def test_affine_disjoint_squares_do_not_improve():
    ff = square(64, 64, 2, 2, 16)
    fm = square(64, 64, 40, 40, 16)
    cfg = SolverConfig(scales=(1,), iters=(100,), optimizer="adam", lr=0.5)
    warp, _ = optimize_affine(ff, fm, cfg)
    assert 1 - soft_dice(ff, fm, warp).value < 0.01
    g = mse_loss(ff, fm, AffineWarp()).grad
    assert np.abs(g[:2]).max() < 1e-12


# -- adam ---------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0, 3.0])
    new, _ = adam_step(p, np.zeros(3), adam_init(3), 0.1)
    np.testing.assert_array_equal(new, p)


def test_adam_single_step_hand_oracle():
    p = np.array([0.5, -1.0])
    g = np.array([0.2, -3.0])
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    new, st = adam_step(p, g, adam_init(2), lr, b1, b2, eps)
    m = (1 - b1) * g / (1 - b1)
    v = (1 - b2) * g * g / (1 - b2)
    np.testing.assert_allclose(new, p - lr * m / (np.sqrt(v) + eps), rtol=1e-14)
    np.testing.assert_allclose(np.abs(new - p), lr, rtol=1e-6)
    assert st["t"] == 1


def test_adam_first_step_scale_invariant():
    g = np.array([0.3, 3.0])
    new, _ = adam_step(np.zeros(2), g, adam_init(2), 0.05)
    assert abs(abs(new[0]) - abs(new[1])) < 1e-8
