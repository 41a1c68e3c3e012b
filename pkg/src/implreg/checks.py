"""Finite-difference oracles for every hand-written gradient.

Each check returns a :class:`CheckRow`; ``err`` is the largest absolute
deviation divided by the largest oracle magnitude unless stated otherwise.
``corrupt`` perturbs the analytic side so the harness can prove it notices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .grid import DisplacementField, sample_grad, warp_image
from .implicit import backward, block_hessian, feature_vjp, rho
from .net import FeatureNet
from .objectives import mse_loss, soft_dice
from .solver import MultiScaleResult, SolverConfig, optimize_scale

CHECKS = ("sampling", "double_backward", "loss", "block_hessian", "feature_vjp", "implicit", "net")


@dataclass
class CheckRow:
    check: str
    size: int
    seed: int
    err: float
    tol: float
    passed: bool


def central_fd(func, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = func(x)
        flat[i] = old - eps
        fm = func(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(actual, oracle):
    actual, oracle = np.asarray(actual), np.asarray(oracle)
    return float(np.abs(actual - oracle).max() / max(np.abs(oracle).max(), 1e-12))


def _maybe_corrupt(arr, on):
    return arr * 1.1 + 1e-3 if on else arr


def smooth_field(rng, h, w, c, sigma=1.5):
    out = np.stack([gaussian_filter(rng.normal(size=(h, w)), sigma) for _ in range(c)], -1)
    return out / np.abs(out).max()


def offgrid_coords(rng, n, lo, hi):
    c = rng.uniform(lo, hi, size=(n, 2))
    frac = c - np.floor(c)
    return np.floor(c) + np.clip(frac, 0.05, 0.95)


def offgrid_disp(rng, h, w, lo=0.15, hi=0.45):
    mag = rng.uniform(lo, hi, size=(h, w, 2))
    return mag * rng.choice([-1.0, 1.0], size=(h, w, 2))


def _row(name, size, seed, err, tol):
    return CheckRow(name, size, seed, err, tol, bool(np.isfinite(err) and err <= tol))


def check_sampling(size, seed, corrupt=False):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(size, size, 2))
    coords = offgrid_coords(rng, size * size, -0.5, size - 0.5)
    up = rng.normal(size=(coords.shape[0], 2))
    d_img, d_coords = sample_grad(img, coords, up)
    f = lambda im, co: float(np.sum(up * kernels.sample(im, co)))
    err = max(
        rel_err(_maybe_corrupt(d_img, corrupt), central_fd(lambda z: f(z, coords), img)),
        rel_err(_maybe_corrupt(d_coords, corrupt), central_fd(lambda z: f(img, z), coords)),
    )
    return _row("sampling", size, seed, err, 1e-3)


def check_double_backward(size, seed, corrupt=False):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(size, size, 2))
    coords = offgrid_coords(rng, size * size, -0.5, size - 0.5)
    up = rng.normal(size=(coords.shape[0], 2))
    u = rng.normal(size=coords.shape)
    d_img, d_coords, d_up = kernels.sample_grad2(img, coords, up, u)

    def h(im, co, uu):
        return float(np.sum(u * np.einsum("nc,ncd->nd", uu, kernels.spatial_grad(im, co))))

    err = max(
        rel_err(_maybe_corrupt(d_img, corrupt), central_fd(lambda z: h(z, coords, up), img)),
        rel_err(d_coords, central_fd(lambda z: h(img, z, up), coords)),
        rel_err(d_up, central_fd(lambda z: h(img, coords, z), up)),
    )
    return _row("double_backward", size, seed, err, 1e-3)


def check_loss(size, seed, corrupt=False):
    rng = np.random.default_rng(seed)
    ff, fm = rng.normal(size=(2, size, size, 2))
    disp = offgrid_disp(rng, size, size, 0.1, 1.4)
    g = mse_loss(ff, fm, disp).grad
    err = rel_err(_maybe_corrupt(g, corrupt), central_fd(lambda d: mse_loss(ff, fm, d).value, disp))
    sf, sm = rng.random((2, size, size, 1))
    gd = soft_dice(sf, sm, disp).grad
    err = max(err, rel_err(gd, central_fd(lambda d: soft_dice(sf, sm, d).value, disp)))
    return _row("loss", size, seed, err, 1e-3)


def dense_fd_hessian(ff, fm, disp, eps=1e-6):
    flat = disp.reshape(-1).copy()
    n = flat.size
    hess = np.zeros((n, n))
    for j in range(n):
        up, dn = flat.copy(), flat.copy()
        up[j] += eps
        dn[j] -= eps
        gp = mse_loss(ff, fm, up.reshape(disp.shape)).grad.reshape(-1)
        gm = mse_loss(ff, fm, dn.reshape(disp.shape)).grad.reshape(-1)
        hess[:, j] = (gp - gm) / (2 * eps)
    return hess


def block_hessian_errors(size, seed, channels=2):
    """``(diag_rel_err, max_off_diag)`` of analytic blocks against the dense FD Hessian."""
    rng = np.random.default_rng(seed)
    ff = smooth_field(rng, size, size, channels, 1.0)
    fm = smooth_field(rng, size, size, channels, 1.0)
    disp = offgrid_disp(rng, size, size)
    blocks = block_hessian(disp, ff, fm)
    dense = dense_fd_hessian(ff, fm, disp)
    n = size * size
    diag = np.stack([dense[2 * p : 2 * p + 2, 2 * p : 2 * p + 2] for p in range(n)])
    mask = np.ones_like(dense, dtype=bool)
    for p in range(n):
        mask[2 * p : 2 * p + 2, 2 * p : 2 * p + 2] = False
    return rel_err(blocks, diag), float(np.abs(dense[mask]).max())


def check_block_hessian(size, seed, corrupt=False):
    err, off = block_hessian_errors(size, seed)
    if corrupt:
        err += 1.0
    passed = err <= 1e-3 and off <= 1e-6
    return CheckRow("block_hessian", size, seed, max(err, off), 1e-3, bool(passed))


def check_feature_vjp(size, seed, corrupt=False):
    rng = np.random.default_rng(seed)
    ff, fm = rng.normal(size=(2, size, size, 2))
    disp = offgrid_disp(rng, size, size, 0.1, 1.4)
    v = rng.normal(size=(size, size, 2))
    d_ff, d_fm = feature_vjp(v, disp, ff, fm)
    h = lambda a, b: float(np.sum(v * rho(disp, a, b)))
    err = max(
        rel_err(_maybe_corrupt(d_ff, corrupt), central_fd(lambda z: h(z, fm), ff)),
        rel_err(d_fm, central_fd(lambda z: h(ff, z), fm)),
    )
    return _row("feature_vjp", size, seed, err, 1e-3)


def implicit_instance(seed, size=8):
    """Well-posed 3-channel pair with a small nonzero residual at the optimum."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size].astype(float)
    fm = np.concatenate(
        [np.stack([x, y], -1) * 0.25 + 0.1 * smooth_field(rng, size, size, 2),
         0.1 * smooth_field(rng, size, size, 1)], -1
    )
    u0 = offgrid_disp(rng, size, size, 0.15, 0.4)
    # keep border pixels pointing inwards so they never sample the zero pad
    u0[:, 0, 0] = np.abs(u0[:, 0, 0])
    u0[:, -1, 0] = -np.abs(u0[:, -1, 0])
    u0[0, :, 1] = np.abs(u0[0, :, 1])
    u0[-1, :, 1] = -np.abs(u0[-1, :, 1])
    ff = warp_image(fm, u0) + 0.01 * rng.normal(size=(size, size, 3))
    return rng, ff, fm, u0


def implicit_agreement(seed, size=8, stride=7, eps=1e-4, rtol=5e-2, backend="hessian", corrupt=False):
    """Fraction of feature entries whose implicit gradient matches re-solve FD."""
    rng, ff, fm, u0 = implicit_instance(seed, size)
    cfg = SolverConfig(scales=(1,), iters=(20000,), lr=1.0, grad_sigma=0.0, rel_tol=1e-10)

    def solve(f_f, f_m):
        return optimize_scale(f_f, f_m, DisplacementField(u0), cfg)[0].disp

    u = solve(ff, fm)
    a = rng.normal(size=u.shape)
    res = MultiScaleResult([DisplacementField(u)], DisplacementField(u), [[0.0]], [1], scales=(1,))
    g = backward(res, [a], [ff], [fm], backend)
    good = total = 0
    for which, feat, grad in (("f", ff, g.d_ff[0]), ("m", fm, g.d_fm[0])):
        grad = _maybe_corrupt(grad, corrupt)
        for idx in list(np.ndindex(feat.shape))[::stride]:
            fp, fn = feat.copy(), feat.copy()
            fp[idx] += eps
            fn[idx] -= eps
            if which == "f":
                up, un = solve(fp, fm), solve(fn, fm)
            else:
                up, un = solve(ff, fp), solve(ff, fn)
            fd = (np.sum(a * up) - np.sum(a * un)) / (2 * eps)
            total += 1
            good += abs(fd - grad[idx]) <= rtol * max(abs(fd), 1e-3)
    return good / total


def check_implicit(size, seed, corrupt=False):
    frac = implicit_agreement(seed, size, corrupt=corrupt)
    # err is the fraction of mismatching entries; at most 10% may disagree
    return _row("implicit", size, seed, 1.0 - frac, 0.1)


def check_net(size, seed, corrupt=False):
    rng = np.random.default_rng(seed)
    net = FeatureNet(channels=2, widths=(3, 3, 3), seed=seed)
    img = rng.random((size, size, 1))
    pyr, cache = net.forward(img)
    d_levels = [rng.normal(size=l.shape) for l in pyr.levels]
    grad = net.backward(cache, d_levels)
    base = net.params.copy()

    def pairing(p):
        net.set_params(p)
        out = net.features(img)
        return sum(float(np.sum(a * b)) for a, b in zip(out.levels, d_levels))

    fd = central_fd(pairing, base)
    net.set_params(base)
    return _row("net", size, seed, rel_err(_maybe_corrupt(grad, corrupt), fd), 1e-3)


RUNNERS = {
    "sampling": check_sampling,
    "double_backward": check_double_backward,
    "loss": check_loss,
    "block_hessian": check_block_hessian,
    "feature_vjp": check_feature_vjp,
    "implicit": check_implicit,
    "net": check_net,
}


def run_checks(sizes=(4, 6, 8), seeds=(0, 1), corrupt=(), only=None):
    """Run every oracle over ``sizes`` x ``seeds``; returns a list of rows.

    The implicit check always runs at 8x8 (its instance recipe needs that
    size) and the network check at the largest size divisible by 4.
    """
    rows = []
    for name in only or CHECKS:
        fn = RUNNERS[name]
        if name == "implicit":
            run_sizes = (8,)
        elif name == "net":
            run_sizes = (max(s for s in sizes if s % 4 == 0) if any(s % 4 == 0 for s in sizes) else 8,)
        elif name == "block_hessian":
            run_sizes = tuple(s for s in sizes if s <= 6) or (min(sizes),)
        else:
            run_sizes = sizes
        for size in run_sizes:
            for seed in seeds:
                rows.append(fn(size, seed, corrupt=name in corrupt))
    return rows
