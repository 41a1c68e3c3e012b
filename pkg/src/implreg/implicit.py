"""Implicit differentiation of the converged inner solve.

At a converged warp the MSE gradient ``rho`` vanishes, so feature gradients
follow from ``dT/dF = -(dT/dphi) (d rho/d phi)^-1 (d rho/dF)``.  For MSE the
Hessian ``d rho/d phi`` is block diagonal with one 2x2 block per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import (
    AffineWarp,
    FeaturePyramid,
    ShapeError,
    _data,
    _disp,
    affine_coords_jacobian,
    pixel_grid,
    sample_grad,
    warp_coords,
)
from .solver import smooth_grad

__all__ = [
    "GradientBackend",
    "FeatureGrads",
    "PhantomStateMissing",
    "parse_backend",
    "rho",
    "block_hessian",
    "affine_hessian",
    "solve_blocks",
    "feature_vjp",
    "backward",
    "hessian_spectrum",
]

TIKHONOV = 1e-6


class PhantomStateMissing(RuntimeError):
    pass


@dataclass(frozen=True)
class GradientBackend:
    tag: str = "jfb"
    k: int = 1
    tikhonov: float = TIKHONOV

    def __post_init__(self):
        if self.tag not in ("hessian", "jfb", "phantom"):
            raise ValueError(f"unknown gradient backend {self.tag!r}")
        if self.tag == "phantom" and int(self.k) < 1:
            raise ValueError("phantom unrolling needs k >= 1")
        if self.tikhonov < 0:
            raise ValueError("tikhonov damping must be non-negative")

    def __str__(self):
        return f"phantom:{self.k}" if self.tag == "phantom" else self.tag


def parse_backend(text, tikhonov=TIKHONOV):
    """Parse ``"jfb"``, ``"hessian"`` or ``"phantom:<k>"``."""
    text = text.strip().strip('"').lower()
    if text.startswith("phantom"):
        _, _, k = text.partition(":")
        try:
            return GradientBackend("phantom", int(k), tikhonov)
        except ValueError:
            raise ValueError(f"bad phantom backend {text!r}; expected phantom:<k>") from None
    return GradientBackend(text, 1, tikhonov)


@dataclass
class FeatureGrads:
    """Per-scale gradients w.r.t. fixed and moving features (result order)."""

    d_ff: list
    d_fm: list


def _setup(warp, f_f, f_m):
    ff, fm = _data(f_f), _data(f_m)
    if ff.shape[2] != fm.shape[2]:
        raise ShapeError(f"channel mismatch: {ff.shape[2]} vs {fm.shape[2]}")
    coords = warp_coords(warp, ff.shape)
    resid = kernels.sample(fm, coords) - ff.reshape(-1, ff.shape[2])
    return ff, fm, coords, resid, 2.0 / resid.size


def rho(warp, f_f, f_m):
    """Gradient of the MSE objective w.r.t. each warped pixel position."""
    ff, fm, coords, resid, scale = _setup(warp, f_f, f_m)
    _, d_coords = sample_grad(fm, coords, scale * resid)
    return d_coords.reshape(ff.shape[0], ff.shape[1], 2)


def block_hessian(warp, f_f, f_m):
    """Per-pixel 2x2 Hessian blocks ``(H*W, 2, 2)`` of the MSE objective.

    Row ``i`` of block ``p`` is the derivative of ``sum_q rho_q[i]`` w.r.t.
    ``phi(x_p)``, obtained by double-backward through bilinear sampling.
    """
    ff, fm, coords, resid, scale = _setup(warp, f_f, f_m)
    grads = kernels.spatial_grad(fm, coords)
    up = scale * resid
    blocks = np.empty((coords.shape[0], 2, 2))
    for i in range(2):
        u = np.zeros_like(coords)
        u[:, i] = 1.0
        _, d_coords, d_up = kernels.sample_grad2(fm, coords, up, u)
        # d_up flows back into the residual, which depends on the position too
        blocks[:, i, :] = d_coords + scale * np.einsum("nc,ncd->nd", d_up, grads)
    return 0.5 * (blocks + blocks.transpose(0, 2, 1))


def affine_hessian(warp, f_f, f_m):
    """6x6 Hessian of the MSE objective w.r.t. the affine parameters."""
    shape = _data(f_f).shape
    jac = affine_coords_jacobian(warp, shape)
    blocks = block_hessian(warp, f_f, f_m)
    return np.einsum("nai,nab,nbj->ij", jac, blocks, jac)


def solve_blocks(blocks, g, tikhonov=TIKHONOV):
    """Minimal-norm least-squares solve of ``(H_p + tikhonov I) v_p = g_p`` per pixel."""
    blocks = np.asarray(blocks, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    shape = g.shape
    rhs = g.reshape(-1, 2)
    damped = blocks + tikhonov * np.eye(2)
    a, b = damped[:, 0, 0], damped[:, 0, 1]
    c, d = damped[:, 1, 0], damped[:, 1, 1]
    det = a * d - b * c
    size = np.abs(damped).max(axis=(1, 2))
    regular = np.abs(det) > 1e-10 * size * size
    inv = np.empty_like(damped)
    safe = np.where(regular, det, 1.0)
    inv[:, 0, 0] = d / safe
    inv[:, 0, 1] = -b / safe
    inv[:, 1, 0] = -c / safe
    inv[:, 1, 1] = a / safe
    if not np.all(regular):
        inv[~regular] = np.linalg.pinv(damped[~regular], rcond=1e-10)
    return np.einsum("nij,nj->ni", inv, rhs).reshape(shape)


def feature_vjp(v, warp, f_f, f_m):
    """Gradients of ``h = <v, rho(warp, F_f, F_m)>`` w.r.t. both feature images."""
    ff, fm, coords, resid, scale = _setup(warp, f_f, f_m)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 2)
    if v.shape[0] != coords.shape[0]:
        raise ShapeError("v must have one vector per pixel")
    d_img, _, d_up = kernels.sample_grad2(fm, coords, scale * resid, v)
    # d_up[p, c] = <v_p, grad F_m,c(phi_p)>
    d_ff = (-scale * d_up).reshape(ff.shape)
    d_fm = d_img + kernels.sample_backward(fm.shape, coords, scale * d_up)
    return d_ff, d_fm


def hessian_spectrum(blocks):
    """All eigenvalues of symmetric 2x2 blocks, sorted in descending order."""
    blocks = np.asarray(blocks, dtype=np.float64)
    a = blocks[:, 0, 0]
    d = blocks[:, 1, 1]
    b = 0.5 * (blocks[:, 0, 1] + blocks[:, 1, 0])
    mean = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), b)
    return np.sort(np.concatenate([mean + rad, mean - rad]))[::-1]


def _levels(pyr, scales):
    if isinstance(pyr, FeaturePyramid):
        return [pyr.at(s) for s in scales]
    return [_data(l) for l in pyr]


def _phantom(result, k_idx, dT, ff, fm, backend):
    kept = result.phantom[k_idx] if result.phantom else []
    if len(kept) < backend.k:
        raise PhantomStateMissing("phantom state missing")
    c = result.step_sizes[k_idx]
    sigma = result.config.grad_sigma if result.config is not None else 0.0
    a = np.asarray(dT, dtype=np.float64)
    d_ff = np.zeros_like(ff)
    d_fm = np.zeros_like(fm)
    for u in reversed(kept[-backend.k :]):
        w = smooth_grad(a, sigma)
        gf, gm = feature_vjp(-c * w, u, ff, fm)
        d_ff += gf
        d_fm += gm
        hw = np.einsum("nij,nj->ni", block_hessian(u, ff, fm), w.reshape(-1, 2))
        a = a - c * hw.reshape(a.shape)
    return d_ff, d_fm


def _level_backward(warp, dT, ff, fm, backend, tracker):
    if isinstance(warp, AffineWarp):
        jac = affine_coords_jacobian(warp, ff.shape)
        g = np.asarray(dT, dtype=np.float64).reshape(6)
        if backend.tag == "hessian":
            h = affine_hessian(warp, ff, fm) + backend.tikhonov * np.eye(6)
            g = np.linalg.lstsq(h, g, rcond=None)[0]
        v = np.einsum("ndk,k->nd", jac, g)
        if tracker is not None:
            tracker.alloc(jac.nbytes + v.nbytes)
            tracker.free(jac.nbytes + v.nbytes)
        return feature_vjp(-v, warp, ff, fm)
    disp = _disp(warp)
    g = np.asarray(dT, dtype=np.float64)
    if g.shape != disp.shape:
        raise ShapeError(f"dT/dphi has shape {g.shape}, warp has {disp.shape}")
    extra = g.nbytes
    if backend.tag == "hessian":
        blocks = block_hessian(warp, ff, fm)
        extra += blocks.nbytes
        g = solve_blocks(blocks, g, backend.tikhonov)
    if tracker is not None:
        tracker.alloc(extra)
        tracker.free(extra)
    return feature_vjp(-g, warp, ff, fm)


def backward(result, dT_dwarps, pyr_f, pyr_m, backend, tracker=None):
    """Feature gradients of an outer loss given ``dT/dphi`` at every stored scale.

    Each scale is handled independently against its own features; coarser
    warps are not differentiated through the between-scale upsampling.
    """
    if isinstance(backend, str):
        backend = parse_backend(backend)
    scales = result.scales or tuple(range(len(result.warps)))
    lf = _levels(pyr_f, scales)
    lm = _levels(pyr_m, scales)
    if len(dT_dwarps) != len(result.warps) or len(lf) != len(result.warps):
        raise ShapeError("need one dT/dphi and one feature level per stored warp")
    d_ff, d_fm = [], []
    for k, (warp, dT, ff, fm) in enumerate(zip(result.warps, dT_dwarps, lf, lm)):
        if dT is None or not np.any(dT):
            d_ff.append(np.zeros_like(ff))
            d_fm.append(np.zeros_like(fm))
            continue
        if backend.tag == "phantom":
            if isinstance(warp, AffineWarp):
                raise PhantomStateMissing("phantom state missing")
            gf, gm = _phantom(result, k, dT, ff, fm, backend)
        else:
            gf, gm = _level_backward(warp, dT, ff, fm, backend, tracker)
        d_ff.append(gf)
        d_fm.append(gm)
    return FeatureGrads(d_ff, d_fm)
