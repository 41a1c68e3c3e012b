"""Similarity losses, label overlap, warp regularizers and gradient diagnostics.

Every loss returns a :class:`LossReport` whose ``grad`` is taken with respect
to the warp: an ``(H, W, 2)`` array for displacement fields or a 6-vector of
affine parameters (see :func:`implreg.grid.affine_to_params`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import (
    AffineWarp,
    DisplacementField,
    ShapeError,
    _data,
    _disp,
    affine_coords_jacobian,
    warp_coords,
)

__all__ = [
    "LossReport",
    "RegularizerKind",
    "DegenerateGradients",
    "mse_loss",
    "soft_dice",
    "regularizer",
    "blended_loss",
    "surrogate_gradient",
    "cosine_alignment",
    "pullback",
]

DICE_EPS = 1e-5
ELASTIC_EPS = 1e-8


@dataclass
class LossReport:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class RegularizerKind:
    """One of ``tv``, ``elastic``, ``jacdet``, ``laplacian`` with blend weight ``weight``."""

    tag: str
    weight: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0

    TAGS = ("tv", "elastic", "jacdet", "laplacian")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"unknown regularizer {self.tag!r}; expected one of {self.TAGS}")
        if not np.isfinite(self.weight):
            raise ValueError("regularizer weight must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    def with_weight(self, weight):
        return RegularizerKind(self.tag, weight, self.alpha, self.beta)


class DegenerateGradients(ValueError):
    pass


def pullback(warp, d_coords, shape):
    """Map a gradient on sampling coordinates ``(N, 2)`` to the warp's parameters."""
    if isinstance(warp, AffineWarp):
        jac = affine_coords_jacobian(warp, shape)
        return np.einsum("nd,ndk->k", d_coords, jac)
    h, w = shape[:2]
    return d_coords.reshape(h, w, 2)


def _check_pair(f_f, f_m, warp):
    if f_f.shape[2] != f_m.shape[2]:
        raise ShapeError(f"channel mismatch: {f_f.shape[2]} vs {f_m.shape[2]}")
    if not isinstance(warp, AffineWarp) and _disp(warp).shape[:2] != f_f.shape[:2]:
        raise ShapeError("warp resolution must match the fixed image")


def mse_loss(f_f, f_m, warp):
    """Mean squared residual between ``f_f`` and ``f_m`` warped by ``warp``."""
    ff, fm = _data(f_f), _data(f_m)
    _check_pair(ff, fm, warp)
    coords = warp_coords(warp, ff.shape)
    resid = kernels.sample(fm, coords) - ff.reshape(-1, ff.shape[2])
    n = resid.size
    g = kernels.spatial_grad(fm, coords)
    d_coords = np.einsum("nc,ncd->nd", (2.0 / n) * resid, g)
    return LossReport(float(np.mean(resid**2)), pullback(warp, d_coords, ff.shape))


def soft_dice(s_f, s_m, warp, eps=DICE_EPS):
    """``1 - mean_c dice_c`` between ``s_f`` and ``s_m`` warped by ``warp``."""
    sf, sm = _data(s_f), _data(s_m)
    _check_pair(sf, sm, warp)
    for name, arr in (("fixed", sf), ("moving", sm)):
        if arr.min() < -1e-12 or arr.max() > 1 + 1e-12:
            raise ValueError(f"{name} label values must lie in [0, 1]")
    coords = warp_coords(warp, sf.shape)
    warped = kernels.sample(sm, coords)
    flat = sf.reshape(-1, sf.shape[2])
    inter = (flat * warped).sum(axis=0)
    denom = flat.sum(axis=0) + warped.sum(axis=0) + eps
    dice = (2.0 * inter + eps) / denom
    nc = sf.shape[2]
    d_warped = -(2.0 * flat / denom - (2.0 * inter + eps) / denom**2) / nc
    d_coords = np.einsum("nc,ncd->nd", d_warped, kernels.spatial_grad(sm, coords))
    return LossReport(float(1.0 - dice.mean()), pullback(warp, d_coords, sf.shape))


# ---------------------------------------------------------------------------
# finite-difference stencils on the interior of a displacement field
# ---------------------------------------------------------------------------

# (drow, dcol, coefficient)
_DX = ((0, 1, 0.5), (0, -1, -0.5))
_DY = ((1, 0, 0.5), (-1, 0, -0.5))
_DXX = ((0, 1, 1.0), (0, 0, -2.0), (0, -1, 1.0))
_DYY = ((1, 0, 1.0), (0, 0, -2.0), (-1, 0, 1.0))
_DXY = ((1, 1, 0.25), (1, -1, -0.25), (-1, 1, -0.25), (-1, -1, 0.25))
_LAP = ((0, 1, 1.0), (0, -1, 1.0), (1, 0, 1.0), (-1, 0, 1.0), (0, 0, -4.0))


def _apply(u, taps):
    h, w = u.shape[:2]
    out = np.zeros((h - 2, w - 2) + u.shape[2:])
    for dr, dc, k in taps:
        out += k * u[1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc]
    return out


def _adjoint(g, taps, shape):
    h, w = shape[:2]
    out = np.zeros(shape)
    for dr, dc, k in taps:
        out[1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc] += k * g
    return out


def _tv(u, kind):
    ux, uy = _apply(u, _DX), _apply(u, _DY)
    value = np.sum(ux**2) + np.sum(uy**2)
    grad = _adjoint(2 * ux, _DX, u.shape) + _adjoint(2 * uy, _DY, u.shape)
    return value, grad


def _elastic(u, kind):
    ux, uy = _apply(u, _DX), _apply(u, _DY)
    uxx, uyy, uxy = _apply(u, _DXX), _apply(u, _DYY), _apply(u, _DXY)
    s1 = np.sqrt((ux**2).sum(-1) + (uy**2).sum(-1) + ELASTIC_EPS)
    s2 = np.sqrt((uxx**2).sum(-1) + (uyy**2).sum(-1) + 2 * (uxy**2).sum(-1) + ELASTIC_EPS)
    base = np.sqrt(ELASTIC_EPS)
    value = kind.alpha * np.sum(s1 - base) + kind.beta * np.sum(s2 - base)
    a = (kind.alpha / s1)[..., None]
    b = (kind.beta / s2)[..., None]
    grad = (
        _adjoint(a * ux, _DX, u.shape)
        + _adjoint(a * uy, _DY, u.shape)
        + _adjoint(b * uxx, _DXX, u.shape)
        + _adjoint(b * uyy, _DYY, u.shape)
        + _adjoint(2 * b * uxy, _DXY, u.shape)
    )
    return value, grad


def _jacdet(u, kind):
    ux, uy = _apply(u, _DX), _apply(u, _DY)
    a, b = 1 + ux[..., 0], uy[..., 0]
    c, d = ux[..., 1], 1 + uy[..., 1]
    res = a * d - b * c - 1.0
    value = np.sum(res**2)
    g = 2 * res
    d_ux = np.stack([g * d, -g * b], axis=-1)
    d_uy = np.stack([-g * c, g * a], axis=-1)
    grad = _adjoint(d_ux, _DX, u.shape) + _adjoint(d_uy, _DY, u.shape)
    return value, grad


def _laplacian(u, kind):
    lap = _apply(u, _LAP)
    return np.sum(lap**2), _adjoint(2 * lap, _LAP, u.shape)


_FAMILIES = {"tv": _tv, "elastic": _elastic, "jacdet": _jacdet, "laplacian": _laplacian}


def regularizer(warp, kind, reduction="sum"):
    """Regularizer value summed (or averaged) over interior pixels.

    ``reduction="mean"`` divides by the interior pixel count, matching the
    pixel-mean normalisation of :func:`mse_loss`.
    """
    u = _disp(warp)
    if u.shape[0] < 3 or u.shape[1] < 3:
        raise ShapeError("regularizers need at least a 3x3 grid")
    value, grad = _FAMILIES[kind.tag](u, kind)
    if reduction == "mean":
        count = (u.shape[0] - 2) * (u.shape[1] - 2)
        value, grad = value / count, grad / count
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return LossReport(float(value), grad)


def blended_loss(f_f, f_m, warp, kind):
    """``(1 - w) * mse + w * regularizer`` with the regularizer pixel-averaged."""
    lam = float(kind.weight)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    if isinstance(warp, AffineWarp):
        raise TypeError("regularizers are defined on displacement fields")
    data = mse_loss(f_f, f_m, warp) if lam < 1.0 else None
    reg = regularizer(warp, kind, reduction="mean") if lam > 0.0 else None
    if reg is None:
        return data
    if data is None:
        return reg
    return LossReport(
        (1 - lam) * data.value + lam * reg.value, (1 - lam) * data.grad + lam * reg.grad
    )


def surrogate_gradient(f_m, warp):
    """Gradient of ``sum_i F_m(phi(x_i))`` with respect to each particle ``phi(x_i)``."""
    fm = _data(f_m)
    shape = _disp(warp).shape[:2] if not isinstance(warp, AffineWarp) else fm.shape[:2]
    coords = warp_coords(warp, shape)
    return kernels.spatial_grad(fm, coords).sum(axis=1).reshape(shape[0], shape[1], 2)


def cosine_alignment(g1, g2, tol=1e-12):
    """Mean and std of per-pixel ``|cos(g1_i, g2_i)|`` over non-degenerate pixels."""
    a = np.asarray(g1, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(g2, dtype=np.float64).reshape(-1, 2)
    if a.shape != b.shape:
        raise ShapeError("gradient fields must have equal shapes")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na >= tol) & (nb >= tol)
    if not np.any(keep):
        raise DegenerateGradients("degenerate gradients")
    cos = np.abs((a[keep] * b[keep]).sum(axis=1)) / (na[keep] * nb[keep])
    cos = np.minimum(cos, 1.0)
    return float(cos.mean()), float(cos.std())


def included_fraction(g1, g2, tol=1e-12):
    a = np.asarray(g1).reshape(-1, 2)
    b = np.asarray(g2).reshape(-1, 2)
    keep = (np.linalg.norm(a, axis=1) >= tol) & (np.linalg.norm(b, axis=1) >= tol)
    return float(keep.mean())
