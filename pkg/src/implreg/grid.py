"""Images, warp representations and differentiable bilinear resampling.

Coordinates are in pixels with pixel centers on integers; ``(x, y)`` is
``(column, row)``.  A displacement field maps pixel ``p`` to ``p + disp[p]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

__all__ = [
    "Image",
    "DisplacementField",
    "AffineWarp",
    "StationaryVelocityField",
    "ShapeError",
    "pixel_grid",
    "identity_grid",
    "sample",
    "sample_grad",
    "sample_grad2",
    "warp_coords",
    "affine_scale",
    "affine_to_params",
    "affine_from_params",
    "affine_coords_jacobian",
    "warp_image",
    "svf_exp",
    "svf_exp_backward",
    "compose",
    "jacobian_det",
    "downsample",
    "downsample_array",
    "downsample_backward",
    "upsample_warp",
    "upsample_image",
    "FeaturePyramid",
]


class ShapeError(ValueError):
    """Raised on incompatible array shapes or resolutions."""


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Image:
    """Dense ``H x W x C`` image with per-axis spacing."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"image data must be (H, W, C), got {data.shape}")
        _finite(data, "image")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ValueError("spacing must be two positive numbers")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class DisplacementField:
    disp: np.ndarray

    def __post_init__(self):
        disp = np.asarray(self.disp, dtype=np.float64)
        if disp.ndim != 3 or disp.shape[2] != 2:
            raise ShapeError(f"displacement must be (H, W, 2), got {disp.shape}")
        _finite(disp, "displacement")
        object.__setattr__(self, "disp", disp)

    @property
    def height(self):
        return self.disp.shape[0]

    @property
    def width(self):
        return self.disp.shape[1]

    @property
    def shape(self):
        return self.disp.shape[:2]

    def is_identity(self):
        return not np.any(self.disp)


@dataclass(frozen=True)
class AffineWarp:
    """``phi(x) = matrix @ (x - center) + center + translation``.

    ``center=None`` means the center of whatever grid the warp is applied to.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    center: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(2, 2)
        t = np.asarray(self.translation, dtype=np.float64).reshape(2)
        _finite(m, "affine matrix")
        _finite(t, "affine translation")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)
        if self.center is not None:
            object.__setattr__(
                self, "center", np.asarray(self.center, dtype=np.float64).reshape(2)
            )

    def center_for(self, shape):
        if self.center is not None:
            return self.center
        h, w = shape[:2]
        return np.array([(w - 1) / 2.0, (h - 1) / 2.0])

    def is_identity(self):
        return np.array_equal(self.matrix, np.eye(2)) and not np.any(self.translation)


@dataclass(frozen=True)
class StationaryVelocityField:
    velocity: np.ndarray
    integration_steps: int = 7

    def __post_init__(self):
        v = np.asarray(self.velocity, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ShapeError(f"velocity must be (H, W, 2), got {v.shape}")
        if int(self.integration_steps) < 1:
            raise ValueError("integration_steps must be >= 1")
        _finite(v, "velocity")
        object.__setattr__(self, "velocity", v)

    @property
    def shape(self):
        return self.velocity.shape[:2]


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-scale feature images, finest first, with their downsampling factors."""

    levels: tuple
    factors: tuple = (1, 2, 4)

    def __post_init__(self):
        levels = tuple(np.asarray(_data(l), dtype=np.float64) for l in self.levels)
        factors = tuple(int(f) for f in self.factors)
        if len(levels) != len(factors):
            raise ShapeError(f"{len(levels)} levels but {len(factors)} factors")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "factors", factors)

    def at(self, factor):
        try:
            return self.levels[self.factors.index(int(factor))]
        except ValueError:
            raise ShapeError(f"pyramid has no level with factor {factor}") from None


def _data(img):
    return img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def _disp(warp):
    return warp.disp if isinstance(warp, DisplacementField) else np.asarray(warp)


def pixel_grid(h, w):
    """``(H*W, 2)`` array of ``(x, y)`` pixel-center coordinates, row-major."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def identity_grid(h, w):
    if h < 1 or w < 1:
        raise ShapeError("grid size must be positive")
    return DisplacementField(np.zeros((h, w, 2)))


def _check_coords(coords):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (N, 2), got {coords.shape}")
    _finite(coords, "coords")
    return coords


def sample(img, coords):
    """Bilinear interpolation of ``img`` at ``coords``; returns ``(N, C)``."""
    return kernels.sample(_data(img), _check_coords(coords))


def sample_grad(img, coords, upstream):
    """Gradients of ``sum(upstream * sample(img, coords))``.

    Returns ``(d_img, d_coords)`` with shapes ``(H, W, C)`` and ``(N, 2)``.
    """
    data = _data(img)
    coords = _check_coords(coords)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (coords.shape[0], data.shape[2]):
        raise ShapeError(f"upstream must be {(coords.shape[0], data.shape[2])}, got {upstream.shape}")
    d_img = kernels.sample_backward(data.shape, coords, upstream)
    d_coords = np.einsum("nc,ncd->nd", upstream, kernels.spatial_grad(data, coords))
    return d_img, d_coords


def sample_grad2(img, coords, upstream, upstream_on_dcoords):
    """Double backward of :func:`sample_grad` through its ``d_coords`` output.

    Differentiates ``<upstream_on_dcoords, d_coords(img, coords, upstream)>``
    and returns gradients w.r.t. ``(img, coords, upstream)``.
    """
    data = _data(img)
    coords = _check_coords(coords)
    upstream = np.asarray(upstream, dtype=np.float64)
    u = np.asarray(upstream_on_dcoords, dtype=np.float64)
    if upstream.shape != (coords.shape[0], data.shape[2]) or u.shape != coords.shape:
        raise ShapeError("upstream shapes do not match coords/img")
    return kernels.sample_grad2(data, coords, upstream, u)


def _affine_coords(aff, h, w):
    grid = pixel_grid(h, w)
    c = aff.center_for((h, w))
    return (grid - c) @ aff.matrix.T + c + aff.translation


def affine_scale(shape):
    """Lever arm that puts the matrix parameters in pixel units at the border."""
    return max(shape[0], shape[1]) / 2.0


def affine_to_params(aff, shape):
    """``[tx, ty, s*(a11-1), s*a12, s*a21, s*(a22-1)]`` for a grid of ``shape``."""
    s = affine_scale(shape)
    m = (aff.matrix - np.eye(2)) * s
    return np.concatenate([aff.translation, m.ravel()])


def affine_from_params(params, shape, center=None):
    params = np.asarray(params, dtype=np.float64)
    s = affine_scale(shape)
    return AffineWarp(np.eye(2) + params[2:].reshape(2, 2) / s, params[:2], center)


def affine_coords_jacobian(aff, shape):
    """``d coords / d params`` with shape ``(H*W, 2, 6)``."""
    h, w = shape[:2]
    rel = (pixel_grid(h, w) - aff.center_for((h, w))) / affine_scale(shape)
    jac = np.zeros((h * w, 2, 6))
    jac[:, 0, 0] = 1.0
    jac[:, 1, 1] = 1.0
    jac[:, 0, 2] = rel[:, 0]
    jac[:, 0, 3] = rel[:, 1]
    jac[:, 1, 4] = rel[:, 0]
    jac[:, 1, 5] = rel[:, 1]
    return jac


def warp_coords(warp, shape):
    """Sampling coordinates ``(H*W, 2)`` of ``warp`` on a grid of ``shape``."""
    h, w = shape[:2]
    if isinstance(warp, AffineWarp):
        return _affine_coords(warp, h, w)
    disp = _disp(warp)
    if disp.shape[:2] != (h, w):
        raise ShapeError(f"warp resolution {disp.shape[:2]} != image resolution {(h, w)}")
    return pixel_grid(h, w) + disp.reshape(-1, 2)


def warp_image(img, warp):
    data = _data(img)
    coords = warp_coords(warp, data.shape)
    out = kernels.sample(data, coords).reshape(data.shape)
    if isinstance(img, Image):
        return Image(out, img.spacing)
    return out


def _compose_arrays(outer, inner):
    h, w, _ = inner.shape
    coords = pixel_grid(h, w) + inner.reshape(-1, 2)
    return inner + kernels.sample(outer, coords).reshape(h, w, 2)


def compose(outer, inner):
    """``(outer o inner)(x) = x + inner(x) + outer(x + inner(x))`` in displacements."""
    a, b = _disp(outer), _disp(inner)
    if a.shape != b.shape:
        raise ShapeError(f"compose needs equal resolutions, got {a.shape} and {b.shape}")
    return DisplacementField(_compose_arrays(a, b))


def _svf_forward(v, steps):
    fields = [v / (2.0**steps)]
    for _ in range(steps):
        fields.append(_compose_arrays(fields[-1], fields[-1]))
    return fields


def svf_exp(svf):
    """Scaling-and-squaring exponential of a stationary velocity field."""
    return DisplacementField(_svf_forward(svf.velocity, int(svf.integration_steps))[-1])


def svf_exp_backward(velocity, steps, d_disp):
    """Pull a gradient on ``svf_exp(velocity)`` back to the velocity."""
    velocity = np.asarray(velocity, dtype=np.float64)
    fields = _svf_forward(velocity, steps)
    h, w, _ = velocity.shape
    grid = pixel_grid(h, w)
    g = np.asarray(d_disp, dtype=np.float64)
    for d in reversed(fields[:-1]):
        coords = grid + d.reshape(-1, 2)
        up = g.reshape(-1, 2)
        d_img, d_coords = sample_grad(d, coords, up)
        g = g + d_img + d_coords.reshape(h, w, 2)
    return g / (2.0**steps)


def _central_jacobian(disp):
    """Per-pixel 2x2 Jacobian of ``id + disp``; central inside, one-sided at borders."""
    h, w, _ = disp.shape
    if h < 2 or w < 2:
        raise ShapeError("jacobian needs at least a 2x2 grid")
    dx = np.gradient(disp, axis=1)
    dy = np.gradient(disp, axis=0)
    jac = np.empty((h, w, 2, 2))
    jac[..., 0, 0] = 1.0 + dx[..., 0]
    jac[..., 0, 1] = dy[..., 0]
    jac[..., 1, 0] = dx[..., 1]
    jac[..., 1, 1] = 1.0 + dy[..., 1]
    return jac


def jacobian_det(warp):
    jac = _central_jacobian(_disp(warp))
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    return Image(det[:, :, None])


def downsample_array(arr, factor):
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    h, w = arr.shape[:2]
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} is not divisible by {factor}")
    out = arr
    f = factor
    while f > 1:
        hh, ww = out.shape[0] // 2, out.shape[1] // 2
        out = out.reshape(hh, 2, ww, 2, *out.shape[2:]).mean(axis=(1, 3))
        f //= 2
    return out


def downsample_backward(grad, factor):
    """Adjoint of :func:`downsample_array`."""
    factor = int(factor)
    return np.repeat(np.repeat(grad, factor, axis=0), factor, axis=1) / (factor * factor)


def downsample(img, factor):
    if isinstance(img, Image):
        sp = tuple(s * factor for s in img.spacing)
        return Image(downsample_array(img.data, factor), sp)
    return downsample_array(np.asarray(img, dtype=np.float64), factor)


def _upsample_coords(h, w, factor):
    """Coarse-grid coordinates of the centers of a ``factor``-times finer grid."""
    off = (factor - 1) / 2.0
    grid = pixel_grid(h * factor, w * factor)
    return (grid - off) / factor


def _clamped_sample(arr, coords):
    h, w = arr.shape[:2]
    c = coords.copy()
    c[:, 0] = np.clip(c[:, 0], 0, w - 1)
    c[:, 1] = np.clip(c[:, 1], 0, h - 1)
    return kernels.sample(arr, c)


def upsample_image(img, factor):
    """Bilinear upsampling with edge clamping (inverse grid of :func:`downsample`)."""
    data = _data(img)
    h, w, c = data.shape
    out = _clamped_sample(data, _upsample_coords(h, w, factor)).reshape(h * factor, w * factor, c)
    if isinstance(img, Image):
        return Image(out, tuple(s / factor for s in img.spacing))
    return out


def upsample_warp(warp, factor):
    """Upsample a displacement field, rescaling magnitudes to the finer pixel unit."""
    factor = int(factor)
    if factor < 2:
        raise ValueError("factor must be >= 2")
    disp = _disp(warp)
    h, w, _ = disp.shape
    up = _clamped_sample(disp, _upsample_coords(h, w, factor)).reshape(h * factor, w * factor, 2)
    return DisplacementField(up * factor)
