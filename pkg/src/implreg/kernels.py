"""Bilinear sampling kernels and their first/second derivatives.

Images are ``(H, W, C)`` float64 arrays, coordinates are ``(N, 2)`` arrays of
``(x, y)`` pixel positions with pixel centers on integers.  Out-of-range
neighbours read as zero.  Every kernel exists twice: a scalar-loop version
compiled with numba and a vectorised numpy version.  The public names are
bound to one of them according to :data:`implreg._accel.USE_NUMBA`.

Derivative convention: inside a cell the spatial gradient is the exact
derivative of the bilinear interpolant.  On a grid line (fractional part
exactly zero) the derivative across that line is the average of the two
one-sided derivatives, so sampling at pixel centers yields central
differences.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "sample",
    "spatial_grad",
    "sample_backward",
    "sample_grad2",
    "numpy_kernels",
    "numba_kernels",
]


# ---------------------------------------------------------------------------
# scalar kernels (numba)
# ---------------------------------------------------------------------------


@njit
def _read(img, r, c, ch):
    if r < 0 or c < 0 or r >= img.shape[0] or c >= img.shape[1]:
        return 0.0
    return img[r, c, ch]


@njit
def _add(out, r, c, ch, v):
    if r < 0 or c < 0 or r >= out.shape[0] or c >= out.shape[1]:
        return
    out[r, c, ch] += v


@njit
def _taps(x, y, rows, cols, cv, cgx, cgy, cgxy, cgyx):
    """Fill the 4-tap stencils at (x, y).

    rows/cols have shape (5, 4): one row per quantity, in the order value,
    d/dx, d/dy, d2/dxdy (derivative of d/dx along y), d2/dydx.
    """
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix = int(x0)
    iy = int(y0)

    # value
    rows[0, 0] = iy
    cols[0, 0] = ix
    cv[0] = (1.0 - fx) * (1.0 - fy)
    rows[0, 1] = iy
    cols[0, 1] = ix + 1
    cv[1] = fx * (1.0 - fy)
    rows[0, 2] = iy + 1
    cols[0, 2] = ix
    cv[2] = (1.0 - fx) * fy
    rows[0, 3] = iy + 1
    cols[0, 3] = ix + 1
    cv[3] = fx * fy

    # x-difference operator Dx(row) and its taps
    if fx == 0.0:
        xl = ix - 1
        xr = ix + 1
        sx = 0.5
    else:
        xl = ix
        xr = ix + 1
        sx = 1.0
    if fy == 0.0:
        yl = iy - 1
        yr = iy + 1
        sy = 0.5
    else:
        yl = iy
        yr = iy + 1
        sy = 1.0

    # d/dx = (1-fy) Dx(iy) + fy Dx(iy+1)
    rows[1, 0] = iy
    cols[1, 0] = xr
    cgx[0] = (1.0 - fy) * sx
    rows[1, 1] = iy
    cols[1, 1] = xl
    cgx[1] = -(1.0 - fy) * sx
    rows[1, 2] = iy + 1
    cols[1, 2] = xr
    cgx[2] = fy * sx
    rows[1, 3] = iy + 1
    cols[1, 3] = xl
    cgx[3] = -fy * sx

    # d/dy = (1-fx) Dy(ix) + fx Dy(ix+1)
    rows[2, 0] = yr
    cols[2, 0] = ix
    cgy[0] = (1.0 - fx) * sy
    rows[2, 1] = yl
    cols[2, 1] = ix
    cgy[1] = -(1.0 - fx) * sy
    rows[2, 2] = yr
    cols[2, 2] = ix + 1
    cgy[2] = fx * sy
    rows[2, 3] = yl
    cols[2, 3] = ix + 1
    cgy[3] = -fx * sy

    # d/dy of d/dx = Dx(iy+1) - Dx(iy)
    rows[3, 0] = iy + 1
    cols[3, 0] = xr
    cgxy[0] = sx
    rows[3, 1] = iy + 1
    cols[3, 1] = xl
    cgxy[1] = -sx
    rows[3, 2] = iy
    cols[3, 2] = xr
    cgxy[2] = -sx
    rows[3, 3] = iy
    cols[3, 3] = xl
    cgxy[3] = sx

    # d/dx of d/dy = Dy(ix+1) - Dy(ix)
    rows[4, 0] = yr
    cols[4, 0] = ix + 1
    cgyx[0] = sy
    rows[4, 1] = yl
    cols[4, 1] = ix + 1
    cgyx[1] = -sy
    rows[4, 2] = yr
    cols[4, 2] = ix
    cgyx[2] = -sy
    rows[4, 3] = yl
    cols[4, 3] = ix
    cgyx[3] = sy


@njit
def _nb_sample(img, coords):
    n = coords.shape[0]
    nc = img.shape[2]
    out = np.zeros((n, nc))
    rows = np.empty((5, 4), np.int64)
    cols = np.empty((5, 4), np.int64)
    cv = np.empty(4)
    cgx = np.empty(4)
    cgy = np.empty(4)
    cgxy = np.empty(4)
    cgyx = np.empty(4)
    for i in range(n):
        _taps(coords[i, 0], coords[i, 1], rows, cols, cv, cgx, cgy, cgxy, cgyx)
        for ch in range(nc):
            acc = 0.0
            for t in range(4):
                acc += cv[t] * _read(img, rows[0, t], cols[0, t], ch)
            out[i, ch] = acc
    return out


@njit
def _nb_spatial_grad(img, coords):
    n = coords.shape[0]
    nc = img.shape[2]
    out = np.zeros((n, nc, 2))
    rows = np.empty((5, 4), np.int64)
    cols = np.empty((5, 4), np.int64)
    cv = np.empty(4)
    cgx = np.empty(4)
    cgy = np.empty(4)
    cgxy = np.empty(4)
    cgyx = np.empty(4)
    for i in range(n):
        _taps(coords[i, 0], coords[i, 1], rows, cols, cv, cgx, cgy, cgxy, cgyx)
        for ch in range(nc):
            gx = 0.0
            gy = 0.0
            for t in range(4):
                gx += cgx[t] * _read(img, rows[1, t], cols[1, t], ch)
                gy += cgy[t] * _read(img, rows[2, t], cols[2, t], ch)
            out[i, ch, 0] = gx
            out[i, ch, 1] = gy
    return out


@njit
def _nb_sample_backward(shape, coords, upstream):
    h, w, nc = shape
    dimg = np.zeros((h, w, nc))
    rows = np.empty((5, 4), np.int64)
    cols = np.empty((5, 4), np.int64)
    cv = np.empty(4)
    cgx = np.empty(4)
    cgy = np.empty(4)
    cgxy = np.empty(4)
    cgyx = np.empty(4)
    for i in range(coords.shape[0]):
        _taps(coords[i, 0], coords[i, 1], rows, cols, cv, cgx, cgy, cgxy, cgyx)
        for ch in range(nc):
            u = upstream[i, ch]
            if u == 0.0:
                continue
            for t in range(4):
                _add(dimg, rows[0, t], cols[0, t], ch, cv[t] * u)
    return dimg


@njit
def _nb_sample_grad2(img, coords, upstream, ucoords):
    n = coords.shape[0]
    h, w, nc = img.shape
    dimg = np.zeros((h, w, nc))
    dcoords = np.zeros((n, 2))
    dup = np.zeros((n, nc))
    rows = np.empty((5, 4), np.int64)
    cols = np.empty((5, 4), np.int64)
    cv = np.empty(4)
    cgx = np.empty(4)
    cgy = np.empty(4)
    cgxy = np.empty(4)
    cgyx = np.empty(4)
    for i in range(n):
        _taps(coords[i, 0], coords[i, 1], rows, cols, cv, cgx, cgy, cgxy, cgyx)
        ux = ucoords[i, 0]
        uy = ucoords[i, 1]
        sx = 0.0
        sy = 0.0
        for ch in range(nc):
            gx = 0.0
            gy = 0.0
            gxy = 0.0
            gyx = 0.0
            for t in range(4):
                gx += cgx[t] * _read(img, rows[1, t], cols[1, t], ch)
                gy += cgy[t] * _read(img, rows[2, t], cols[2, t], ch)
                gxy += cgxy[t] * _read(img, rows[3, t], cols[3, t], ch)
                gyx += cgyx[t] * _read(img, rows[4, t], cols[4, t], ch)
            up = upstream[i, ch]
            dup[i, ch] = ux * gx + uy * gy
            sx += up * uy * gyx
            sy += up * ux * gxy
            if up != 0.0:
                for t in range(4):
                    _add(dimg, rows[1, t], cols[1, t], ch, up * ux * cgx[t])
                    _add(dimg, rows[2, t], cols[2, t], ch, up * uy * cgy[t])
        dcoords[i, 0] = sx
        dcoords[i, 1] = sy
    return dimg, dcoords, dup


# ---------------------------------------------------------------------------
# vectorised kernels (numpy)
# ---------------------------------------------------------------------------


def _np_taps(coords):
    x = coords[:, 0]
    y = coords[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    onx = fx == 0.0
    ony = fy == 0.0
    xl = np.where(onx, ix - 1, ix)
    xr = ix + 1
    sx = np.where(onx, 0.5, 1.0)
    yl = np.where(ony, iy - 1, iy)
    yr = iy + 1
    sy = np.where(ony, 0.5, 1.0)
    gx, gy = 1.0 - fx, 1.0 - fy

    st = np.stack
    taps = {
        "v": (
            st([iy, iy, iy + 1, iy + 1], 1),
            st([ix, ix + 1, ix, ix + 1], 1),
            st([gx * gy, fx * gy, gx * fy, fx * fy], 1),
        ),
        "gx": (
            st([iy, iy, iy + 1, iy + 1], 1),
            st([xr, xl, xr, xl], 1),
            st([gy * sx, -gy * sx, fy * sx, -fy * sx], 1),
        ),
        "gy": (
            st([yr, yl, yr, yl], 1),
            st([ix, ix, ix + 1, ix + 1], 1),
            st([gx * sy, -gx * sy, fx * sy, -fx * sy], 1),
        ),
        "gxy": (
            st([iy + 1, iy + 1, iy, iy], 1),
            st([xr, xl, xr, xl], 1),
            st([sx, -sx, -sx, sx], 1),
        ),
        "gyx": (
            st([yr, yl, yr, yl], 1),
            st([ix + 1, ix + 1, ix, ix], 1),
            st([sy, -sy, -sy, sy], 1),
        ),
    }
    return taps


def _np_gather(img, rows, cols, coef):
    """sum_t coef[n,t] * img[rows[n,t], cols[n,t], :] -> (N, C)."""
    h, w, _ = img.shape
    ok = (rows >= 0) & (cols >= 0) & (rows < h) & (cols < w)
    vals = img[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)]
    vals = vals * (coef * ok)[..., None]
    return vals.sum(axis=1)


def _np_scatter(shape, rows, cols, coef, weights):
    """Accumulate coef[n,t] * weights[n,c] into an (H, W, C) array."""
    h, w, nc = shape
    ok = (rows >= 0) & (cols >= 0) & (rows < h) & (cols < w)
    flat = (np.clip(rows, 0, h - 1) * w + np.clip(cols, 0, w - 1)).ravel()
    okf = ok.ravel()
    out = np.empty((h * w, nc))
    for ch in range(nc):
        contrib = (coef * weights[:, ch : ch + 1]).ravel()
        out[:, ch] = np.bincount(flat[okf], weights=contrib[okf], minlength=h * w)
    return out.reshape(h, w, nc)


def _np_sample(img, coords):
    r, c, k = _np_taps(coords)["v"]
    return _np_gather(img, r, c, k)


def _np_spatial_grad(img, coords):
    taps = _np_taps(coords)
    gx = _np_gather(img, *taps["gx"])
    gy = _np_gather(img, *taps["gy"])
    return np.stack([gx, gy], axis=-1)


def _np_sample_backward(shape, coords, upstream):
    r, c, k = _np_taps(coords)["v"]
    return _np_scatter(tuple(shape), r, c, k, upstream)


def _np_sample_grad2(img, coords, upstream, ucoords):
    taps = _np_taps(coords)
    gx = _np_gather(img, *taps["gx"])
    gy = _np_gather(img, *taps["gy"])
    gxy = _np_gather(img, *taps["gxy"])
    gyx = _np_gather(img, *taps["gyx"])
    ux = ucoords[:, 0:1]
    uy = ucoords[:, 1:2]
    dup = ux * gx + uy * gy
    dcoords = np.stack(
        [(upstream * uy * gyx).sum(axis=1), (upstream * ux * gxy).sum(axis=1)], axis=1
    )
    dimg = _np_scatter(img.shape, *taps["gx"], upstream * ux)
    dimg += _np_scatter(img.shape, *taps["gy"], upstream * uy)
    return dimg, dcoords, dup


numpy_kernels = {
    "sample": _np_sample,
    "spatial_grad": _np_spatial_grad,
    "sample_backward": _np_sample_backward,
    "sample_grad2": _np_sample_grad2,
}

if USE_NUMBA:
    numba_kernels = {
        "sample": _nb_sample,
        "spatial_grad": _nb_spatial_grad,
        "sample_backward": lambda shape, coords, up: _nb_sample_backward(
            tuple(int(s) for s in shape), coords, up
        ),
        "sample_grad2": _nb_sample_grad2,
    }
    _active = numba_kernels
else:
    numba_kernels = None
    _active = numpy_kernels


def _prep(img, coords):
    return (
        np.ascontiguousarray(img, dtype=np.float64),
        np.ascontiguousarray(coords, dtype=np.float64),
    )


def sample(img, coords):
    img, coords = _prep(img, coords)
    return _active["sample"](img, coords)


def spatial_grad(img, coords):
    """Spatial gradient of each channel at ``coords``: shape (N, C, 2)."""
    img, coords = _prep(img, coords)
    return _active["spatial_grad"](img, coords)


def sample_backward(shape, coords, upstream):
    """Adjoint of :func:`sample` with respect to the image values."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    return _active["sample_backward"](shape, coords, upstream)


def sample_grad2(img, coords, upstream, ucoords):
    img, coords = _prep(img, coords)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    ucoords = np.ascontiguousarray(ucoords, dtype=np.float64)
    return _active["sample_grad2"](img, coords, upstream, ucoords)
