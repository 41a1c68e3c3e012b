"""Small 2D convolutional feature extractor with hand-written reverse mode.

Two architectures share one encoder of stride-2 3x3 convolutions:

* ``shared``: a mirrored decoder with skip concatenation; a 1x1 head on the
  decoder output at each of the finest ``out_levels`` resolutions.
* ``encoder``: heads attach directly to the encoder levels.

All tensors are ``(H, W, C)`` float64 arrays.  Parameters live in one flat
vector; :meth:`FeatureNet.view` returns named reshaped views into it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .grid import FeaturePyramid, ShapeError, _data
from .io import read_rwt, write_rwt

__all__ = [
    "FeatureNet",
    "NetCache",
    "StaleCache",
    "adamw_init",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
    "conv2d",
    "conv2d_backward",
    "instance_norm",
    "instance_norm_backward",
    "upsample2",
    "upsample2_backward",
    "pyramid_rms",
    "feature_collapse",
]

SLOPE = 0.1
NORM_EPS = 1e-5
ARCHS = ("shared", "encoder")


class StaleCache(RuntimeError):
    pass


# -- layers --------------------------------------------------------------------


def _im2col(x, k, stride):
    h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    cols = np.empty((ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j, :] = xp[i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(ho * wo, k * k * c), (ho, wo)


def conv2d(x, weight, bias, stride=1):
    """Zero-padded ``k x k`` convolution; ``weight`` is ``(k, k, Cin, Cout)``."""
    k = weight.shape[0]
    cols, (ho, wo) = _im2col(x, k, stride)
    out = cols @ weight.reshape(-1, weight.shape[3]) + bias
    return out.reshape(ho, wo, -1), cols


def conv2d_backward(dy, x_shape, cols, weight, stride=1):
    k = weight.shape[0]
    co = weight.shape[3]
    flat = dy.reshape(-1, co)
    d_w = (cols.T @ flat).reshape(weight.shape)
    d_b = flat.sum(axis=0)
    dcols = (flat @ weight.reshape(-1, co).T).reshape(dy.shape[0], dy.shape[1], k, k, -1)
    h, w, c = x_shape
    p = k // 2
    dxp = np.zeros((h + 2 * p, w + 2 * p, c))
    ho, wo = dy.shape[:2]
    for i in range(k):
        for j in range(k):
            dxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j, :]
    return dxp[p : p + h, p : p + w], d_w, d_b


def instance_norm(x, eps=NORM_EPS):
    mean = x.mean(axis=(0, 1))
    var = x.var(axis=(0, 1))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return xhat, (xhat, inv)


def instance_norm_backward(dy, cache):
    xhat, inv = cache
    n = xhat.shape[0] * xhat.shape[1]
    s1 = dy.sum(axis=(0, 1))
    s2 = (dy * xhat).sum(axis=(0, 1))
    return inv / n * (n * dy - s1 - xhat * s2)


def leaky_relu(x):
    return np.where(x > 0, x, SLOPE * x)


def leaky_relu_backward(dy, x):
    return np.where(x > 0, dy, SLOPE * dy)


def _up_axis(x, axis):
    n = x.shape[axis]
    idx = np.arange(n)
    prev = np.take(x, np.maximum(idx - 1, 0), axis=axis)
    nxt = np.take(x, np.minimum(idx + 1, n - 1), axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_backward(dy, axis):
    shape = list(dy.shape)
    n = shape[axis] // 2
    shape[axis] = n
    shape.insert(axis + 1, 2)
    pair = dy.reshape(shape)
    even = np.take(pair, 0, axis=axis + 1)
    odd = np.take(pair, 1, axis=axis + 1)
    dx = 0.75 * (even + odd)
    sl = [slice(None)] * dx.ndim

    def part(arr, start, stop):
        s = list(sl)
        s[axis] = slice(start, stop)
        return arr[tuple(s)]

    # even outputs also read x[i-1] (clamped at 0), odd ones read x[i+1]
    lo = dx.copy() * 0
    part(lo, 0, n - 1)[...] += part(even, 1, n)
    part(lo, 0, 1)[...] += part(even, 0, 1)
    part(lo, 1, n)[...] += part(odd, 0, n - 1)
    part(lo, n - 1, n)[...] += part(odd, n - 1, n)
    return dx + 0.25 * lo


def upsample2(x):
    """Bilinear x2 upsampling with edge clamping (pixel centers at half steps)."""
    return _up_axis(_up_axis(x, 0), 1)


def upsample2_backward(dy):
    return _up_axis_backward(_up_axis_backward(dy, 1), 0)


# -- network ---------------------------------------------------------------------


@dataclass
class NetCache:
    version: int
    shape: tuple
    tape: list


class FeatureNet:
    """Multi-scale feature extractor with named views into a flat parameter vector."""

    def __init__(self, arch="shared", channels=8, widths=(8, 16, 16), in_channels=1,
                 out_levels=3, seed=0, init=True):
        if arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        widths = tuple(int(w) for w in widths)
        if len(widths) < out_levels:
            raise ValueError("need at least as many encoder levels as output levels")
        if arch == "encoder" and len(widths) != out_levels:
            raise ValueError("encoder-only nets use one encoder level per output level")
        self.arch = arch
        self.channels = int(channels)
        self.widths = widths
        self.in_channels = int(in_channels)
        self.out_levels = int(out_levels)
        self.seed = int(seed)
        self.version = 0
        self.specs = []
        cin = self.in_channels
        for l, w in enumerate(widths):
            self.specs.append((f"enc{l}.w", (3, 3, cin, w)))
            self.specs.append((f"enc{l}.b", (w,)))
            cin = w
        if arch == "shared":
            for l in range(len(widths) - 2, -1, -1):
                cin = widths[l + 1] + widths[l]
                self.specs.append((f"dec{l}.w", (3, 3, cin, widths[l])))
                self.specs.append((f"dec{l}.b", (widths[l],)))
        for l in range(self.out_levels):
            self.specs.append((f"head{l}.w", (1, 1, widths[l], self.channels)))
            self.specs.append((f"head{l}.b", (self.channels,)))
        self.offsets = {}
        pos = 0
        for name, shape in self.specs:
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size, shape)
            pos += size
        self.params = np.zeros(pos)
        if init:
            self.reset(seed)

    @property
    def factors(self):
        return tuple(2**l for l in range(self.out_levels))

    @property
    def size(self):
        return self.params.size

    def reset(self, seed):
        """Kaiming-uniform fan-in weights, zero biases."""
        rng = np.random.default_rng(seed)
        gain = np.sqrt(2.0 / (1.0 + SLOPE**2))
        for name, shape in self.specs:
            view = self.view(name)
            if name.endswith(".w"):
                fan_in = shape[0] * shape[1] * shape[2]
                bound = gain * np.sqrt(3.0 / fan_in)
                view[...] = rng.uniform(-bound, bound, size=shape)
            else:
                view[...] = 0.0
        self.version += 1

    def view(self, name, vec=None):
        start, stop, shape = self.offsets[name]
        vec = self.params if vec is None else vec
        return vec[start:stop].reshape(shape)

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape[0]} parameters, got {flat.shape}")
        self.params = flat.copy()
        self.version += 1

    def _block(self, x, name, stride, tape):
        y, cols = conv2d(x, self.view(name + ".w"), self.view(name + ".b"), stride)
        z, norm = instance_norm(y)
        tape.append((name, x.shape, cols, stride, norm, z))
        return leaky_relu(z)

    def _block_backward(self, dy, entry, grad):
        name, x_shape, cols, stride, norm, z = entry
        dz = leaky_relu_backward(dy, z)
        dyc = instance_norm_backward(dz, norm)
        dx, dw, db = conv2d_backward(dyc, x_shape, cols, self.view(name + ".w"), stride)
        self.view(name + ".w", grad)[...] += dw
        self.view(name + ".b", grad)[...] += db
        return dx

    def forward(self, img):
        """Feature pyramid (finest first) and the cache needed by :meth:`backward`."""
        x = _data(img)
        if x.shape[2] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[2]}")
        div = 2 ** (len(self.widths) - 1)
        if x.shape[0] % div or x.shape[1] % div:
            raise ShapeError(f"input {x.shape[:2]} must be divisible by {div}")
        tape = []
        enc = []
        h = x
        for l in range(len(self.widths)):
            h = self._block(h, f"enc{l}", 1 if l == 0 else 2, tape)
            enc.append(h)
        if self.arch == "shared":
            feats = [None] * len(self.widths)
            feats[-1] = enc[-1]
            d = enc[-1]
            for l in range(len(self.widths) - 2, -1, -1):
                cat = np.concatenate([upsample2(d), enc[l]], axis=2)
                d = self._block(cat, f"dec{l}", 1, tape)
                feats[l] = d
        else:
            feats = enc
        levels = []
        for l in range(self.out_levels):
            out, cols = conv2d(feats[l], self.view(f"head{l}.w"), self.view(f"head{l}.b"))
            tape.append((f"head{l}", feats[l].shape, cols))
            levels.append(out)
        pyr = FeaturePyramid(tuple(levels), self.factors)
        return pyr, NetCache(self.version, x.shape, tape)

    def features(self, img):
        return self.forward(img)[0]

    def backward(self, cache, d_levels):
        """Gradient of ``sum_l <d_levels[l], forward(img).levels[l]>`` w.r.t. the parameters."""
        if cache.version != self.version:
            raise StaleCache("cache was produced with different parameters")
        if len(d_levels) != self.out_levels:
            raise ShapeError("need one upstream gradient per pyramid level")
        grad = np.zeros_like(self.params)
        tape = list(cache.tape)
        n_blocks = len(self.widths) + (len(self.widths) - 1 if self.arch == "shared" else 0)
        heads = tape[n_blocks:]
        blocks = tape[:n_blocks]
        d_feats = [None] * len(self.widths)
        for l, (name, shape, cols) in enumerate(heads):
            dl = np.asarray(d_levels[l], dtype=np.float64)
            w = self.view(name + ".w")
            dx, dw, db = conv2d_backward(dl.reshape(shape[0], shape[1], -1), shape, cols, w)
            self.view(name + ".w", grad)[...] += dw
            self.view(name + ".b", grad)[...] += db
            d_feats[l] = dx
        nl = len(self.widths)
        d_feats = [0.0 if d is None else d for d in d_feats]
        d_enc = [0.0] * nl
        if self.arch == "shared":
            # decoder blocks were recorded coarsest first; walk them finest first
            dec_entries = blocks[nl:][::-1]
            for l in range(nl - 1):
                dcat = self._block_backward(d_feats[l], dec_entries[l], grad)
                c_up = self.widths[l + 1]
                d_feats[l + 1] = d_feats[l + 1] + upsample2_backward(dcat[:, :, :c_up])
                d_enc[l] = dcat[:, :, c_up:]
            # the coarsest decoder feature is the last encoder output
            d_enc[nl - 1] = d_feats[nl - 1]
        else:
            d_enc = d_feats
        d = 0.0
        for l in range(nl - 1, -1, -1):
            d = d + d_enc[l]
            if np.isscalar(d):
                d = np.zeros(blocks[l][5].shape)
            d = self._block_backward(d, blocks[l], grad)
        return grad


def pyramid_rms(pyr):
    levels = pyr.levels if isinstance(pyr, FeaturePyramid) else pyr
    total = sum(float(np.sum(np.square(l))) for l in levels)
    count = sum(l.size for l in levels)
    return float(np.sqrt(total / max(count, 1)))


def feature_collapse(pyr, threshold=1e-3):
    """True when features have shrunk far enough to trivialise the inner MSE."""
    return pyramid_rms(pyr) < threshold


# -- optimizer ---------------------------------------------------------------------


def adamw_init(n):
    return {"m": np.zeros(n), "v": np.zeros(n), "t": 0}


def adamw_step(params, grads, state, lr=3e-4, beta1=0.9, beta2=0.999, weight_decay=1e-2, eps=1e-8):
    """AdamW with decoupled weight decay scaled by the learning rate."""
    t = state["t"] + 1
    m = beta1 * state["m"] + (1 - beta1) * grads
    v = beta2 * state["v"] + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = params - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params)
    return new, {"m": m, "v": v, "t": t}


# -- checkpoints --------------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(net, directory, extra=None):
    """One RWT1 file per named tensor plus a line-oriented manifest."""
    os.makedirs(directory, exist_ok=True)
    lines = [
        "format = implreg-checkpoint-1",
        f"arch = {net.arch}",
        f"channels = {net.channels}",
        f"widths = {','.join(str(w) for w in net.widths)}",
        f"in_channels = {net.in_channels}",
        f"out_levels = {net.out_levels}",
        f"seed = {net.seed}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    for name, shape in net.specs:
        fname = name.replace(".", "_") + ".rwt"
        write_rwt(os.path.join(directory, fname), net.view(name))
        lines.append(f"tensor {name} {'x'.join(str(s) for s in shape)} {fname}")
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    meta, tensors = {}, []
    with open(os.path.join(directory, MANIFEST)) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("tensor "):
                _, name, shape, fname = line.split()
                tensors.append((name, tuple(int(s) for s in shape.split("x")), fname))
            else:
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    return meta, tensors


def load_checkpoint(directory):
    meta, tensors = read_manifest(directory)
    net = FeatureNet(
        arch=meta["arch"],
        channels=int(meta["channels"]),
        widths=tuple(int(w) for w in meta["widths"].split(",")),
        in_channels=int(meta.get("in_channels", 1)),
        out_levels=int(meta.get("out_levels", 3)),
        seed=int(meta.get("seed", 0)),
        init=False,
    )
    for name, shape, fname in tensors:
        if name not in net.offsets:
            raise ShapeError(f"checkpoint tensor {name} does not belong to this architecture")
        arr = read_rwt(os.path.join(directory, fname))
        if arr.shape != shape or net.offsets[name][2] != shape:
            raise ShapeError(f"{name}: stored shape {arr.shape}, expected {net.offsets[name][2]}")
        net.view(name)[...] = arr
    net.version += 1
    return net, meta
