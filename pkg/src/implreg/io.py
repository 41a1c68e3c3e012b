"""RWT1 raw tensor files and binary PGM (P5) images."""

import struct

import numpy as np

MAGIC = b"RWTENS01"
_DTYPES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    pass


def write_rwt(path, array):
    """Write ``array`` as a little-endian float32 RWT1 tensor."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<B", 0))
        fh.write(arr.tobytes(order="C"))


def read_rwt(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}")
    off = 8
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    (tag,) = struct.unpack_from("<B", blob, off)
    off += 1
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = blob[off:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float64)


def write_pgm(path, image, vmin=None, vmax=None):
    """Save a single-channel array as 8-bit binary PGM, linearly rescaled."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise ValueError("PGM export needs a single channel")
        arr = arr[:, :, 0]
    lo = arr.min() if vmin is None else vmin
    hi = arr.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.round((arr - lo) * scale), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path):
    """Read a binary PGM; returns float values in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(blob[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return data.astype(np.float64) / maxval
