"""Square-on-canvas toy pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ToyConfig:
    canvas: int = 128
    square: int = 32
    overlap_prob: float = 0.5
    seed: int = 0
    count: int = 64

    def __post_init__(self):
        if not 0 < self.square < self.canvas:
            raise ValueError("square must be smaller than the canvas")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError("overlap_prob must lie in [0, 1]")
        if self.count < 0:
            raise ValueError("count must be non-negative")


@dataclass
class ToyPair:
    fixed: np.ndarray
    moving: np.ndarray
    fixed_label: np.ndarray
    moving_label: np.ndarray
    overlap: bool
    corners: tuple


def _canvas(cfg, r, c):
    img = np.zeros((cfg.canvas, cfg.canvas, 1))
    img[r : r + cfg.square, c : c + cfg.square] = 1.0
    return img


def squares_overlap(a, b, size):
    return abs(a[0] - b[0]) < size and abs(a[1] - b[1]) < size


def toy_generate(cfg):
    """Yield ``cfg.count`` pairs; labels equal the intensities.

    Each pair first draws whether it should overlap, then redraws uniform
    square positions until the overlap outcome matches.
    """
    rng = np.random.default_rng(cfg.seed)
    hi = cfg.canvas - cfg.square + 1
    for _ in range(cfg.count):
        want = bool(rng.random() < cfg.overlap_prob)
        while True:
            a = tuple(int(v) for v in rng.integers(0, hi, size=2))
            b = tuple(int(v) for v in rng.integers(0, hi, size=2))
            if squares_overlap(a, b, cfg.square) == want:
                break
        fixed = _canvas(cfg, *a)
        moving = _canvas(cfg, *b)
        yield ToyPair(fixed, moving, fixed.copy(), moving.copy(), want, (a, b))


def toy_pairs(cfg):
    return list(toy_generate(cfg))
