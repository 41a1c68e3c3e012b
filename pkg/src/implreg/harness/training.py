"""End-to-end training and evaluation of the feature network."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from ..grid import AffineWarp, FeaturePyramid, _data, downsample_array, jacobian_det, warp_image
from ..implicit import backward, parse_backend
from ..net import FeatureNet, adamw_init, adamw_step, feature_collapse, load_checkpoint, save_checkpoint
from ..objectives import mse_loss, soft_dice
from ..solver import ConfigError, MemoryTracker, SolverConfig, SolverDiverged, register_multiscale
from .toy import ToyConfig, toy_pairs

OUTER_LOSSES = ("dice", "dice+mse")
VAL_STREAM = 1
TRAIN_STREAM = 0


def toy_solver():
    """Inner solver used for the toy task: affine Adam, coarse to fine."""
    return SolverConfig(
        scales=(4, 2, 1), iters=(200, 100, 50), optimizer="adam", lr=0.5, warp_kind="affine"
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    pairs_per_epoch: int = 64
    outer_loss: str = "dice"
    backend: str = "jfb"
    solver: SolverConfig = field(default_factory=toy_solver)
    arch: str = "shared"
    channels: int = 8
    widths: tuple = (8, 16, 16, 16, 16, 16)
    out_levels: int = 3
    seed: int = 0
    lr: float = 3e-4
    weight_decay: float = 0.0
    val_pairs: int = 256
    toy: ToyConfig = field(default_factory=ToyConfig)
    max_skip_frac: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.pairs_per_epoch < 1 or self.val_pairs < 0:
            raise ConfigError("epochs, pairs_per_epoch and val_pairs must be non-negative counts")
        if self.outer_loss not in OUTER_LOSSES:
            raise ConfigError(f"outer_loss must be one of {OUTER_LOSSES}")
        try:
            parse_backend(self.backend)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")

    def replace(self, **kw):
        return replace(self, **kw)


class TrainingAborted(RuntimeError):
    pass


def _seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def train_stream(cfg, epoch):
    toy = replace(cfg.toy, seed=_seed(cfg.seed, TRAIN_STREAM, epoch), count=cfg.pairs_per_epoch)
    return toy_pairs(toy)


def validation_set(cfg_or_seed, count=256, toy=None):
    if isinstance(cfg_or_seed, TrainConfig):
        seed, count, toy = cfg_or_seed.seed, cfg_or_seed.val_pairs, cfg_or_seed.toy
    else:
        seed, toy = int(cfg_or_seed), toy or ToyConfig()
    return toy_pairs(replace(toy, seed=_seed(seed, VAL_STREAM), count=count))


def _pool(label, factor):
    return downsample_array(label, factor) if factor > 1 else label


def outer_loss(result, pair, outer="dice"):
    """Outer loss summed over the stored warps and its gradient per warp."""
    total = 0.0
    grads = []
    for warp, s in zip(result.warps, result.scales):
        sf, sm = _pool(pair.fixed_label, s), _pool(pair.moving_label, s)
        rep = soft_dice(sf, sm, warp)
        total += rep.value
        g = rep.grad
        if outer == "dice+mse":
            m = mse_loss(_pool(pair.fixed, s), _pool(pair.moving, s), warp)
            total += m.value
            g = g + m.grad
        grads.append(g)
    return total, grads


def step_pair(net, pair, solver, backend, outer="dice", tracker=None):
    """Forward, inner solve, outer loss and parameter gradient for one pair."""
    pyr_f, cache_f = net.forward(pair.fixed)
    pyr_m, cache_m = net.forward(pair.moving)
    result = register_multiscale(pyr_f, pyr_m, solver, tracker=tracker)
    loss, d_warps = outer_loss(result, pair, outer)
    grads = backward(result, d_warps, pyr_f, pyr_m, backend, tracker=tracker)
    d_f = [None] * net.out_levels
    d_m = [None] * net.out_levels
    for s, gf, gm in zip(result.scales, grads.d_ff, grads.d_fm):
        idx = net.factors.index(s)
        d_f[idx], d_m[idx] = gf, gm
    for lst, pyr in ((d_f, pyr_f), (d_m, pyr_m)):
        for i, arr in enumerate(lst):
            if arr is None:
                lst[i] = np.zeros_like(pyr.levels[i])
    g = net.backward(cache_f, d_f) + net.backward(cache_m, d_m)
    return loss, g, result, pyr_f


def build_net(cfg):
    return FeatureNet(
        arch=cfg.arch, channels=cfg.channels, widths=cfg.widths, out_levels=cfg.out_levels, seed=cfg.seed
    )


def train(cfg, out_dir=None, log=None, net=None, on_epoch=None):
    """Train on fresh toy pairs every epoch; returns ``(net, curve_rows)``.

    Rows are ``(epoch, mean_loss, skipped, collapsed)``.  Pairs whose inner
    solve diverges are skipped; more than ``max_skip_frac`` per epoch aborts.
    """
    net = net or build_net(cfg)
    backend = parse_backend(cfg.backend)
    solver = cfg.solver
    if backend.tag == "phantom":
        solver = solver.replace(retain_k=max(solver.retain_k, backend.k))
    state = adamw_init(net.size)
    rows = []
    for epoch in range(cfg.epochs):
        losses, skipped, collapsed = [], 0, 0
        for pair in train_stream(cfg, epoch):
            try:
                loss, g, _, pyr = step_pair(net, pair, solver, backend, cfg.outer_loss)
            except SolverDiverged:
                skipped += 1
                if skipped > cfg.max_skip_frac * cfg.pairs_per_epoch:
                    raise TrainingAborted(f"epoch {epoch}: too many diverged inner solves") from None
                continue
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingAborted(f"epoch {epoch}: non-finite loss or gradient")
            collapsed += feature_collapse(pyr)
            params, state = adamw_step(net.params, g, state, cfg.lr, weight_decay=cfg.weight_decay)
            net.set_params(params)
            losses.append(loss)
        row = (epoch, float(np.mean(losses)) if losses else float("nan"), skipped, collapsed)
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch} loss {row[1]:.5f} skipped {skipped} collapsed {collapsed}")
        if on_epoch is not None:
            on_epoch(epoch, net)
    if out_dir is not None:
        save_checkpoint(net, out_dir, extra=_manifest_extra(cfg))
        net, _ = load_checkpoint(out_dir)
    return net, rows


def _manifest_extra(cfg):
    return {
        "epochs": cfg.epochs,
        "pairs_per_epoch": cfg.pairs_per_epoch,
        "backend": cfg.backend,
        "outer_loss": cfg.outer_loss,
        "train_seed": cfg.seed,
        "canvas": cfg.toy.canvas,
        "square": cfg.toy.square,
        "overlap_prob": cfg.toy.overlap_prob,
        "warp_kind": cfg.solver.warp_kind,
    }


# -- evaluation ------------------------------------------------------------------


def hard_dice(a, b):
    a, b = a > 0.5, b > 0.5
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * np.logical_and(a, b).sum() / denom)


def boundary_error(a, b):
    """Largest distance from either mask's boundary to the other boundary (pixels)."""
    a, b = a > 0.5, b > 0.5
    if not a.any() or not b.any():
        return float(max(a.shape))
    ba = a & ~binary_erosion(a)
    bb = b & ~binary_erosion(b)
    da = distance_transform_edt(~bb)
    db = distance_transform_edt(~ba)
    return float(max(da[ba].max(), db[bb].max()))


def neg_jacobian_fraction(warp, shape):
    if isinstance(warp, AffineWarp):
        return float(np.linalg.det(warp.matrix) <= 0)
    det = _data(jacobian_det(warp))
    return float(np.mean(det <= 0))


EVAL_FIELDS = (
    "pair", "overlap", "dice", "dice_init", "boundary_error", "neg_jac_fraction",
    "iterations", "wall_time_ms",
)


class IntensityFeatures:
    """Stand-in for a network: the pyramid is the average-pooled image itself."""

    def __init__(self, factors=(1, 2, 4)):
        self.factors = tuple(factors)

    def features(self, img):
        img = _data(img)
        levels = [img if f == 1 else downsample_array(img, f) for f in self.factors]
        return FeaturePyramid(tuple(levels), self.factors)


def evaluate_pair(net, pair, solver, index=0):
    t0 = time.perf_counter()
    pyr_f = net.features(pair.fixed)
    pyr_m = net.features(pair.moving)
    result = register_multiscale(pyr_f, pyr_m, solver)
    elapsed = 1000.0 * (time.perf_counter() - t0)
    warped = _data(warp_image(pair.moving_label, result.final_warp))
    return {
        "pair": index,
        "overlap": int(pair.overlap),
        "dice": hard_dice(pair.fixed_label, warped),
        "dice_init": hard_dice(pair.fixed_label, pair.moving_label),
        "boundary_error": boundary_error(pair.fixed_label[..., 0], warped[..., 0]),
        "neg_jac_fraction": neg_jacobian_fraction(result.final_warp, pair.fixed.shape),
        "iterations": int(sum(result.iterations_run)),
        "wall_time_ms": elapsed,
        "result": result,
    }


def evaluate(net, pairs, solver, keep_results=False):
    rows = []
    for i, pair in enumerate(pairs):
        try:
            row = evaluate_pair(net, pair, solver, i)
        except SolverDiverged:
            row = {k: float("nan") for k in EVAL_FIELDS}
            row.update(pair=i, overlap=int(pair.overlap), dice_init=hard_dice(pair.fixed_label, pair.moving_label))
            row["result"] = None
        if not keep_results:
            row.pop("result", None)
        rows.append(row)
    return rows


def subset_means(rows, key="dice"):
    out = {}
    for flag, name in ((1, "overlap"), (0, "disjoint")):
        vals = [r[key] for r in rows if r["overlap"] == flag]
        out[name] = float(np.mean(vals)) if vals else float("nan")
    return out


def memory_peak(net, pair, solver, backend):
    """Peak solver-state bytes retained across one forward/backward."""
    backend = parse_backend(backend)
    if backend.tag == "phantom":
        solver = solver.replace(retain_k=max(solver.retain_k, backend.k))
    tracker = MemoryTracker()
    step_pair(net, pair, solver, backend, tracker=tracker)
    return tracker.peak


def soft_val_loss(net, pairs, solver):
    vals = []
    for pair in pairs:
        pyr_f, pyr_m = net.features(pair.fixed), net.features(pair.moving)
        result = register_multiscale(pyr_f, pyr_m, solver)
        vals.append(outer_loss(result, pair)[0])
    return float(np.mean(vals))


__all__ = [
    "TrainConfig",
    "TrainingAborted",
    "toy_solver",
    "train",
    "train_stream",
    "validation_set",
    "step_pair",
    "outer_loss",
    "evaluate",
    "evaluate_pair",
    "subset_means",
    "hard_dice",
    "boundary_error",
    "neg_jacobian_fraction",
    "memory_peak",
    "EVAL_FIELDS",
    "MemoryTracker",
    "ToyConfig",
    "AffineWarp",
    "load_checkpoint",
]
