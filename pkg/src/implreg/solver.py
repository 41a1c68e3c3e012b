"""Black-box inner optimizer: gradient loops over warps with early stopping,
wrapped in a coarse-to-fine multi-scale routine."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import (
    AffineWarp,
    DisplacementField,
    FeaturePyramid,
    ShapeError,
    StationaryVelocityField,
    _data,
    affine_from_params,
    affine_to_params,
    svf_exp,
    svf_exp_backward,
    upsample_warp,
)
from .objectives import RegularizerKind, blended_loss, mse_loss

__all__ = [
    "ConfigError",
    "SolverDiverged",
    "SolverConfig",
    "MultiScaleResult",
    "MemoryTracker",
    "adam_step",
    "adam_init",
    "smooth_grad",
    "optimize_scale",
    "optimize_affine",
    "register_multiscale",
]

OPTIMIZERS = ("sgd", "adam")
WARP_KINDS = ("displacement", "svf", "affine")


class ConfigError(ValueError):
    pass


class SolverDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    scales: tuple = (4, 2, 1)
    iters: tuple = (200, 100, 50)
    optimizer: str = "sgd"
    lr: float | None = None
    rel_tol: float = 1e-4
    patience: int = 5
    warp_kind: str = "displacement"
    regularizer: RegularizerKind | None = None
    # Gaussian smoothing (pixels) applied to dense warp gradients; 0 disables
    grad_sigma: float = 1.0
    svf_steps: int = 7
    # Gaussian smoothing (pixels) of the velocity after every SVF step
    svf_sigma: float = 2.0
    # number of trailing iterates kept for phantom unrolling
    retain_k: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        iters = tuple(int(i) for i in self.iters)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "iters", iters)
        if not scales or scales[-1] != 1 or any(a <= b for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be strictly decreasing and end at 1, got {scales}")
        if len(scales) != len(iters):
            raise ConfigError("scales and iters must have equal lengths")
        if any(i < 1 for i in iters):
            raise ConfigError("iteration counts must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.warp_kind not in WARP_KINDS:
            raise ConfigError(f"warp_kind must be one of {WARP_KINDS}")
        if not self.rel_tol > 0 or self.patience < 1:
            raise ConfigError("early-stopping tolerance and patience must be positive")
        if self.lr is not None and (not np.isfinite(self.lr) or self.lr < 0):
            raise ConfigError("learning rate must be finite and non-negative")
        if self.grad_sigma < 0 or self.svf_sigma < 0 or self.svf_steps < 1 or self.retain_k < 0:
            raise ConfigError("grad_sigma, svf_steps and retain_k out of range")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")

    @property
    def learning_rate(self):
        if self.lr is not None:
            return float(self.lr)
        return 0.003 if self.optimizer == "sgd" else 0.5

    def replace(self, **kw):
        return replace(self, **kw)


class MemoryTracker:
    """Counts bytes of solver state retained for the backward pass."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes):
        self.current += int(nbytes)
        self.peak = max(self.peak, self.current)

    def free(self, nbytes):
        self.current -= int(nbytes)


@dataclass
class MultiScaleResult:
    warps: list
    final_warp: object
    loss_traces: list
    iterations_run: list
    scales: tuple = ()
    # per scale: list of warp arrays before each of the last k SGD steps
    phantom: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    config: SolverConfig | None = None


def adam_init(shape):
    return {"m": np.zeros(shape), "v": np.zeros(shape), "t": 0}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; returns new ``(params, state)``."""
    t = state["t"] + 1
    m = beta1 * state["m"] + (1 - beta1) * grads
    v = beta2 * state["v"] + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, {"m": m, "v": v, "t": t}


def smooth_grad(grad, sigma):
    """Gaussian smoothing of a dense ``(H, W, 2)`` field.

    Zero boundary handling keeps the operator symmetric, which the phantom
    unrolling relies on.
    """
    if sigma <= 0:
        return grad
    out = np.empty_like(grad)
    for c in range(grad.shape[2]):
        out[..., c] = gaussian_filter(grad[..., c], sigma, mode="constant", truncate=3.0)
    return out


def _as_param(warp, kind, shape):
    if kind == "affine":
        if not isinstance(warp, AffineWarp):
            raise ConfigError("affine solver needs an AffineWarp initialisation")
        return affine_to_params(warp, shape)
    if kind == "svf":
        arr = warp.velocity if isinstance(warp, StationaryVelocityField) else warp
    else:
        arr = warp.disp if isinstance(warp, DisplacementField) else warp
    arr = np.array(arr, dtype=np.float64)
    if arr.shape != (shape[0], shape[1], 2):
        raise ShapeError(f"initial warp {arr.shape[:2]} does not match features {shape[:2]}")
    return arr


def _as_warp(param, kind, shape, cfg, center=None):
    if kind == "affine":
        return affine_from_params(param, shape, center)
    if kind == "svf":
        return StationaryVelocityField(param, cfg.svf_steps)
    return DisplacementField(param)


def _objective(ff, fm, cfg):
    reg = cfg.regularizer
    if reg is not None and reg.weight > 0:
        return lambda w: blended_loss(ff, fm, w, reg)
    return lambda w: mse_loss(ff, fm, w)


def solver_objective(ff, fm, cfg):
    """The inner loss the solver minimises, as a function of the warp."""
    return _objective(_data(ff), _data(fm), cfg)


def identity_warp(kind, shape, cfg):
    init = _identity_init(kind, shape, cfg)
    if kind == "svf":
        return svf_exp(init)
    return init


def _run_scale(ff, fm, init, cfg, scale_idx, tracker=None, callback=None):
    ff, fm = _data(ff), _data(fm)
    shape = ff.shape
    kind = cfg.warp_kind
    center = init.center if isinstance(init, AffineWarp) else None
    param = _as_param(init, kind, shape)
    objective = _objective(ff, fm, cfg)
    lr = cfg.learning_rate
    dense = kind != "affine"
    # SGD on dense fields steps on the pixel-sum loss so lr is resolution-free
    sgd_scale = lr * shape[0] * shape[1] if dense else lr
    keep = cfg.retain_k if (cfg.optimizer == "sgd" and kind == "displacement") else 0
    retained = deque()
    state = adam_init(param.shape) if cfg.optimizer == "adam" else None
    trace = []
    streak = 0
    for it in range(cfg.iters[scale_idx]):
        if kind == "svf":
            disp = svf_exp(StationaryVelocityField(param, cfg.svf_steps))
            rep = objective(disp)
        else:
            rep = objective(_as_warp(param, kind, shape, cfg, center))
        if not np.isfinite(rep.value) or not np.all(np.isfinite(rep.grad)):
            raise SolverDiverged("diverged")
        trace.append(rep.value)
        if callback is not None:
            callback(scale_idx, it, _as_warp(param, kind, shape, cfg, center), rep)
        if len(trace) > 1:
            prev = trace[-2]
            rel = abs(trace[-1] - prev) / max(abs(prev), 1e-12)
            streak = streak + 1 if rel <= cfg.rel_tol else 0
            if streak >= cfg.patience:
                break
        grad = rep.grad
        if kind == "svf":
            grad = svf_exp_backward(param, cfg.svf_steps, grad)
        if dense:
            grad = smooth_grad(grad, cfg.grad_sigma)
        if keep:
            retained.append(param.copy())
            if tracker is not None:
                tracker.alloc(param.nbytes)
            if len(retained) > keep:
                dropped = retained.popleft()
                if tracker is not None:
                    tracker.free(dropped.nbytes)
        if cfg.optimizer == "sgd":
            param = param - sgd_scale * grad
        else:
            b1, b2 = cfg.betas
            param, state = adam_step(param, grad, state, lr, b1, b2, cfg.adam_eps)
        if kind == "svf":
            param = smooth_grad(param, cfg.svf_sigma)
        if not np.all(np.isfinite(param)):
            raise SolverDiverged("diverged")
    if tracker is not None:
        tracker.alloc(param.nbytes)
    return _as_warp(param, kind, shape, cfg, center), trace, list(retained), sgd_scale


def optimize_scale(f_f, f_m, init, cfg, scale_idx=0, tracker=None, callback=None):
    """Run the inner loop at one scale; returns ``(warp, loss_trace)``."""
    warp, trace, _, _ = _run_scale(f_f, f_m, init, cfg, scale_idx, tracker, callback)
    return warp, trace


def optimize_affine(f_f, f_m, cfg, init=None, scale_idx=0, callback=None):
    """Affine registration of a single image pair starting from the identity."""
    cfg = cfg.replace(warp_kind="affine")
    return optimize_scale(f_f, f_m, init or AffineWarp(), cfg, scale_idx, callback=callback)


def _identity_init(kind, shape, cfg):
    if kind == "affine":
        return AffineWarp()
    zeros = np.zeros((shape[0], shape[1], 2))
    if kind == "svf":
        return StationaryVelocityField(zeros, cfg.svf_steps)
    return DisplacementField(zeros)


def _carry(warp, kind, factor, cfg):
    """Move a converged warp to the next finer level."""
    if kind == "affine":
        return AffineWarp(warp.matrix, warp.translation * factor)
    if kind == "svf":
        up = upsample_warp(DisplacementField(warp.velocity), factor).disp
        return StationaryVelocityField(up, cfg.svf_steps)
    return upsample_warp(warp, factor)


def _levels(pyr, scales):
    if isinstance(pyr, FeaturePyramid):
        return [pyr.at(s) for s in scales]
    pyr = list(pyr)
    if len(pyr) != len(scales):
        raise ShapeError(f"pyramid has {len(pyr)} levels, config has {len(scales)} scales")
    return [_data(l) for l in pyr]


def register_multiscale(pyr_f, pyr_m, cfg, tracker=None, callback=None):
    """Coarse-to-fine registration of two feature pyramids.

    Plain lists are taken to be ordered like ``cfg.scales`` (coarsest first);
    :class:`FeaturePyramid` levels are looked up by factor.
    """
    lf = _levels(pyr_f, cfg.scales)
    lm = _levels(pyr_m, cfg.scales)
    kind = cfg.warp_kind
    warps, traces, counts, phantom, steps = [], [], [], [], []
    warp = None
    for k, (ff, fm) in enumerate(zip(lf, lm)):
        if ff.shape != fm.shape:
            raise ShapeError(f"level {k}: fixed {ff.shape} vs moving {fm.shape}")
        if warp is None:
            init = _identity_init(kind, ff.shape, cfg)
        else:
            init = _carry(warp, kind, cfg.scales[k - 1] // cfg.scales[k], cfg)
        warp, trace, kept, step = _run_scale(ff, fm, init, cfg, k, tracker, callback)
        stored = svf_exp(warp) if kind == "svf" else warp
        warps.append(stored)
        traces.append(trace)
        counts.append(len(trace))
        phantom.append(kept)
        steps.append(step)
    return MultiScaleResult(
        warps=warps,
        final_warp=warps[-1],
        loss_traces=traces,
        iterations_run=counts,
        scales=cfg.scales,
        phantom=phantom,
        step_sizes=steps,
        config=cfg,
    )
