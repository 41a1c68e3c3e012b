"""Experiments built on a trained feature network."""

from __future__ import annotations

import numpy as np

from ..grid import FeaturePyramid, _data
from ..implicit import block_hessian, hessian_spectrum, parse_backend
from ..objectives import (
    DegenerateGradients,
    RegularizerKind,
    cosine_alignment,
    included_fraction,
    regularizer,
    surrogate_gradient,
)
from ..solver import (
    ConfigError,
    MemoryTracker,
    SolverDiverged,
    identity_warp,
    register_multiscale,
    solver_objective,
)
from .training import IntensityFeatures, build_net, evaluate, evaluate_pair, hard_dice, step_pair, train

SWEEP_FIELDS = ("family", "lambda", "pair", "reg_value", "dice", "dice_init", "neg_jac_fraction")
PROBE_FIELDS = ("scale", "iteration", "loss", "cos_mean", "cos_std", "included", "degenerate")
SPECTRUM_FIELDS = ("index", "eigenvalue")
ABLATION_FIELDS = ("backend", "epoch", "loss", "skipped")
MEMORY_FIELDS = ("backend", "inner_iters", "peak_bytes")
BASELINE_FIELDS = ("pair", "overlap", "dice", "dice_init", "grad_norm", "grad_norm_translation")


def initial_gradient(pyr_f, pyr_m, solver):
    """Largest inner-loss gradient norm at the identity over the solver scales.

    Returns ``(full, translation)``; the translation part is only split off for
    affine warps (otherwise both numbers are the same).
    """
    full = trans = 0.0
    for s in solver.scales:
        ff, fm = pyr_f.at(s), pyr_m.at(s)
        rep = solver_objective(ff, fm, solver)(identity_warp(solver.warp_kind, ff.shape, solver))
        g = np.asarray(rep.grad)
        full = max(full, float(np.linalg.norm(g)))
        part = g[:2] if solver.warp_kind == "affine" else g
        trans = max(trans, float(np.linalg.norm(part)))
    return full, trans


def intensity_baseline(pairs, solver):
    """Register raw intensities (no learned features) and report the start gradient."""
    feats = IntensityFeatures(tuple(sorted(solver.scales)))
    rows = evaluate(feats, pairs, solver)
    for row, pair in zip(rows, pairs):
        full, trans = initial_gradient(feats.features(pair.fixed), feats.features(pair.moving), solver)
        row["grad_norm"] = full
        row["grad_norm_translation"] = trans
    return rows


def sweep_regularizer(net, pairs, solver, families, lambdas, alpha=1.0, beta=1.0):
    """Evaluate with ``(1 - lam) * mse + lam * R`` for every family and weight."""
    if solver.warp_kind == "affine":
        raise ConfigError("regularizer sweeps need a dense warp")
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
    rows = []
    for fam in families:
        measure = RegularizerKind(fam, 0.0, alpha, beta)
        for lam in lambdas:
            cfg = solver.replace(regularizer=measure.with_weight(lam))
            for i, pair in enumerate(pairs):
                try:
                    row = evaluate_pair(net, pair, cfg, i)
                except SolverDiverged:
                    continue
                warp = row["result"].final_warp
                rows.append({
                    "family": fam,
                    "lambda": lam,
                    "pair": i,
                    "reg_value": regularizer(warp, measure, reduction="mean").value,
                    "dice": row["dice"],
                    "dice_init": row["dice_init"],
                    "neg_jac_fraction": row["neg_jac_fraction"],
                })
    return rows


def _single_channel(pyr, channel):
    if channel is None:
        return pyr
    levels = [_data(l)[..., channel : channel + 1] for l in pyr.levels]
    return FeaturePyramid(tuple(levels), pyr.factors)


def implicit_bias_probe(pyr_f, pyr_m, solver, channel=None, degenerate_frac=0.5):
    """Per-iteration alignment of the MSE warp gradient with the surrogate gradient.

    One row per evaluated iterate across all scales.  Rows where more than
    ``degenerate_frac`` of the pixels have a vanishing gradient are flagged.
    """
    if solver.warp_kind != "displacement" or solver.optimizer != "sgd":
        raise ConfigError("the implicit-bias probe needs free-form SGD")
    if solver.regularizer is not None and solver.regularizer.weight > 0:
        raise ConfigError("the implicit-bias probe needs the plain MSE inner loss")
    if isinstance(pyr_f, FeaturePyramid):
        pyr_f, pyr_m = _single_channel(pyr_f, channel), _single_channel(pyr_m, channel)
        moving = [pyr_m.at(s) for s in solver.scales]
    else:
        moving = [_data(l) for l in pyr_m]
    rows = []

    def record(scale_idx, it, warp, rep):
        surrogate = surrogate_gradient(moving[scale_idx], warp)
        frac = included_fraction(rep.grad, surrogate)
        try:
            mean, std = cosine_alignment(rep.grad, surrogate)
        except DegenerateGradients:
            mean, std = float("nan"), float("nan")
        rows.append({
            "scale": solver.scales[scale_idx],
            "iteration": it,
            "loss": rep.value,
            "cos_mean": mean,
            "cos_std": std,
            "included": frac,
            "degenerate": int(frac < 1.0 - degenerate_frac),
        })

    result = register_multiscale(pyr_f, pyr_m, solver, callback=record)
    return rows, result


def spectrum(pyr_f, pyr_m, solver):
    """Eigenvalues of the block Hessian at the converged finest-scale warp."""
    result = register_multiscale(pyr_f, pyr_m, solver)
    if isinstance(pyr_f, FeaturePyramid):
        ff, fm = pyr_f.at(1), pyr_m.at(1)
    else:
        ff, fm = _data(pyr_f[-1]), _data(pyr_m[-1])
    eig = hessian_spectrum(block_hessian(result.final_warp, ff, fm))
    return [{"index": i, "eigenvalue": float(e)} for i, e in enumerate(eig)]


def ablate_backends(cfg, backends, log=None):
    """Train one network per backend from the same seed; merged curve rows."""
    rows = []
    nets = {}
    for backend in backends:
        net, curve = train(cfg.replace(backend=str(backend)), log=log)
        nets[str(backend)] = net
        for epoch, loss, skipped, _ in curve:
            rows.append({"backend": str(backend), "epoch": epoch, "loss": loss, "skipped": skipped})
    return rows, nets


def memory_scaling(cfg, backends, iter_counts, pair):
    """Peak retained solver state for each backend and inner iteration budget.

    Early stopping is disabled so every budget is actually spent.
    """
    rows = []
    net = build_net(cfg)
    for backend in backends:
        for iters in iter_counts:
            solver = cfg.solver.replace(iters=tuple(iters for _ in cfg.solver.scales), rel_tol=1e-300)
            b = parse_backend(str(backend))
            if b.tag == "phantom":
                solver = solver.replace(retain_k=b.k)
            tracker = MemoryTracker()
            step_pair(net, pair, solver, b, tracker=tracker)
            rows.append({"backend": str(backend), "inner_iters": iters, "peak_bytes": tracker.peak})
    return rows


def unregistered_dice(pairs):
    return [hard_dice(p.fixed_label, p.moving_label) for p in pairs]
