"""Command-line entry point: ``implreg <subcommand> [--config F] [--seed N] [--out D] [--threads N]``."""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .checks import run_checks
from .grid import _data, downsample, warp_image
from .harness.config import read_config, solver_config, train_config
from .harness.experiments import (
    ABLATION_FIELDS,
    BASELINE_FIELDS,
    MEMORY_FIELDS,
    PROBE_FIELDS,
    SPECTRUM_FIELDS,
    SWEEP_FIELDS,
    ablate_backends,
    implicit_bias_probe,
    intensity_baseline,
    memory_scaling,
    spectrum,
    sweep_regularizer,
)
from .harness.report import SUMMARY_FIELDS, snapshot, summary_rows, write_csv
from .harness.toy import ToyConfig, toy_pairs
from .harness.training import (
    EVAL_FIELDS,
    TrainingAborted,
    evaluate,
    evaluate_pair,
    train,
    validation_set,
)
from .net import load_checkpoint
from .objectives import RegularizerKind
from .solver import ConfigError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


def _threads(n):
    # kernels are serial; threads only fan out independent evaluation pairs
    if n is None:
        return 1
    if n < 1:
        raise ConfigError("--threads must be positive")
    return n


def _say(msg):
    print(msg, flush=True)


def _section(cfg, name):
    return dict(cfg.get(name, {}))


def _eval_pairs(net_meta, cfg, seed):
    toy = ToyConfig(
        canvas=int(net_meta.get("canvas", 128)),
        square=int(net_meta.get("square", 32)),
        overlap_prob=float(net_meta.get("overlap_prob", 0.5)),
    )
    if "toy" in cfg:
        toy = replace(toy, **{k: v for k, v in cfg["toy"].items() if k not in ("seed", "count")})
    count = int(cfg.get("train", {}).get("val_pairs", 256))
    if "count" in cfg.get("eval", {}):
        count = int(cfg["eval"]["count"])
    return validation_set(seed, count, toy)


def _eval_solver(cfg, base):
    values = {k: v for k, v in _section(cfg, "eval").items() if k != "count"}
    return solver_config(values, base)


def _load(args):
    if not args.checkpoint:
        raise ConfigError("this subcommand needs --checkpoint")
    try:
        return load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot open checkpoint: {exc}") from None


def _seed_for(args, meta, tcfg):
    if args.seed is not None:
        return args.seed
    return int(meta.get("train_seed", tcfg.seed))


def _parallel_eval(net, pairs, solver, threads):
    if threads <= 1:
        return evaluate(net, pairs, solver)
    with ThreadPoolExecutor(threads) as pool:
        chunks = [pairs[i::threads] for i in range(threads)]
        parts = list(pool.map(lambda c: evaluate(net, c, solver), chunks))
    rows = [None] * len(pairs)
    for t, part in enumerate(parts):
        for j, row in enumerate(part):
            idx = t + j * threads
            row["pair"] = idx
            rows[idx] = row
    return rows


# -- subcommands ----------------------------------------------------------------


def cmd_toy_gen(args, cfg):
    toy = replace(ToyConfig(), **_section(cfg, "toy"))
    if args.seed is not None:
        toy = replace(toy, seed=args.seed)
    pairs = toy_pairs(toy)
    rows = []
    for i, p in enumerate(pairs):
        (fr, fc), (mr, mc) = p.corners
        rows.append({
            "pair": i, "overlap": int(p.overlap), "fixed_row": fr, "fixed_col": fc,
            "moving_row": mr, "moving_col": mc,
            "fixed_ones": int(p.fixed.sum()), "moving_ones": int(p.moving.sum()),
        })
        if i < args.snapshots:
            snapshot(os.path.join(args.out, "snapshots"), f"pair{i:03d}_fixed", p.fixed)
            snapshot(os.path.join(args.out, "snapshots"), f"pair{i:03d}_moving", p.moving)
    fields = ("pair", "overlap", "fixed_row", "fixed_col", "moving_row", "moving_col", "fixed_ones", "moving_ones")
    write_csv(os.path.join(args.out, "toy.csv"), fields, rows)
    freq = np.mean([r["overlap"] for r in rows]) if rows else float("nan")
    _say(f"wrote {len(rows)} pairs; overlap frequency {freq:.4f}")
    return EXIT_OK


def _feature_snapshots(net, pair, solver, directory):
    pyr_f, pyr_m = net.features(pair.fixed), net.features(pair.moving)
    row = evaluate_pair(net, pair, solver)
    snapshot(directory, "fixed", pair.fixed)
    snapshot(directory, "moving", pair.moving)
    snapshot(directory, "warped_moving", _data(warp_image(pair.moving, row["result"].final_warp)))
    for f, lf, lm in zip(pyr_f.factors, pyr_f.levels, pyr_m.levels):
        snapshot(directory, f"features_fixed_x{f}", lf)
        snapshot(directory, f"features_moving_x{f}", lm)


def cmd_train(args, cfg):
    tcfg = train_config(cfg, seed=args.seed)
    ck = os.path.join(args.out, "checkpoint")
    t0 = time.time()
    net, curve = train(tcfg, out_dir=ck, log=_say)
    write_csv(os.path.join(args.out, "train_curve.csv"), ("epoch", "loss", "skipped", "collapsed"), curve)
    val = validation_set(tcfg)
    rows = _parallel_eval(net, val, tcfg.solver, args.threads)
    write_csv(os.path.join(args.out, "validation.csv"), EVAL_FIELDS, rows)
    summary = summary_rows(rows, "dice") + summary_rows(rows, "neg_jac_fraction")
    write_csv(os.path.join(args.out, "summary.csv"), SUMMARY_FIELDS, summary)
    if val:
        _feature_snapshots(net, val[0], tcfg.solver, os.path.join(args.out, "snapshots"))
    for s in summary_rows(rows, "dice"):
        _say(f"validation dice [{s['subset']}] = {s['value']:.4f}")
    _say(f"checkpoint written to {ck} in {time.time() - t0:.0f}s")
    return EXIT_OK


def cmd_eval(args, cfg):
    tcfg = train_config(cfg)
    solver = _eval_solver(cfg, tcfg.solver)
    if not args.checkpoint:
        # no network: the intensity-only baseline on the configured toy task
        meta = {"canvas": tcfg.toy.canvas, "square": tcfg.toy.square, "overlap_prob": tcfg.toy.overlap_prob}
        pairs = _eval_pairs(meta, cfg, _seed_for(args, {}, tcfg))
        rows = intensity_baseline(pairs, solver)
        write_csv(os.path.join(args.out, "baseline.csv"), BASELINE_FIELDS, rows)
        grads = [r["grad_norm"] for r in rows if not r["overlap"]]
        if grads:
            _say(f"zero-overlap pairs: max initial gradient norm {max(grads):.3e}")
    else:
        net, meta = _load(args)
        pairs = _eval_pairs(meta, cfg, _seed_for(args, meta, tcfg))
        rows = _parallel_eval(net, pairs, solver, args.threads)
        write_csv(os.path.join(args.out, "eval.csv"), EVAL_FIELDS, rows)
    summary = summary_rows(rows, "dice") + summary_rows(rows, "neg_jac_fraction")
    write_csv(os.path.join(args.out, "summary.csv"), SUMMARY_FIELDS, summary)
    for s in summary:
        _say(f"{s['metric']} [{s['subset']}] = {s['value']:.4f}")
    return EXIT_OK


def cmd_sweep_reg(args, cfg):
    net, meta = _load(args)
    tcfg = train_config(cfg)
    solver = _eval_solver(cfg, tcfg.solver)
    sweep = _section(cfg, "sweep")
    families = sweep.get("families", RegularizerKind.TAGS)
    families = (families,) if isinstance(families, str) else tuple(families)
    lambdas = sweep.get("lambdas", (0.0, 0.1, 0.5, 0.9, 1.0))
    lambdas = tuple(float(l) for l in (lambdas if isinstance(lambdas, (tuple, list)) else (lambdas,)))
    pairs = _eval_pairs(meta, {**cfg, "eval": {"count": int(sweep.get("count", 16))}}, _seed_for(args, meta, tcfg))
    try:
        rows = sweep_regularizer(net, pairs, solver, families, lambdas,
                                 float(sweep.get("alpha", 1.0)), float(sweep.get("beta", 1.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_csv(os.path.join(args.out, "sweep.csv"), SWEEP_FIELDS, rows)
    for fam in families:
        for lam in lambdas:
            sel = [r for r in rows if r["family"] == fam and r["lambda"] == lam]
            if sel:
                _say(f"{fam} lambda={lam:g}: reg {np.mean([r['reg_value'] for r in sel]):.4g} "
                     f"dice {np.mean([r['dice'] for r in sel]):.4f}")
    return EXIT_OK


def _probe_inputs(args, cfg, probe):
    toy = replace(ToyConfig(), **_section(cfg, "toy"))
    seed = args.seed if args.seed is not None else toy.seed
    pairs = toy_pairs(replace(toy, seed=seed, count=int(probe.get("pairs", 1))))
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
        return [(net.features(p.fixed), net.features(p.moving)) for p in pairs]
    sigma = float(probe.get("smooth", 4.0))
    out = []
    for p in pairs:
        blur = [gaussian_filter(im[..., 0], sigma)[..., None] for im in (p.fixed, p.moving)]
        out.append(tuple(blur))
    return out


def cmd_implicit_bias(args, cfg):
    probe = _section(cfg, "probe")
    solver = solver_config(_section(cfg, "solver"))
    rows = []
    flagged = 0
    for i, (ff, fm) in enumerate(_probe_inputs(args, cfg, probe)):
        if not hasattr(ff, "levels"):
            ff = [_data(downsample(ff, s)) for s in solver.scales]
            fm = [_data(downsample(fm, s)) for s in solver.scales]
        part, _ = implicit_bias_probe(ff, fm, solver, channel=int(probe.get("channel", 0)))
        for r in part:
            r["pair"] = i
        flagged += sum(r["degenerate"] for r in part)
        rows.extend(part)
    write_csv(os.path.join(args.out, "implicit_bias.csv"), ("pair",) + PROBE_FIELDS, rows)
    cos = np.array([r["cos_mean"] for r in rows], dtype=float)
    _say(f"{len(rows)} iterations; min mean |cos| {np.nanmin(cos) if cos.size else float('nan'):.9f}; "
         f"degenerate rows {flagged}")
    return EXIT_OK


def cmd_ablate(args, cfg):
    tcfg = train_config(cfg, seed=args.seed)
    ab = _section(cfg, "ablate")
    backends = ab.get("backends", ("hessian", "jfb", "phantom:3"))
    backends = (backends,) if isinstance(backends, str) else tuple(str(b) for b in backends)
    rows, _ = ablate_backends(tcfg, backends, log=_say)
    write_csv(os.path.join(args.out, "ablation.csv"), ABLATION_FIELDS, rows)
    iters = ab.get("memory_iters", (10, 20, 40))
    pair = validation_set(tcfg.seed, 1, tcfg.toy)[0]
    mem = memory_scaling(tcfg, backends, tuple(int(i) for i in iters), pair)
    write_csv(os.path.join(args.out, "memory.csv"), MEMORY_FIELDS, mem)
    for backend in backends:
        losses = [r["loss"] for r in rows if r["backend"] == backend]
        _say(f"{backend}: final loss {losses[-1] if losses else float('nan'):.5f}")
    if not all(np.isfinite(r["loss"]) for r in rows):
        return EXIT_CHECK
    return EXIT_OK


def cmd_check_grad(args, cfg):
    check = _section(cfg, "check")
    sizes = check.get("sizes", (4, 6, 8))
    seeds = check.get("seeds", (0, 1))
    sizes = tuple(int(s) for s in (sizes if isinstance(sizes, (tuple, list)) else (sizes,)))
    seeds = tuple(int(s) for s in (seeds if isinstance(seeds, (tuple, list)) else (seeds,)))
    if args.seed is not None:
        seeds = (args.seed,)
    if any(s > 8 or s < 3 for s in sizes):
        raise ConfigError("check sizes must lie in 3..8")
    corrupt = set(args.corrupt.split(",")) if args.corrupt else set()
    t0 = time.time()
    rows = run_checks(sizes, seeds, corrupt=corrupt)
    fields = ("check", "size", "seed", "err", "tol", "passed")
    write_csv(os.path.join(args.out, "check_grad.csv"), fields, [r.__dict__ for r in rows])
    for r in rows:
        _say(f"{'PASS' if r.passed else 'FAIL'} {r.check} size={r.size} seed={r.seed} err={r.err:.3e} tol={r.tol:g}")
    failed = [r for r in rows if not r.passed]
    _say(f"{len(rows) - len(failed)}/{len(rows)} checks passed in {time.time() - t0:.1f}s")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_spectrum(args, cfg):
    tcfg = train_config(cfg)
    solver = _eval_solver(cfg, tcfg.solver)
    seed = args.seed if args.seed is not None else tcfg.seed
    if args.checkpoint:
        net, meta = _load(args)
        pair = _eval_pairs(meta, {**cfg, "eval": {"count": 1}}, seed)[0]
        ff, fm = net.features(pair.fixed), net.features(pair.moving)
    else:
        pair = validation_set(seed, 1, tcfg.toy)[0]
        ff = [_data(downsample(pair.fixed, s)) for s in solver.scales]
        fm = [_data(downsample(pair.moving, s)) for s in solver.scales]
    rows = spectrum(ff, fm, solver)
    write_csv(os.path.join(args.out, "spectrum.csv"), SPECTRUM_FIELDS, rows)
    eig = np.array([r["eigenvalue"] for r in rows])
    _say(f"{eig.size} eigenvalues; max {eig.max():.4g} min {eig.min():.4g}")
    return EXIT_OK


COMMANDS = {
    "toy-gen": cmd_toy_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-reg": cmd_sweep_reg,
    "implicit-bias": cmd_implicit_bias,
    "ablate-backend": cmd_ablate,
    "check-grad": cmd_check_grad,
    "spectrum": cmd_spectrum,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="implreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="line-oriented key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1)
        if name in ("eval", "sweep-reg", "implicit-bias", "spectrum"):
            p.add_argument("--checkpoint", help="checkpoint directory written by train"
                           + ("; omitted, eval runs the intensity-only baseline" if name == "eval" else ""))
        if name == "toy-gen":
            p.add_argument("--snapshots", type=int, default=4, help="pairs exported as PGM")
        if name == "check-grad":
            p.add_argument("--corrupt", default="", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = read_config(args.config) if args.config else {}
        args.threads = _threads(args.threads)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
