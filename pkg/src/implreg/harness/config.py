"""Line-oriented ``key = value`` config files with ``[section]`` headers.

Recognised sections: ``toy``, ``net``, ``train``, ``solver``, ``eval``
(solver overrides applied at evaluation time), ``sweep``, ``probe`` and
``check`` and ``ablate``.  Values are Python literals where they parse as such (numbers,
quoted strings, comma-separated tuples); anything else is a bare string.
"""

from __future__ import annotations

import ast
import configparser
from dataclasses import fields, replace

from ..objectives import RegularizerKind
from ..solver import ConfigError, SolverConfig
from .toy import ToyConfig
from .training import TrainConfig

SECTIONS = ("toy", "net", "train", "solver", "eval", "sweep", "probe", "check", "ablate")

TOY_KEYS = {"canvas", "square", "overlap_prob", "seed", "count"}
NET_KEYS = {"arch", "channels", "widths", "out_levels"}
TRAIN_KEYS = {
    "epochs", "pairs_per_epoch", "outer_loss", "backend", "lr", "weight_decay",
    "val_pairs", "max_skip_frac",
}
SOLVER_KEYS = {f.name for f in fields(SolverConfig)} | {"reg_family", "reg_weight", "reg_alpha", "reg_beta"}


def _value(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path=None, text=None):
    """Parse a config file into ``{section: {key: value}}``."""
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None, delimiters=("=",)
    )
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path) as fh:
                parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        out[section] = {k: _value(v) for k, v in parser.items(section)}
    return out


def _check_keys(values, allowed, section):
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")


def _tuple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,)


def solver_config(values, base=None):
    values = dict(values)
    _check_keys(values, SOLVER_KEYS, "solver")
    base = base or SolverConfig()
    fam = values.pop("reg_family", None)
    reg_kw = {k[4:]: values.pop(k) for k in ("reg_weight", "reg_alpha", "reg_beta") if k in values}
    for key in ("scales", "iters", "betas"):
        if key in values:
            values[key] = _tuple(values[key])
    try:
        if fam is not None:
            values["regularizer"] = RegularizerKind(str(fam), **reg_kw)
        return base.replace(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def toy_config(values, base=None):
    _check_keys(values, TOY_KEYS, "toy")
    try:
        return replace(base or ToyConfig(), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg, seed=None, base=None):
    """Build a :class:`TrainConfig` from parsed sections."""
    base = base or TrainConfig()
    kw = {}
    train = dict(cfg.get("train", {}))
    _check_keys(train, TRAIN_KEYS, "train")
    kw.update(train)
    net = dict(cfg.get("net", {}))
    _check_keys(net, NET_KEYS, "net")
    if "widths" in net:
        net["widths"] = _tuple(net["widths"])
    kw.update(net)
    if "backend" in kw:
        kw["backend"] = str(kw["backend"])
    if "solver" in cfg:
        kw["solver"] = solver_config(cfg["solver"], base.solver)
    if "toy" in cfg:
        kw["toy"] = toy_config(cfg["toy"], base.toy)
    if seed is not None:
        kw["seed"] = int(seed)
    try:
        return base.replace(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
