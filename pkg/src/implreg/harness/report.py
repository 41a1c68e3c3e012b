"""CSV reports with fixed headers and PGM snapshots."""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from ..grid import _data
from ..io import write_pgm


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value)) if math.isfinite(value) else "nan"
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_csv(path, fields, rows):
    """Write ``rows`` (dicts or sequences) under the fixed header ``fields``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            if isinstance(row, dict):
                row = [row[f] for f in fields]
            writer.writerow([_cell(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def snapshot(directory, name, image, channel=0):
    """One PGM per call; multichannel arrays export a single channel."""
    os.makedirs(directory, exist_ok=True)
    arr = _data(image)[..., channel]
    path = os.path.join(directory, f"{name}.pgm")
    write_pgm(path, arr)
    return path


def summary_rows(rows, key, group="overlap"):
    """Mean of ``key`` per value of ``group`` plus an ``all`` row."""
    out = []
    vals = [r[key] for r in rows]
    out.append({"subset": "all", "metric": key, "value": float(np.nanmean(vals)) if vals else float("nan")})
    for flag in sorted({r[group] for r in rows}):
        sel = [r[key] for r in rows if r[group] == flag]
        out.append({"subset": f"{group}={flag}", "metric": key, "value": float(np.nanmean(sel))})
    return out


SUMMARY_FIELDS = ("subset", "metric", "value")
