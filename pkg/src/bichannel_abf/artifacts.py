"""CSV writers and readers for run artifacts (full-precision, byte-stable)."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fokker_planck import BiasProfile, DensityField
from .grid import Grid


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    if v is None:
        return ""
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def write_columns(path, header: Sequence[str], *cols) -> Path:
    return write_csv(path, header, zip(*cols))


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def read_table(path) -> dict:
    """Numeric columns of a CSV as float arrays keyed by header name."""
    rows = read_csv(path)
    if not rows:
        return {}
    out = {}
    for k in rows[0]:
        try:
            out[k] = np.array([float(r[k]) for r in rows])
        except ValueError:
            out[k] = [r[k] for r in rows]
    return out


def write_density(path, field_: DensityField) -> Path:
    g = field_.grid
    i, jx, jy = np.meshgrid(np.arange(2), np.arange(g.n_x), np.arange(g.n_y), indexing="ij")
    return write_columns(path, ("i", "x", "y", "psi"), i.ravel(), g.x[jx.ravel()], g.y[jy.ravel()], field_.psi.ravel())


def read_density(path) -> DensityField:
    t = read_table(path)
    xs = np.unique(t["x"])
    ys = np.unique(t["y"])
    n_x, n_y = xs.size, ys.size
    dy = (ys[-1] - ys[0]) / (n_y - 1)
    L = float(ys[-1] + 0.5 * dy)
    g = Grid(n_x, n_y, round(L, 12))
    psi = np.asarray(t["psi"]).reshape(2, n_x, n_y)
    return DensityField(psi, g)


def write_bias(path, bias: BiasProfile) -> Path:
    cols = [bias.x, bias.force, bias.energy, bias.raw_force]
    return write_columns(path, ("x", "force", "energy", "raw_force"), *cols)


def write_marginal(path, x, m) -> Path:
    return write_columns(path, ("x", "psi_xi"), x, m)
