"""Entropies, Fisher information, distances and decay-rate fits on density snapshots."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fokker_planck import BiasProfile, DensityField

EMPTY_TOL = 1e-30


class AbsoluteContinuityError(ValueError):
    pass


def _xlogy_ratio(p, q):
    """p ln(p/q) with 0 ln 0 = 0; raises where p > 0 and q = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    occupied = p > EMPTY_TOL
    if np.any(occupied & ~(q > 0)):
        raise AbsoluteContinuityError("not absolutely continuous: p > 0 where q = 0")
    out = np.zeros(np.broadcast(p, q).shape)
    pp = np.broadcast_to(p, out.shape)
    qq = np.broadcast_to(q, out.shape)
    m = np.broadcast_to(occupied, out.shape)
    out[m] = pp[m] * np.log(pp[m] / qq[m])
    return out


def _kl_terms(p, q):
    """p ln(p/q) - p + q: pointwise nonnegative, sums to the entropy when masses agree."""
    return _xlogy_ratio(p, q) - np.asarray(p, dtype=float) + np.asarray(q, dtype=float)


def relative_entropy(p, q, weights=1.0) -> float:
    """sum p ln(p/q) * weights for discrete densities p, q."""
    return float(np.sum(_xlogy_ratio(p, q) * weights))


def _derivative(f, spacing, axis, periodic):
    if periodic:
        return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * spacing)
    return np.gradient(f, spacing, axis=axis, edge_order=1)


def fisher_information(p, q, spacing: float, axis: int = -1, periodic: bool = True, weights=None) -> float:
    """sum |d ln(p/q)|^2 p along ``axis``; ``weights`` defaults to the cell measure ``spacing``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(p <= 0) or np.any(q <= 0):
        raise ValueError("Fisher information needs strictly positive densities on the differencing support")
    g = _derivative(np.log(p) - np.log(q), spacing, axis, periodic)
    w = spacing if weights is None else weights
    return float(np.sum(g * g * p * w))


def wasserstein_1d(p, q, support) -> float:
    """W1 on the line via the integral of |F_p - F_q| for densities on a common uniform grid."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    x = np.asarray(support, dtype=float)
    if p.shape != q.shape or p.shape != x.shape:
        raise ValueError("p, q and support must share one grid")
    dx = float(x[1] - x[0]) if x.size > 1 else 1.0
    Fp = np.cumsum(p) / p.sum()
    Fq = np.cumsum(q) / q.sum()
    return float(np.abs(Fp - Fq).sum() * dx)


# --------------------------------------------------------------------------- #
# Entropy report
# --------------------------------------------------------------------------- #


@dataclass
class EntropyReport:
    t: float
    E: float
    E_M: float
    E_m: float
    E_c: float
    P: float
    F_macro: float
    bias_error: float
    e_m: np.ndarray = field(repr=False)
    e_c: np.ndarray = field(repr=False)
    e_cl: np.ndarray = field(repr=False)  # (2, n_x)
    empty_channels: np.ndarray = field(repr=False)  # (2, n_x) bool, channel marginal is zero

    COLUMNS = ("t", "E", "E_M", "E_m", "E_c", "P", "F_macro", "bias_error")

    def as_row(self) -> tuple:
        return tuple(float(getattr(self, k)) for k in self.COLUMNS)

    @property
    def decomposition_residual(self) -> float:
        return abs(self.E - self.E_M - self.E_m)


def entropy_report(
    field_: DensityField,
    field_inf: DensityField,
    bias: Optional[BiasProfile],
    reference_force,
    t: float = 0.0,
) -> EntropyReport:
    """All entropies of a snapshot relative to the stationary state, on the solver's cell measure."""
    g = field_.grid
    psi, psi_inf = field_.psi, field_inf.psi
    dx, dy = g.dx, g.dy
    xi_i = psi.sum(axis=2) * dy
    xi_i_inf = psi_inf.sum(axis=2) * dy
    m = xi_i.sum(axis=0)
    m_inf = xi_i_inf.sum(axis=0)
    if np.any(m <= 0):
        raise AbsoluteContinuityError("x-marginal vanishes somewhere; conditionals are undefined")

    E = float(np.sum(_kl_terms(psi, psi_inf)) * g.cell_area)
    E_M = float(np.sum(_kl_terms(m, m_inf)) * dx)

    # conditionals in (y, i) given x, renormalised per x-slice
    cond = psi / m[None, :, None]
    cond_inf = psi_inf / m_inf[None, :, None]
    e_m = (_kl_terms(cond, cond_inf) * dy).sum(axis=(0, 2))
    E_m = float(np.sum(e_m * m) * dx)

    # per-channel conditionals in y given (x, i)
    empty = ~(xi_i > EMPTY_TOL)
    safe = np.where(empty, 1.0, xi_i)
    e_cl = (_kl_terms(psi / safe[:, :, None], psi_inf / xi_i_inf[:, :, None]) * dy).sum(axis=2)
    e_cl[empty] = 0.0

    # Bernoulli channel weights
    w = xi_i / m[None, :]
    w_inf = xi_i_inf / m_inf[None, :]
    e_c = _kl_terms(w, w_inf).sum(axis=0)
    E_c = float(np.sum(e_c * m) * dx)

    P = float(np.sum((xi_i / xi_i_inf - 1.0) ** 2 * xi_i_inf) * dx)
    F_macro = fisher_information(m, m_inf, dx)
    if bias is None:
        bias_error = 0.0
    else:
        diff = np.asarray(bias.raw_force) - np.asarray(reference_force)
        bias_error = float(np.sum(diff * diff * m) * dx)
    return EntropyReport(t, E, E_M, E_m, E_c, P, F_macro, bias_error, e_m, e_c, e_cl, empty)


@dataclass
class BoundCheck:
    holds: bool
    margin: float
    bound: float


def bias_error_bound_check(report: EntropyReport, R: float, tol: float = 1e-12) -> BoundCheck:
    """Compare the weighted bias error with 2 R^2 E_m."""
    bound = 2.0 * R * R * report.E_m
    margin = bound - report.bias_error
    return BoundCheck(bool(report.bias_error <= bound + tol), float(margin), float(bound))


# --------------------------------------------------------------------------- #
# Rate fits
# --------------------------------------------------------------------------- #


@dataclass
class RateEstimate:
    rate: float
    t_start: float
    t_end: float
    r2: float
    n_samples: int
    local_times: np.ndarray = field(repr=False)
    local_rates: np.ndarray = field(repr=False)


def _linfit(t, v):
    lv = np.log(v)
    A = np.vstack([t, np.ones_like(t)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, lv, rcond=None)
    fit = slope * t + icpt
    ss_res = float(np.sum((lv - fit) ** 2))
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def fit_decay_rate(
    times: Sequence[float],
    values: Sequence[float],
    window=0.5,
    floor: float = 1e-12,
    min_samples: int = 10,
    local_width: int = 10,
) -> RateEstimate:
    """Least-squares rate of ln(value) versus t.

    ``window`` is either the trailing fraction of samples above ``floor`` to
    keep, or an explicit (t_start, t_end) interval.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if isinstance(window, (tuple, list)):
        sel = (t >= window[0]) & (t <= window[1])
        if np.any(v[sel] <= 0):
            raise ValueError("nonpositive values inside the fit window")
        idx = np.flatnonzero(sel)
    else:
        above = np.flatnonzero(v > floor)
        n_keep = int(math.ceil(window * above.size))
        idx = above[above.size - n_keep:]
    if idx.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples in the fit window, got {idx.size}")
    tw, vw = t[idx], v[idx]
    slope, r2 = _linfit(tw, vw)
    lt, lr = [], []
    for s in range(0, tw.size - local_width + 1):
        sl, _ = _linfit(tw[s:s + local_width], vw[s:s + local_width])
        lt.append(tw[s:s + local_width].mean())
        lr.append(-sl)
    return RateEstimate(-slope, float(tw[0]), float(tw[-1]), r2, int(idx.size), np.array(lt), np.array(lr))


def fourier_amplitude(m, k: int = 1) -> float:
    """|c_k| of a periodic sample, normalised so that 1 + a cos(2 pi k x) gives a/2."""
    m = np.asarray(m, dtype=float)
    return float(np.abs(np.fft.rfft(m)[k]) / m.size)
