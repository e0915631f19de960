"""Particle simulation of the bi-channel ABF dynamics.

Walkers follow Euler-Maruyama in (x, y) with the biased drift
-grad V_i + A'_t(x) e_x, x wrapped on the torus and y reflected at +-L; the
channel index switches with probability 1 - exp(-lambda dt) per step outside
the no-exchange region. The bias is the running-average ABF estimator on
x-bins.

Random numbers come from fixed-size walker blocks, each with its own Philox
stream spawned from the master seed, so results do not depend on how the
blocks are scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fokker_planck import BiasProfile, DensityField
from .grid import Grid
from .model import BiChannelSystem

BLOCK_SIZE = 8192


class SDEError(RuntimeError):
    pass


@dataclass
class Ensemble:
    x: np.ndarray
    y: np.ndarray
    i: np.ndarray
    L: float
    rngs: list = field(repr=False)
    block_size: int = BLOCK_SIZE
    t: float = 0.0
    n_steps: int = 0
    switch_count: Optional[np.ndarray] = None
    switch_log: Optional[list] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.x.size

    def blocks(self):
        for b, rng in enumerate(self.rngs):
            yield rng, slice(b * self.block_size, min((b + 1) * self.block_size, self.size))


def block_generators(seed: int, n_walkers: int, block_size: int = BLOCK_SIZE) -> list:
    n_blocks = -(-n_walkers // block_size)
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n_blocks)]


def make_ensemble(x, y, i, L: float, seed: int, block_size: int = BLOCK_SIZE, log_switches: bool = False) -> Ensemble:
    x = np.mod(np.asarray(x, dtype=float), 1.0)
    y = np.asarray(y, dtype=float).copy()
    i = np.asarray(i, dtype=np.int8).copy()
    if not (x.shape == y.shape == i.shape) or x.size < 1:
        raise ValueError("walker arrays must be nonempty and of equal length")
    if np.any(np.abs(y) > L):
        raise ValueError("initial walkers must satisfy |y| <= L")
    rngs = block_generators(seed, x.size, block_size)
    ens = Ensemble(x, y, i, float(L), rngs, block_size)
    ens.switch_count = np.zeros(x.size, dtype=np.int64)
    if log_switches:
        ens.switch_log = []
    return ens


def sample_density(field_: DensityField, n: int, seed: int, block_size: int = BLOCK_SIZE) -> Ensemble:
    """Draw walkers from a grid density: a cell by its mass, then uniformly inside the cell."""
    g = field_.grid
    p = field_.psi.ravel() * g.cell_area
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.Generator(np.random.Philox(ss[0]))
    u = rng.random((3, n))
    cell = np.minimum(np.searchsorted(cdf, u[0], side="right"), p.size - 1)
    ci, cx, cy = np.unravel_index(cell, field_.psi.shape)
    x = (cx + u[1]) * g.dx
    y = -g.L + (cy + u[2]) * g.dy
    return make_ensemble(x, y, ci, g.L, int(ss[1].generate_state(1, np.uint64)[0]), block_size)


def _channel_eval(system: BiChannelSystem, name: str, i, x, y):
    out = np.empty(x.shape)
    for c in (0, 1):
        m = i == c
        if m.any():
            out[m] = getattr(system.channels[c], name)(x[m], y[m])
    return out


def _channel_gradient(system: BiChannelSystem, i, x, y):
    gx = np.empty(x.shape)
    gy = np.empty(x.shape)
    for c in (0, 1):
        m = i == c
        if m.any():
            gx[m], gy[m] = system.channels[c].gradient(x[m], y[m])
    return gx, gy


def _reflect(y, L):
    # fold onto [-L, L] with period 4L
    z = np.mod(y + L, 4.0 * L)
    return np.where(z > 2.0 * L, 4.0 * L - z, z) - L


def bias_at(bias: Optional[BiasProfile], x) -> np.ndarray:
    """Piecewise-constant lookup of the applied force on the bias bins."""
    if bias is None:
        return np.zeros(x.shape)
    nb = bias.force.size
    b = np.minimum((x * nb).astype(np.int64), nb - 1)
    return bias.force[b]


def step_ensemble(ens: Ensemble, bias: Optional[BiasProfile], system: BiChannelSystem, dt: float) -> Ensemble:
    """Advance every walker by one Euler-Maruyama step followed by the channel jump."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x, y, i = ens.x, ens.y, ens.i
    gx, gy = _channel_gradient(system, i, x, y)
    fx = bias_at(bias, x) - gx
    fy = -gy
    noise = np.empty((2, ens.size))
    u = np.empty(ens.size)
    for rng, sl in ens.blocks():
        noise[:, sl] = rng.standard_normal((2, sl.stop - sl.start))
        u[sl] = rng.random(sl.stop - sl.start)
    s = math.sqrt(2.0 * dt)
    xn = x + fx * dt + s * noise[0]
    yn = y + fy * dt + s * noise[1]
    bad = ~(np.isfinite(xn) & np.isfinite(yn))
    if bad.any():
        w = int(np.flatnonzero(bad)[0])
        raise SDEError(f"walker {w} left the finite range at t={ens.t:.6g}: (x, y, i)=({x[w]:.6g}, {y[w]:.6g}, {i[w]})")
    xn = np.mod(xn, 1.0)
    xn[xn >= 1.0] = 0.0
    yn = _reflect(yn, ens.L)
    p = -np.expm1(-system.jump_rate(xn) * dt)
    switch = u < p
    ens.x, ens.y = xn, yn
    ens.i = np.where(switch, 1 - i, i).astype(np.int8)
    ens.t += dt
    ens.n_steps += 1
    ens.switch_count += switch
    if ens.switch_log is not None and switch.any():
        idx = np.flatnonzero(switch)
        ens.switch_log.append((ens.n_steps, idx, xn[idx].copy()))
    return ens


# --------------------------------------------------------------------------- #
# Adaptive bias estimator
# --------------------------------------------------------------------------- #


@dataclass
class BinStats:
    counts: np.ndarray
    sums: np.ndarray
    n_min: int = 10
    n_ramp: int = 100

    @classmethod
    def empty(cls, n_bins: int = 64, n_min: int = 10, n_ramp: int = 100) -> "BinStats":
        return cls(np.zeros(n_bins, dtype=np.int64), np.zeros(n_bins), n_min, n_ramp)

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) / self.n_bins

    @property
    def visited(self) -> np.ndarray:
        return self.counts >= self.n_min

    def estimate(self) -> np.ndarray:
        """Sum f / n_b on sufficiently visited bins, 0 elsewhere."""
        out = np.zeros(self.n_bins)
        v = self.visited
        out[v] = self.sums[v] / self.counts[v]
        return out

    def bias(self, project: bool = True) -> BiasProfile:
        est = self.estimate()
        v = self.visited
        applied = est * np.minimum(1.0, self.counts / max(self.n_ramp, 1))
        if project and v.any():
            applied[v] -= applied[v].mean()
        applied[~v] = 0.0
        prof = BiasProfile.from_force(self.centers, applied, project=False, sampled=v)
        prof.raw_force = est
        return prof

    def copy(self) -> "BinStats":
        return BinStats(self.counts.copy(), self.sums.copy(), self.n_min, self.n_ramp)


def update_bias(stats: BinStats, ens: Ensemble, system: BiChannelSystem):
    """Accumulate d_x V_i at every walker into its x-bin and return the new applied bias."""
    f = _channel_eval(system, "dx", ens.i, ens.x, ens.y)
    b = np.minimum((ens.x * stats.n_bins).astype(np.int64), stats.n_bins - 1)
    stats.counts += np.bincount(b, minlength=stats.n_bins)
    stats.sums += np.bincount(b, weights=f, minlength=stats.n_bins)
    return stats, stats.bias()


# --------------------------------------------------------------------------- #
# Driver
# --------------------------------------------------------------------------- #


@dataclass
class SDEParams:
    N: int = 100_000
    dt: float = 1e-3
    t_end: float = 1.0
    n_bins: int = 64
    n_min: int = 10
    n_ramp: int = 100
    seed: int = 0
    block_size: int = BLOCK_SIZE
    adaptive_bias: bool = True

    def __post_init__(self):
        for k in ("N", "dt", "t_end", "n_bins", "block_size"):
            if not getattr(self, k) > 0:
                raise ValueError(f"SDE parameter {k} must be positive")
        if self.n_min < 0 or self.n_ramp < 0:
            raise ValueError("n_min and n_ramp must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class SDERun:
    times: list = field(default_factory=list)
    stats: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    ensemble: Optional[Ensemble] = None


def histogram(ens: Ensemble, grid: Grid) -> DensityField:
    """Walker density on (channel, x-cell, y-cell) of ``grid``, normalised to unit mass."""
    jx = np.minimum((ens.x / grid.dx).astype(np.int64), grid.n_x - 1)
    jy = np.clip(((ens.y + grid.L) / grid.dy).astype(np.int64), 0, grid.n_y - 1)
    flat = (ens.i.astype(np.int64) * grid.n_x + jx) * grid.n_y + jy
    counts = np.bincount(flat, minlength=2 * grid.n_x * grid.n_y).reshape(2, grid.n_x, grid.n_y)
    return DensityField(counts / (ens.size * grid.cell_area), grid)


def run_sde(
    system: BiChannelSystem,
    params: SDEParams,
    initial: Ensemble,
    record_every: int = 100,
    hist_grid: Optional[Grid] = None,
) -> SDERun:
    """Integrate the ensemble to ``t_end``, updating the bias estimator after every step."""
    ens = initial
    stats = BinStats.empty(params.n_bins, params.n_min, params.n_ramp)
    bias = stats.bias() if params.adaptive_bias else None
    n_steps = max(1, int(round(params.t_end / params.dt)))
    out = SDERun()

    def record():
        out.times.append(ens.t)
        out.stats.append(stats.copy())
        out.biases.append(bias if bias is not None else BiasProfile.zero(Grid(params.n_bins, 8, 1.0)))
        if hist_grid is not None:
            out.histograms.append(histogram(ens, hist_grid))

    record()
    for n in range(1, n_steps + 1):
        step_ensemble(ens, bias, system, params.dt)
        if params.adaptive_bias:
            stats, bias = update_bias(stats, ens, system)
        if n % record_every == 0 or n == n_steps:
            record()
    out.ensemble = ens
    return out


def interswitch_times(ens: Ensemble, dt: float, per_walker: int) -> np.ndarray:
    """First ``per_walker`` gaps between consecutive switches of each walker (time 0 counts as a start).

    Requires a switch log; walkers with fewer switches raise.
    """
    if ens.switch_log is None:
        raise ValueError("ensemble was created without a switch log")
    if ens.switch_count.min() < per_walker:
        raise ValueError(f"some walkers switched fewer than {per_walker} times")
    steps = [[] for _ in range(ens.size)]
    for n, idx, _ in ens.switch_log:
        for w in idx:
            if len(steps[w]) < per_walker:
                steps[w].append(n)
    arr = np.asarray(steps, dtype=float)
    gaps = np.diff(np.concatenate([np.zeros((ens.size, 1)), arr], axis=1), axis=1)
    return gaps.ravel() * dt


def switch_positions(ens: Ensemble) -> np.ndarray:
    if ens.switch_log is None:
        raise ValueError("ensemble was created without a switch log")
    if not ens.switch_log:
        return np.zeros(0)
    return np.concatenate([x for _, _, x in ens.switch_log])
