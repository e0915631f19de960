"""Finite-volume solver for the bi-channel adaptive-bias Fokker-Planck system.

The density psi(t, x, y, i) is advanced in the weighted form

    d_t psi = div(psi_inf grad(psi / psi_inf)) + d_x((A' - A'_t) psi) - lambda(x) (psi - psi_{1-i})

with face weights from psi_inf (harmonic mean), first-order upwinding of the
bias-mismatch term and an exact exponential update of the channel exchange.
psi_inf is then a discrete fixed point of ``step`` by construction.

The bias used by the stepper is evaluated on x-faces so that the y- and
channel-summed update is exactly the discrete heat equation for the
x-marginal (see ``FokkerPlanckSolver.face_drift``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numba
import numpy as np

from .grid import Grid
from .model import BiChannelSystem, FreeEnergyProfile, ModelError, reference_free_energy

NEGATIVE_TOL = 1e-12


class CFLError(RuntimeError):
    """Raised when an explicit step produces a negative density."""


class UnvisitedError(ValueError):
    """Raised when the x-marginal vanishes somewhere and the bias is undefined."""


@dataclass
class DensityField:
    """psi at cell centres, indexed (channel, x-cell, y-cell)."""

    psi: np.ndarray
    grid: Grid

    def __post_init__(self):
        shape = (2, self.grid.n_x, self.grid.n_y)
        if self.psi.shape != shape:
            raise ValueError(f"density shape {self.psi.shape} does not match grid {shape}")

    def mass(self) -> float:
        return float(self.psi.sum() * self.grid.cell_area)

    def channel_marginals(self) -> np.ndarray:
        """psi^{xi,I}(x, i), shape (2, n_x)."""
        return self.psi.sum(axis=2) * self.grid.dy

    def marginal(self) -> np.ndarray:
        """psi^xi(x), shape (n_x,)."""
        return self.channel_marginals().sum(axis=0)

    def normalized(self) -> "DensityField":
        return DensityField(self.psi / self.mass(), self.grid)

    def copy(self) -> "DensityField":
        return DensityField(self.psi.copy(), self.grid)


@dataclass
class BiasProfile:
    """Biasing force A'_t on x-cells and its periodic antiderivative A_t.

    ``force`` is shifted to zero mean over the torus; ``raw_force`` keeps the
    unshifted estimate. ``face_force`` holds the force on the faces
    x_{j+1/2} when it is known there (the solver's consistent bias);
    otherwise faces take the mean of the two neighbouring cells.
    """

    x: np.ndarray
    force: np.ndarray
    energy: np.ndarray
    raw_force: np.ndarray
    face_force: Optional[np.ndarray] = None
    sampled: Optional[np.ndarray] = None

    @classmethod
    def from_force(cls, x, force, face_force=None, sampled=None, project: bool = True) -> "BiasProfile":
        x = np.asarray(x, dtype=float)
        raw = np.asarray(force, dtype=float)
        f = raw - raw.mean() if project else raw.copy()
        dx = 1.0 / x.size
        energy = np.concatenate([[0.0], np.cumsum(f[:-1]) * dx])
        return cls(x, f, energy, raw, face_force, sampled)

    @classmethod
    def from_free_energy(cls, free: FreeEnergyProfile) -> "BiasProfile":
        return cls(free.x, free.force.copy(), free.energy.copy(), free.force.copy(), free.face_force)

    @classmethod
    def zero(cls, grid: Grid) -> "BiasProfile":
        z = np.zeros(grid.n_x)
        return cls(grid.x, z, z.copy(), z.copy(), z.copy())

    def faces(self) -> np.ndarray:
        if self.face_force is not None:
            return self.face_force
        return 0.5 * (self.force + np.roll(self.force, -1))


# --------------------------------------------------------------------------- #
# Kernels
# --------------------------------------------------------------------------- #


@numba.njit(cache=True)
def _fill_u(psi, inv_inf, u):
    """u = psi / psi_inf into a buffer padded by one ghost cell on each y-end."""
    nc, nx, ny = psi.shape
    for i in range(nc):
        for j in range(nx):
            for k in range(ny):
                u[i, j, k + 1] = psi[i, j, k] * inv_inf[i, j, k]


@numba.njit(cache=True)
def _face_drift(psi, u, wx, dx, dy, b):
    """b_f = A'_f - A'_{t,f} such that the summed x-flux equals -(psi^xi_{j+1} - psi^xi_j)/dx."""
    nc, nx, ny = psi.shape
    for j in range(nx):
        jp = j + 1 if j + 1 < nx else 0
        diff = 0.0
        m_here = 0.0
        m_next = 0.0
        for i in range(nc):
            for k in range(ny):
                diff += wx[i, j, k] * (u[i, jp, k + 1] - u[i, j, k + 1])
                m_here += psi[i, j, k]
                m_next += psi[i, jp, k]
        diff *= dy / dx
        m_here *= dy
        m_next *= dy
        r = diff - (m_next - m_here) / dx
        # upwind cell of the face is the one the residual flux leaves
        if r < 0.0:
            b[j] = -r / m_next if m_next > 0.0 else 0.0
        elif r > 0.0:
            b[j] = -r / m_here if m_here > 0.0 else 0.0
        else:
            b[j] = 0.0


@numba.njit(cache=True)
def _fp_update(psi, u, wx, wy, b, decay, dt, dx, dy, out):
    """One explicit step given u and the face drift; returns min of the result.

    ``wy`` carries zero no-flux faces at both y-ends, shape (2, n_x, n_y + 1).
    """
    nc, nx, ny = psi.shape
    rx = dt / (dx * dx)
    ra = dt / dx
    ry = dt / (dy * dy)
    for i in range(nc):
        for j in range(nx):
            jp = j + 1 if j + 1 < nx else 0
            jm = j - 1 if j > 0 else nx - 1
            bR = b[j]
            bL = b[jm]
            for k in range(ny):
                uc = u[i, j, k + 1]
                fr = -wx[i, j, k] * (u[i, jp, k + 1] - uc)
                fl = -wx[i, jm, k] * (uc - u[i, jm, k + 1])
                ar = bR * (psi[i, jp, k] if bR > 0.0 else psi[i, j, k])
                al = bL * (psi[i, j, k] if bL > 0.0 else psi[i, jm, k])
                gu = -wy[i, j, k + 1] * (u[i, j, k + 2] - uc)
                gd = -wy[i, j, k] * (uc - u[i, j, k])
                out[i, j, k] = psi[i, j, k] - rx * (fr - fl) + ra * (ar - al) - ry * (gu - gd)
    # exact relaxation of psi_0 - psi_1 where switching is allowed
    for j in range(nx):
        dj = decay[j]
        if dj < 1.0:
            for k in range(ny):
                s = out[0, j, k] + out[1, j, k]
                d = (out[0, j, k] - out[1, j, k]) * dj
                out[0, j, k] = 0.5 * (s + d)
                out[1, j, k] = 0.5 * (s - d)
    vmin = np.inf
    for i in range(nc):
        for j in range(nx):
            for k in range(ny):
                if out[i, j, k] < vmin:
                    vmin = out[i, j, k]
    return vmin


@numba.njit(cache=True)
def _adaptive_step(psi, inv_inf, wx, wy, decay, dt, dx, dy, u, b, out):
    _fill_u(psi, inv_inf, u)
    _face_drift(psi, u, wx, dx, dy, b)
    return _fp_update(psi, u, wx, wy, b, decay, dt, dx, dy, out)


def _harmonic(a, b):
    s = a + b
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, 2.0 * a * b / np.where(s > 0, s, 1.0), 0.0)


# --------------------------------------------------------------------------- #
# Solver
# --------------------------------------------------------------------------- #


@dataclass
class PDERun:
    times: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    records: list = field(default_factory=list)
    dt: float = 0.0
    n_steps: int = 0
    max_mass_drift: float = 0.0
    min_density: float = math.inf


class FokkerPlanckSolver:
    """Precomputed stationary data and the explicit stepper for one (system, grid)."""

    def __init__(self, system: BiChannelSystem, grid: Grid):
        self.system = system
        self.grid = grid
        self.tab = system.tabulate(grid)
        self.free = reference_free_energy(system, grid)
        psi_inf = np.exp(-(self.tab.V - self.free.energy[None, :, None]))
        for i in (0, 1):
            if not np.any(psi_inf[i] > 0):
                raise ModelError(f"stationary density underflows to zero in channel {i}")
        psi_inf /= psi_inf.sum() * grid.cell_area
        if not np.all(psi_inf > 0):
            raise ModelError("stationary density underflows on part of the grid; reduce the y-extent")
        self.psi_inf = psi_inf
        self.inv_inf = 1.0 / psi_inf
        self.wx = _harmonic(psi_inf, np.roll(psi_inf, -1, axis=1))
        wy = _harmonic(psi_inf[:, :, :-1], psi_inf[:, :, 1:])
        self.wy = np.pad(wy, ((0, 0), (0, 0), (1, 1)))
        self.lam = system.jump_rate(grid.x)
        self.a_face = self.free.face_force
        self._self_rate = (
            (self.wx + np.roll(self.wx, 1, axis=1)) / grid.dx**2 + (self.wy[:, :, 1:] + self.wy[:, :, :-1]) / grid.dy**2
        ) * self.inv_inf
        self._u_buf = np.zeros((2, grid.n_x, grid.n_y + 2))
        self.last_mass_drift = 0.0

    # -- stationary state and bias ------------------------------------------ #

    def stationary(self) -> DensityField:
        return DensityField(self.psi_inf.copy(), self.grid)

    def _u(self, psi):
        _fill_u(psi, self.inv_inf, self._u_buf)
        return self._u_buf

    def face_drift(self, field: DensityField) -> np.ndarray:
        """A' - A'_t on x-faces, the mismatch velocity actually used by the adaptive stepper."""
        b = np.empty(self.grid.n_x)
        _face_drift(field.psi, self._u(field.psi), self.wx, self.grid.dx, self.grid.dy, b)
        return b

    def bias(self, field: DensityField) -> BiasProfile:
        """Quadrature estimate of A'_t on cells, with the solver-consistent face values attached."""
        psi = field.psi
        marg = psi.sum(axis=(0, 2)) * self.grid.dy
        if np.any(marg <= 0):
            j = int(np.flatnonzero(marg <= 0)[0])
            raise UnvisitedError(f"unvisited reaction-coordinate value: x-marginal vanishes at x={self.grid.x[j]:.4g}")
        raw = (self.tab.dVdx * psi).sum(axis=(0, 2)) * self.grid.dy / marg
        face = self.a_face - self.face_drift(field)
        return BiasProfile.from_force(self.grid.x, raw, face_force=face)

    # -- time stepping ------------------------------------------------------ #

    def suggest_dt(self, drift: Optional[np.ndarray] = None) -> float:
        """0.4 min(dx^2/2, dy^2/2, dx/max|b|), capped by the positivity bound of the scheme."""
        g = self.grid
        bmax = float(np.abs(drift).max()) if drift is not None else 0.0
        dt = 0.4 * min(g.dx**2 / 2.0, g.dy**2 / 2.0, g.dx / bmax if bmax > 0 else math.inf)
        rate = float(self._self_rate.max()) + 2.0 * bmax / g.dx
        return min(dt, 0.9 / rate)

    def _finish(self, vmin, out, dt, drift, target):
        if vmin < -NEGATIVE_TOL:
            raise CFLError(
                f"negative density {vmin:.3e} after a step of dt={dt:.3e}; "
                f"stability bound is {self.suggest_dt(drift):.3e}"
            )
        m1 = out.sum()
        self.last_mass_drift = abs(m1 - target) / target
        # rescale to a fixed target so rounding does not random-walk the mass
        out *= target / m1

    def step(self, field: DensityField, bias: BiasProfile, dt: float) -> DensityField:
        drift = np.ascontiguousarray(self.a_face - bias.faces(), dtype=float)
        out = np.empty_like(field.psi)
        decay = np.exp(-2.0 * self.lam * dt)
        g = self.grid
        vmin = _fp_update(field.psi, self._u(field.psi), self.wx, self.wy, drift, decay, dt, g.dx, g.dy, out)
        self._finish(vmin, out, dt, drift, field.psi.sum())
        return DensityField(out, g)

    def run(
        self,
        initial: DensityField,
        t_end: float,
        dt: Optional[float] = None,
        record_every: int = 100,
        on_record: Optional[Callable] = None,
        store: bool = True,
        adaptive_bias: bool = True,
    ) -> PDERun:
        """Integrate to ``t_end``; the bias is re-evaluated before every step.

        With ``adaptive_bias=False`` the bias is held at zero, which gives the
        linear (unbiased) Fokker-Planck equation.
        """
        g = self.grid
        psi = np.ascontiguousarray(initial.psi, dtype=float).copy()
        if dt is None:
            drift0 = self.face_drift(initial) if adaptive_bias else self.a_face
            dt = self.suggest_dt(drift0)
        n_steps = max(1, int(math.ceil(t_end / dt - 1e-9)))
        dt = t_end / n_steps
        run = PDERun(dt=dt, n_steps=n_steps)
        buf = np.empty_like(psi)
        u = np.zeros_like(self._u_buf)
        b = np.array(self.a_face, dtype=float)
        decay = np.exp(-2.0 * self.lam * dt)
        target = psi.sum()

        def record(n):
            f = DensityField(psi.copy(), g)
            bias = self.bias(f) if adaptive_bias else BiasProfile.zero(g)
            run.times.append(n * dt)
            if store:
                run.fields.append(f)
                run.biases.append(bias)
            if on_record is not None:
                run.records.append(on_record(n * dt, f, bias))

        record(0)
        for n in range(1, n_steps + 1):
            if adaptive_bias:
                vmin = _adaptive_step(psi, self.inv_inf, self.wx, self.wy, decay, dt, g.dx, g.dy, u, b, buf)
            else:
                _fill_u(psi, self.inv_inf, u)
                vmin = _fp_update(psi, u, self.wx, self.wy, b, decay, dt, g.dx, g.dy, buf)
            self._finish(vmin, buf, dt, b, target)
            psi, buf = buf, psi
            run.max_mass_drift = max(run.max_mass_drift, self.last_mass_drift)
            run.min_density = min(run.min_density, vmin)
            if n % record_every == 0 or n == n_steps:
                record(n)
        return run


@lru_cache(maxsize=8)
def solver_for(system: BiChannelSystem, grid: Grid) -> FokkerPlanckSolver:
    return FokkerPlanckSolver(system, grid)


# --------------------------------------------------------------------------- #
# Functional interface
# --------------------------------------------------------------------------- #


def stationary_density(system: BiChannelSystem, grid: Grid) -> DensityField:
    """psi_inf(x, y, i) proportional to exp(-(V_i - A)), normalised on the grid."""
    return solver_for(system, grid).stationary()


def bias_from_density(field: DensityField, system: BiChannelSystem, grid: Grid) -> BiasProfile:
    return solver_for(system, grid).bias(field)


def suggest_dt(system: BiChannelSystem, grid: Grid, field: Optional[DensityField] = None) -> float:
    s = solver_for(system, grid)
    return s.suggest_dt(s.face_drift(field) if field is not None else None)


def step(field: DensityField, bias: BiasProfile, system: BiChannelSystem, grid: Grid, dt: float) -> DensityField:
    return solver_for(system, grid).step(field, bias, dt)


def run_pde(system, grid, initial, t_end, dt=None, record_every=100, **kw) -> PDERun:
    return solver_for(system, grid).run(initial, t_end, dt, record_every, **kw)


def marginals(field: DensityField):
    """Return (psi^{xi,I} of shape (2, n_x), psi^xi of shape (n_x,))."""
    xi_i = field.channel_marginals()
    return xi_i, xi_i.sum(axis=0)


def conditionals(field: DensityField, j: int, channels: Sequence[int] = (0, 1)):
    """Channel-conditional laws at x-cell ``j`` and the Bernoulli channel weights.

    Returns ``(cond, weights)`` where ``cond[i]`` is the density of
    mu_{t|x,i} in y (integrating to one with spacing dy) and ``weights`` are
    psi^{xi,I}/psi^xi.
    """
    g = field.grid
    col = field.psi[:, j, :]
    xi_i = col.sum(axis=1) * g.dy
    cond = np.full_like(col, np.nan)
    for i in channels:
        if not xi_i[i] > 0:
            raise ZeroDivisionError(f"channel {i} has zero marginal at x={g.x[j]:.4g}")
        cond[i] = col[i] / xi_i[i]
    total = xi_i.sum()
    if not total > 0:
        raise ZeroDivisionError(f"x-marginal is zero at x={g.x[j]:.4g}")
    return cond, xi_i / total


def periodic_laplacian(m: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(m, -1) - 2.0 * m + np.roll(m, 1)) / dx**2


def marginal_heat_residual(series: Sequence[np.ndarray], dt: float, dx: Optional[float] = None) -> np.ndarray:
    """Max-norm of (m(t+dt) - m(t))/dt - Lap m(t) for consecutive x-marginals."""
    series = [np.asarray(m, dtype=float) for m in series]
    if len(series) < 3:
        raise ValueError("need at least three consecutive snapshots")
    if dx is None:
        dx = 1.0 / series[0].size
    return np.array(
        [np.abs((b - a) / dt - periodic_laplacian(a, dx)).max() for a, b in zip(series[:-1], series[1:])]
    )


# --------------------------------------------------------------------------- #
# Initial conditions
# --------------------------------------------------------------------------- #


def concentrated_initial(
    system: BiChannelSystem, grid: Grid, x0: float = 0.5, kappa: float = 1.0, channel: int = 0
) -> DensityField:
    """exp(-V_c) in one channel, tilted by a von Mises bump exp(kappa cos 2pi(x - x0))."""
    X, Y = grid.mesh()
    logp = -system.potential(channel, X, Y) + kappa * np.cos(2.0 * np.pi * (X - x0))
    psi = np.zeros((2, grid.n_x, grid.n_y))
    psi[channel] = np.exp(logp - logp.max())
    return DensityField(psi, grid).normalized()


def tilted_stationary(system: BiChannelSystem, grid: Grid, profile: Callable) -> DensityField:
    """psi_inf(x, y, i) * g(x): the x-marginal becomes g (psi^xi_inf is uniform)."""
    psi_inf = stationary_density(system, grid).psi
    g = np.asarray(profile(grid.x), dtype=float)
    return DensityField(psi_inf * g[None, :, None], grid).normalized()


def coarsen(field_: DensityField, fx: int, fy: int) -> DensityField:
    """Average a density onto a grid with fx x fy fewer cells (mass preserving)."""
    g = field_.grid
    if g.n_x % fx or g.n_y % fy:
        raise ValueError("coarsening factors must divide the grid size")
    cg = Grid(g.n_x // fx, g.n_y // fy, g.L)
    psi = field_.psi.reshape(2, cg.n_x, fx, cg.n_y, fy).mean(axis=(2, 4))
    return DensityField(psi, cg)


def l1_distance(a: DensityField, b: DensityField) -> float:
    if a.grid != b.grid:
        raise ValueError("densities live on different grids")
    return float(np.abs(a.psi - b.psi).sum() * a.grid.cell_area)
