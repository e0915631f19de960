"""Bi-channel potential systems, the reference free energy and the model constants.

A system is a pair of channel potentials V_0, V_1 on the torus x line, a
switching rate ``lambda_rate`` and a no-exchange region (a finite union of
closed torus arcs) where switching is switched off. Energies are in units of
k_B T (beta = 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.special import logsumexp

from .grid import Grid

H1_TOL = 1e-12
TAIL_MASS_TOL = 1e-10


class ModelError(ValueError):
    """Raised when a system cannot be used as specified."""


class NormalizationError(ModelError):
    pass


class TruncationError(ModelError):
    pass


# --------------------------------------------------------------------------- #
# No-exchange region
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Exclusion:
    """Finite union of closed torus arcs ``[start, end]``.

    An arc with ``start > end`` wraps through 0. Endpoints count as inside.
    """

    arcs: tuple = ()

    def __post_init__(self):
        for a, b in self.arcs:
            if not (0.0 <= float(a) <= 1.0 and 0.0 <= float(b) <= 1.0):
                raise ModelError(f"arc endpoints must lie in [0, 1], got ({a}, {b})")
        object.__setattr__(self, "arcs", tuple((float(a), float(b)) for a, b in self.arcs))

    @staticmethod
    def arc_length(a: float, b: float) -> float:
        d = b - a
        return d + 1.0 if d < 0 else d

    @property
    def measure(self) -> float:
        # arcs are assumed disjoint
        return float(min(1.0, sum(self.arc_length(a, b) for a, b in self.arcs)))

    def offset_in_arc(self, x, arc):
        """Distance along ``arc`` from its start, and a membership mask."""
        a, b = arc
        d = np.mod(np.asarray(x, dtype=float) - a, 1.0)
        return d, d <= self.arc_length(a, b)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.zeros(x.shape, dtype=bool)
        for arc in self.arcs:
            _, m = self.offset_in_arc(x, arc)
            inside |= m
        return inside


# --------------------------------------------------------------------------- #
# Channel potentials
# --------------------------------------------------------------------------- #


class ChannelPotential:
    """One channel's potential V(x, y) and the derivatives the solvers need.

    Subclasses implement vectorised ``value``, ``dx``, ``dy`` and ``dxy``.
    ``max_center_offset`` and ``width`` feed the default y-truncation rule.
    """

    extendable = True

    def value(self, x, y):
        raise NotImplementedError

    def dx(self, x, y):
        raise NotImplementedError

    def dy(self, x, y):
        raise NotImplementedError

    def dxy(self, x, y):
        raise NotImplementedError

    def gradient(self, x, y):
        """(d_x V, d_y V) in one call; subclasses may share work between the two."""
        return self.dx(x, y), self.dy(x, y)

    def max_center_offset(self) -> float:
        return 0.0

    def width(self) -> float:
        return 1.0


class GaussianChannel(ChannelPotential):
    """V(x, y) = (y - sign*h*s(x))^2 / (2 sigma^2) + a cos(2 pi x).

    s(x) = sin^2(pi (x - x_0) / |arc|) on each arc of ``envelope`` and 0
    elsewhere, so the channel offset vanishes (with its derivative) outside.
    """

    def __init__(self, a: float, h: float, sigma: float, sign: int, envelope: Exclusion):
        if sigma <= 0:
            raise ModelError("channel width sigma must be positive")
        self.a, self.h, self.sigma, self.sign = float(a), float(h), float(sigma), int(sign)
        self.envelope = envelope

    def _s(self, x):
        x = np.asarray(x, dtype=float)
        s = np.zeros(x.shape)
        ds = np.zeros(x.shape)
        for arc in self.envelope.arcs:
            ell = Exclusion.arc_length(*arc)
            if ell <= 0:
                continue
            d, m = self.envelope.offset_in_arc(x, arc)
            phase = (np.pi / ell) * d[m]
            s[m] = np.sin(phase) ** 2
            ds[m] = (np.pi / ell) * np.sin(2.0 * phase)
        return s, ds

    def _shift(self, x):
        s, ds = self._s(x)
        return self.sign * self.h * s, self.sign * self.h * ds

    def value(self, x, y):
        m, _ = self._shift(x)
        return (y - m) ** 2 / (2.0 * self.sigma**2) + self.a * np.cos(2.0 * np.pi * x)

    def dx(self, x, y):
        m, dm = self._shift(x)
        return -(y - m) * dm / self.sigma**2 - 2.0 * np.pi * self.a * np.sin(2.0 * np.pi * x)

    def dy(self, x, y):
        m, _ = self._shift(x)
        return (y - m) / self.sigma**2

    def dxy(self, x, y):
        _, dm = self._shift(x)
        return -dm / self.sigma**2 + 0.0 * y

    def gradient(self, x, y):
        m, dm = self._shift(x)
        r = (y - m) / self.sigma**2
        return -r * dm - 2.0 * np.pi * self.a * np.sin(2.0 * np.pi * x), r

    def max_center_offset(self) -> float:
        return abs(self.h) if self.envelope.arcs else 0.0

    def width(self) -> float:
        return self.sigma


class DoubleWellChannel(ChannelPotential):
    """V(x, y) = beta (y^4/4 - y^2/2) + a cos(2 pi x): a metastable conditional law."""

    def __init__(self, beta: float, a: float = 0.0):
        self.beta, self.a = float(beta), float(a)

    def value(self, x, y):
        return self.beta * (y**4 / 4.0 - y**2 / 2.0) + self.a * np.cos(2.0 * np.pi * x)

    def dx(self, x, y):
        return -2.0 * np.pi * self.a * np.sin(2.0 * np.pi * x) + 0.0 * y

    def dy(self, x, y):
        return self.beta * (y**3 - y) + 0.0 * x

    def dxy(self, x, y):
        return 0.0 * (x + y)

    def max_center_offset(self) -> float:
        return 1.0

    def width(self) -> float:
        return 1.0 / math.sqrt(2.0 * self.beta)


class TabulatedChannel(ChannelPotential):
    """Potential sampled at the cell centres of a (n_x, n_y, L) grid.

    Values are interpolated by a bicubic spline that is periodic in x (by
    padding), so evaluation at the table nodes returns the table exactly.
    """

    extendable = False
    _PAD = 4

    def __init__(self, values, L: float):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ModelError("tabulated potential must be a 2-D (n_x, n_y) array")
        if not np.all(np.isfinite(values)):
            raise NormalizationError("tabulated potential contains non-finite values")
        self.table = values
        self.grid = Grid(values.shape[0], values.shape[1], float(L))
        p = self._PAD
        xs = np.concatenate([self.grid.x[-p:] - 1.0, self.grid.x, self.grid.x[:p] + 1.0])
        padded = np.concatenate([values[-p:], values, values[:p]], axis=0)
        self._spline = RectBivariateSpline(xs, self.grid.y, padded, kx=3, ky=3, s=0)

    @classmethod
    def from_file(cls, path) -> "TabulatedChannel":
        with open(path) as fh:
            header = fh.readline().split()
        if len(header) != 3:
            raise ModelError(f"{path}: header must be 'nx ny L'")
        nx, ny, L = int(header[0]), int(header[1]), float(header[2])
        data = np.loadtxt(path, skiprows=1, ndmin=2)
        if data.size != nx * ny:
            raise ModelError(f"{path}: expected {nx * ny} values, found {data.size}")
        return cls(data.reshape(nx, ny), L)

    def to_file(self, path) -> None:
        nx, ny = self.table.shape
        with open(path, "w") as fh:
            fh.write(f"{nx} {ny} {self.grid.L!r}\n")
            for row in self.table:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    def _ev(self, x, y, ddx, ddy):
        x, y = np.broadcast_arrays(np.mod(np.asarray(x, float), 1.0), np.asarray(y, float))
        return self._spline.ev(x.ravel(), y.ravel(), dx=ddx, dy=ddy).reshape(x.shape)

    def value(self, x, y):
        return self._ev(x, y, 0, 0)

    def dx(self, x, y):
        return self._ev(x, y, 1, 0)

    def dy(self, x, y):
        return self._ev(x, y, 0, 1)

    def dxy(self, x, y):
        return self._ev(x, y, 1, 1)


# --------------------------------------------------------------------------- #
# System
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Tabulation:
    """Potential data of both channels at the cell centres of a grid, shape (2, n_x, n_y)."""

    grid: Grid
    V: np.ndarray
    dVdx: np.ndarray
    dVdy: np.ndarray
    dVdxy: np.ndarray


@dataclass(frozen=True)
class BiChannelSystem:
    channels: tuple
    lambda_rate: float
    exclusion: Exclusion = field(default_factory=Exclusion)

    def __post_init__(self):
        if len(self.channels) != 2:
            raise ModelError("a bi-channel system needs exactly two channel potentials")
        if self.lambda_rate < 0:
            raise ModelError("switching rate must be nonnegative")

    def potential(self, i: int, x, y):
        return self.channels[i].value(x, y)

    def force_x(self, i: int, x, y):
        """Local mean force d_x V_i."""
        return self.channels[i].dx(x, y)

    def force_y(self, i: int, x, y):
        return self.channels[i].dy(x, y)

    def cross_derivative(self, i: int, x, y):
        return self.channels[i].dxy(x, y)

    def jump_rate(self, x) -> np.ndarray:
        """lambda(x) = lambda * 1_{T minus E}(x)."""
        x = np.asarray(x, dtype=float)
        return np.where(self.exclusion.contains(x), 0.0, self.lambda_rate)

    def tabulate(self, grid: Grid) -> Tabulation:
        X, Y = grid.mesh()
        stack = lambda f: np.stack([f(i, X, Y) for i in (0, 1)])  # noqa: E731
        return Tabulation(
            grid,
            stack(self.potential),
            stack(self.force_x),
            stack(self.force_y),
            stack(self.cross_derivative),
        )

    def default_half_extent(self, widths: float = 6.5) -> float:
        return max(c.max_center_offset() + widths * c.width() for c in self.channels)


@dataclass
class PotentialSpec:
    """Catalog entry: ``family`` in {"gaussian-channel", "double-well", "tabulated"}."""

    family: str
    params: dict = field(default_factory=dict)


def build_system(spec: PotentialSpec) -> BiChannelSystem:
    p = dict(spec.params)
    arcs = p.get("exclusion", ())
    exclusion = Exclusion(tuple(tuple(a) for a in arcs))
    lam = float(p.get("lambda", 1.0))
    if spec.family == "gaussian-channel":
        a, h, sigma = float(p.get("a", 0.5)), float(p.get("h", 1.0)), float(p.get("sigma", 1.0))
        chans = tuple(GaussianChannel(a, h, sigma, sign, exclusion) for sign in (1, -1))
    elif spec.family == "double-well":
        chans = tuple(DoubleWellChannel(float(p.get("beta", 4.0)), float(p.get("a", 0.0))) for _ in (0, 1))
    elif spec.family == "tabulated":
        files = p.get("files")
        if not files or len(files) != 2:
            raise ModelError("tabulated potentials need two files, one per channel")
        chans = tuple(TabulatedChannel.from_file(f) for f in files)
    else:
        raise ModelError(f"unknown potential family {spec.family!r}")
    return BiChannelSystem(chans, lam, exclusion)


# --------------------------------------------------------------------------- #
# Hypotheses and reference quantities
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Violation:
    message: str
    x: Optional[float] = None
    y: Optional[float] = None
    magnitude: Optional[float] = None


def _check_normalizable(tab: Tabulation) -> np.ndarray:
    """Return log Z_i(x) = log sum_y exp(-V_i) dy, shape (2, n_x)."""
    if not np.all(np.isfinite(tab.V)):
        bad = np.argwhere(~np.isfinite(tab.V))[0]
        raise NormalizationError(
            f"potential is not finite at channel {bad[0]}, x={tab.grid.x[bad[1]]:.4g}, y={tab.grid.y[bad[2]]:.4g}"
        )
    logz = logsumexp(-tab.V, axis=2) + math.log(tab.grid.dy)
    if not np.all(np.isfinite(logz)):
        raise NormalizationError("integral of exp(-V_i) over the truncated y-domain is not finite")
    return logz


def validate_h1(system: BiChannelSystem, grid: Grid) -> list:
    """Check that the channels coincide outside the no-exchange region."""
    tab = system.tabulate(grid)
    _check_normalizable(tab)
    out = []
    meas = system.exclusion.measure
    if meas <= 0.0:
        out.append(Violation("measure of the no-exchange region is 0", magnitude=0.0))
    elif meas >= 1.0:
        out.append(Violation("measure of the no-exchange region is 1", magnitude=1.0))
    inside = system.exclusion.contains(grid.x)
    if 0.0 < meas < 1.0 and (inside.all() or not inside.any()):
        raise ModelError("grid does not resolve the no-exchange region (need cells inside and outside)")
    diff = np.abs(tab.V[0] - tab.V[1])
    for j in np.flatnonzero(~inside):
        k = int(np.argmax(diff[j]))
        if diff[j, k] > H1_TOL:
            out.append(Violation("channels differ outside the no-exchange region", grid.x[j], grid.y[k], float(diff[j, k])))
    return out


@dataclass(frozen=True)
class FreeEnergyProfile:
    """Reference free energy A (normalised so that sum exp(-A) dx = 1) and mean force A'."""

    x: np.ndarray
    energy: np.ndarray
    force: np.ndarray
    channel_log_z: np.ndarray  # (2, n_x), log of sum_y exp(-V_i) dy

    @property
    def face_force(self) -> np.ndarray:
        """(A_{j+1} - A_j)/dx on the face between cells j and j+1 (periodic)."""
        dx = 1.0 / self.x.size
        return (np.roll(self.energy, -1) - self.energy) / dx


def _tail_mass(system: BiChannelSystem, grid: Grid, logz: np.ndarray) -> float:
    if not all(c.extendable for c in system.channels):
        return 0.0
    n_ext = max(grid.n_y // 4, 8)
    y_hi = grid.L + (np.arange(n_ext) + 0.5) * grid.dy
    y_ext = np.concatenate([-y_hi[::-1], y_hi])
    X, Y = np.meshgrid(grid.x, y_ext, indexing="ij")
    worst = 0.0
    for i in (0, 1):
        lt = logsumexp(-system.potential(i, X, Y), axis=1) + math.log(grid.dy)
        frac = np.exp(lt - np.logaddexp(lt, logz[i]))
        worst = max(worst, float(frac.max()))
    return worst


def reference_free_energy(system: BiChannelSystem, grid: Grid, tail_tol: float = TAIL_MASS_TOL) -> FreeEnergyProfile:
    """A(x) = -ln sum_i int exp(-V_i) dy and A'(x) by trapezoid (midpoint) quadrature."""
    tab = system.tabulate(grid)
    logz = _check_normalizable(tab)
    tail = _tail_mass(system, grid, logz)
    if tail > tail_tol:
        raise TruncationError(
            f"stationary mass outside |y| <= {grid.L:g} is {tail:.2e} > {tail_tol:.0e}; "
            f"use a larger y-extent (e.g. L >= {1.25 * grid.L:.3g})"
        )
    log_ztot = np.logaddexp(logz[0], logz[1])
    A = -log_ztot
    # sum_x exp(-A) dx = 1
    A = A + (logsumexp(-A) + math.log(grid.dx))
    shift = tab.V.min(axis=(0, 2))
    w = np.exp(-(tab.V - shift[None, :, None]))
    force = np.einsum("ijk,ijk->j", tab.dVdx, w) / w.sum(axis=(0, 2))
    return FreeEnergyProfile(grid.x, A, force, logz)


@dataclass
class HypothesisReport:
    C: float
    M: float
    c: float
    M_tilde: float
    rho: float
    rho_source: str
    h1: bool
    h2: bool
    h3: bool
    theta: Optional[float] = None
    violations: list = field(default_factory=list)

    @property
    def R(self) -> float:
        return self.C + self.M / math.sqrt(self.rho) if self.rho > 0 else math.inf

    @property
    def theta_min(self) -> float:
        if not self.rho > 0:
            return math.inf
        return 8.0 * self.R**2 * self.M_tilde / self.c

    @property
    def h4(self) -> Optional[bool]:
        if self.theta is None:
            return None
        return bool(self.theta > self.theta_min)

    def with_theta(self, theta: float) -> "HypothesisReport":
        out = HypothesisReport(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.theta = float(theta)
        return out


def channel_marginals_inf(free: FreeEnergyProfile) -> np.ndarray:
    """psi^{xi,I}_infinity(x, i) = int exp(-V_i) dy / sum_k int exp(-V_k) dy, shape (2, n_x).

    With A normalised as in ``reference_free_energy`` this is exp(A) int exp(-V_i) dy
    divided by the total stationary mass, so the channels sum to one at every x.
    """
    logz = free.channel_log_z
    return np.exp(logz - np.logaddexp(logz[0], logz[1])[None, :])


def estimate_constants(
    system: BiChannelSystem,
    grid: Grid,
    initial_marginal: Sequence[float],
    rho: Optional[float] = None,
    theta: Optional[float] = None,
) -> HypothesisReport:
    """Measure C, M, c, M~ (and rho, unless supplied) on ``grid``."""
    violations = validate_h1(system, grid)
    h1 = not violations
    tab = system.tabulate(grid)
    free = reference_free_energy(system, grid)
    shift = tab.V.min(axis=2, keepdims=True)
    w = np.exp(-(tab.V - shift))
    channel_mean_force = (tab.dVdx * w).sum(axis=2) / w.sum(axis=2)
    C = float(np.abs(channel_mean_force).max())
    M = float(np.abs(tab.dVdxy).max())
    c = float(channel_marginals_inf(free).min())
    if not c > 0:
        raise ModelError(f"minimum channel marginal is {c:.3g}; mass truncation error")
    M_tilde = float(np.max(initial_marginal))
    if rho is None:
        from .spectral import lsi_estimate

        est = lsi_estimate(system, grid)
        rho, source = est.rho_for_rate, est.rho_source
    else:
        source = "supplied"
    h2 = bool(np.isfinite(C) and np.isfinite(M))
    rep = HypothesisReport(C, M, c, M_tilde, float(rho), source, h1, h2, bool(rho > 0), violations=violations)
    if theta is not None:
        rep.theta = float(theta)
    return rep
