"""Channel-coupled operator on the torus, its spectral gap, LSI estimates and the rate function."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar

from .grid import Grid
from .model import (
    BiChannelSystem,
    HypothesisReport,
    ModelError,
    channel_marginals_inf,
    reference_free_energy,
)

DENSE_LIMIT = 2048


class SpectralError(RuntimeError):
    pass


class H4Error(ValueError):
    """The spectral gap does not exceed theta_min, so no rate is predicted."""


# --------------------------------------------------------------------------- #
# Operator
# --------------------------------------------------------------------------- #


@dataclass
class OperatorL:
    """Symmetrised form S = W^{-1/2} K W^{-1/2} of the channel-coupled operator.

    Unknowns are ordered (channel 0 cells, channel 1 cells). ``K`` is the matrix
    of the quadratic form and ``W = diag(dx / p)`` the Gram matrix of the
    weighted inner product, so the operator itself is W^{-1} K.
    """

    marginals: np.ndarray  # p = psi^{xi,I}_inf, shape (2, n_x)
    jump_rate: np.ndarray  # lambda(x), shape (n_x,)
    K: sp.csr_matrix
    weights: np.ndarray  # diagonal of W

    @property
    def n_x(self) -> int:
        return self.marginals.shape[1]

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    def inner(self, f, g) -> float:
        return float(np.dot(np.ravel(f) * self.weights, np.ravel(g)))

    def apply(self, phi) -> np.ndarray:
        """L phi = W^{-1} K phi, returned with the shape of ``phi``."""
        phi = np.asarray(phi, dtype=float)
        return (self.K @ phi.ravel() / self.weights).reshape(phi.shape)

    def quadratic_form(self, phi) -> float:
        v = np.ravel(phi)
        return float(v @ (self.K @ v))

    def symmetric(self) -> sp.csr_matrix:
        s = sp.diags(1.0 / np.sqrt(self.weights))
        return (s @ self.K @ s).tocsr()

    def kernel_vector(self) -> np.ndarray:
        """Unit vector spanning the constraint direction in symmetrised coordinates."""
        k = np.sqrt(self.weights) * self.marginals.ravel()
        return k / np.linalg.norm(k)


def operator_from_marginals(marginals, jump_rate) -> OperatorL:
    """Finite-volume assembly from psi^{xi,I}_inf (shape (2, n_x)) and lambda(x)."""
    p = np.asarray(marginals, dtype=float)
    lam = np.asarray(jump_rate, dtype=float)
    n = p.shape[1]
    if p.shape != (2, n) or lam.shape != (n,):
        raise ValueError("marginals must have shape (2, n_x) and jump_rate shape (n_x,)")
    c = float(p.min())
    if not c > 0:
        raise ModelError(f"channel marginal minimum is {c:.3g}; the operator needs it positive")
    dx = 1.0 / n
    rows, cols, vals = [], [], []
    j = np.arange(n)
    jp = (j + 1) % n
    for i in (0, 1):
        w = 2.0 * p[i] * p[i, jp] / (p[i] + p[i, jp]) / dx
        # sum_f w_f (r_{j+1} - r_j)^2 with r = phi / p
        a, b = i * n + j, i * n + jp
        pa, pb = p[i], p[i, jp]
        rows += [a, b, a, b]
        cols += [a, b, b, a]
        vals += [w / pa**2, w / pb**2, -w / (pa * pb), -w / (pa * pb)]
    jw = lam * dx / p[0]
    rows += [j, j + n, j, j + n]
    cols += [j, j + n, j + n, j]
    vals += [jw, jw, -jw, -jw]
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * n, 2 * n))
    return OperatorL(p, lam, K.tocsr(), (dx / p).ravel())


def build_operator(system: BiChannelSystem, grid: Grid) -> OperatorL:
    free = reference_free_energy(system, grid)
    return operator_from_marginals(channel_marginals_inf(free), system.jump_rate(grid.x))


@dataclass
class SpectralGap:
    theta: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (k, 2, n_x), orthonormal in the weighted inner product
    residual: float


def spectral_gap(op: OperatorL, k: int = 3, tol: float = 1e-8) -> SpectralGap:
    """Lowest k eigenpairs of the operator restricted to zero-sum functions."""
    S = op.symmetric()
    kv = op.kernel_vector()
    m = S.shape[0]
    k = min(k, m - 1)
    if m <= DENSE_LIMIT:
        Sd = S.toarray()
        P = np.eye(m) - np.outer(kv, kv)
        gamma = 1.0 + 2.0 * float(np.abs(Sd).sum(axis=1).max())
        D = P @ Sd @ P + gamma * np.outer(kv, kv)
        D = 0.5 * (D + D.T)
        vals, vecs = sla.eigh(D, subset_by_index=[0, k - 1])
    else:
        try:
            vals, vecs = spla.eigsh(S, k=k + 1, sigma=-1e-6, which="LM", tol=1e-12)
        except spla.ArpackNoConvergence as e:
            raise SpectralError(f"eigensolver did not converge: {e}") from e
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        drop = int(np.argmax(np.abs(kv @ vecs)))
        keep = [n for n in range(k + 1) if n != drop]
        vals, vecs = vals[keep], vecs[:, keep]
        vecs = vecs - np.outer(kv, kv @ vecs)
        vecs /= np.linalg.norm(vecs, axis=0)
        D = S
    res = float(max(np.linalg.norm(D @ vecs[:, n] - vals[n] * vecs[:, n]) for n in range(k)))
    scale = max(1.0, float(np.abs(vals).max()))
    if res > tol * scale:
        raise SpectralError(f"eigenpair residual {res:.3e} exceeds tolerance")
    phi = (vecs / np.sqrt(op.weights)[:, None]).T.reshape(k, 2, op.n_x)
    return SpectralGap(float(vals[0]), vals, phi, res)


# --------------------------------------------------------------------------- #
# LSI constant of the conditional measures
# --------------------------------------------------------------------------- #


def _column_gaps(V: np.ndarray, dy: float) -> np.ndarray:
    """Second eigenvalue of -d_y(q d_y(. / q)) for every column of V (shape (..., n_y))."""
    lead = V.shape[:-1]
    flat = V.reshape(-1, V.shape[-1])
    out = np.empty(flat.shape[0])
    for n, v in enumerate(flat):
        q = np.exp(-(v - v.min()))
        w = 2.0 * q[:-1] * q[1:] / (q[:-1] + q[1:]) / dy**2
        diag = (np.concatenate([[0.0], w]) + np.concatenate([w, [0.0]])) / q
        off = -w / np.sqrt(q[:-1] * q[1:])
        vals = sla.eigh_tridiagonal(diag, off, select="i", select_range=(0, 1), eigvals_only=True)
        out[n] = vals[1]
    return out.reshape(lead)


@dataclass
class LSIEstimate:
    rho_poincare: float
    rho_lower: Optional[float]
    poincare_map: np.ndarray  # (2, n_x)
    curvature_map: np.ndarray  # (2, n_x), min over y of d_yy V_i
    poincare_coarse: float = math.nan

    @property
    def rho_for_rate(self) -> float:
        return self.rho_lower if self.rho_lower is not None else self.rho_poincare

    @property
    def rho_source(self) -> str:
        return "bakry-emery" if self.rho_lower is not None else "poincare"


def lsi_estimate(system: BiChannelSystem, grid: Grid, extrapolate: bool = True) -> LSIEstimate:
    """Per-(x, i) Poincare gaps of the conditional measures and a curvature lower bound.

    The discrete gap converges at second order in dy; with ``extrapolate`` the
    values from n_y and 2 n_y cells are Richardson-combined.
    """
    coarse = _column_gaps(system.tabulate(grid).V, grid.dy)
    if extrapolate:
        fine_grid = grid.refined(2, "y")
        fine = _column_gaps(system.tabulate(fine_grid).V, fine_grid.dy)
        pmap = (4.0 * fine - coarse) / 3.0
    else:
        pmap = coarse
    # curvature from centred differences of d_y V on the cell centres
    X, Y = grid.mesh()
    h = 1e-4
    curv = np.stack(
        [(system.force_y(i, X, Y + h) - system.force_y(i, X, Y - h)) / (2.0 * h) for i in (0, 1)]
    ).min(axis=2)
    alpha = float(curv.min())
    rho_p = float(pmap.min())
    # LSI constant <= Poincare constant; the discrete gap can undershoot by O(dy^4)
    rho_l = min(alpha, rho_p) if alpha > 0 else None
    return LSIEstimate(rho_p, rho_l, pmap, curv, float(coarse.min()))


# --------------------------------------------------------------------------- #
# Rate function
# --------------------------------------------------------------------------- #


def _rate_terms(theta, rho, R, M_tilde, c):
    t = rho + 0.5 * theta
    disc = (rho - 0.5 * theta) ** 2 + 16.0 * R**2 * M_tilde * rho / c
    return t, np.sqrt(disc)


def rate_function(theta, rho, R, M_tilde, c):
    """Lambda(theta) = ((rho + theta/2) - sqrt((rho - theta/2)^2 + 16 R^2 M~ rho / c)) / 2."""
    t, s = _rate_terms(np.asarray(theta, dtype=float), rho, R, M_tilde, c)
    det = 0.5 * np.asarray(theta, dtype=float) * rho - 4.0 * R**2 * M_tilde * rho / c
    # 2 det / (t + s) is the cancellation-free form of (t - s) / 2
    out = 2.0 * det / (t + s)
    return float(out) if np.ndim(out) == 0 else out


def coupling_matrix(theta, rho, R, M_tilde, c, alpha=None) -> np.ndarray:
    """2x2 matrix of the (E_m, P) differential inequalities; alpha defaults to M~/c."""
    if alpha is None:
        alpha = M_tilde / c
    return np.array(
        [[-rho, rho], [4.0 * alpha * R**2, -(1.0 - M_tilde / (2.0 * alpha * c)) * theta]]
    )


def coupling_rates(theta, rho, R, M_tilde, c, alpha=None):
    """(lambda_plus, lambda_minus): minus the eigenvalues of the coupling matrix, lambda_plus <= lambda_minus."""
    A = coupling_matrix(theta, rho, R, M_tilde, c, alpha)
    tr = A[0, 0] + A[1, 1]
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    s = math.sqrt(max(tr * tr - 4.0 * det, 0.0))
    lam_minus = 0.5 * (-tr + s)
    lam_plus = det / lam_minus if lam_minus != 0 else 0.5 * (-tr - s)
    return lam_plus, lam_minus


def optimal_alpha(theta, rho, R, M_tilde, c) -> float:
    """Numerically maximise lambda_plus over the admissible alpha interval (alternative to M~/c)."""
    disc = theta**2 * c**2 - 8.0 * M_tilde * theta * R**2 * c
    if disc <= 0:
        raise H4Error("no admissible alpha: theta does not exceed theta_min")
    a_lo = (theta * c - math.sqrt(disc)) / (8.0 * R**2 * c) if R > 0 else 0.0
    a_hi = (theta * c + math.sqrt(disc)) / (8.0 * R**2 * c) if R > 0 else 1e6 * M_tilde / c
    a_lo = max(a_lo, M_tilde * theta / (2.0 * c * (rho + theta)), M_tilde / (2.0 * c))
    res = minimize_scalar(
        lambda a: -coupling_rates(theta, rho, R, M_tilde, c, a)[0],
        bounds=(a_lo, a_hi),
        method="bounded",
        options={"xatol": 1e-12 * max(1.0, a_hi)},
    )
    return float(res.x)


@dataclass
class RatePrediction:
    rho: float
    C: float
    M: float
    c: float
    M_tilde: float
    R: float
    theta: float
    theta_min: float
    alpha: float
    lambda_plus: float
    lambda_minus: float
    rate_function: float
    epsilon: float
    em_rate: float
    remark2_rate: Optional[float] = None
    extras: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "extras"}
        if d["remark2_rate"] is None:
            d["remark2_rate"] = math.nan
        return d


def rate_prediction(hyp: HypothesisReport, theta=None, epsilon=None, alpha=None) -> RatePrediction:
    """Predicted decay rate 2 min(Lambda(theta) - eps, 4 pi^2) of the microscopic entropy.

    With ``alpha`` other than M~/c the rate uses lambda_+ of the coupling matrix at
    that alpha in place of Lambda(theta); ``rate_function`` still reports Lambda.
    """
    theta = hyp.theta if theta is None else float(theta)
    if theta is None:
        raise ValueError("a spectral gap is required")
    rho, c, M_tilde, R = hyp.rho, hyp.c, hyp.M_tilde, hyp.R
    theta_min = hyp.theta_min
    if not theta > theta_min:
        raise H4Error(
            f"[H4] violated: spectral gap {theta:.6g} <= theta_min {theta_min:.6g}; no rate is predicted"
        )
    lam = rate_function(theta, rho, R, M_tilde, c)
    if epsilon is None:
        epsilon = 0.05 * lam
    if not 0 < epsilon < lam:
        raise ValueError(f"epsilon must lie in (0, {lam:.6g})")
    if alpha is None:
        alpha = M_tilde / c
        lp, lm = coupling_rates(theta, rho, R, M_tilde, c)
        decay = lam
    else:
        lp, lm = coupling_rates(theta, rho, R, M_tilde, c, alpha)
        decay = lp
    rate = 2.0 * min(decay - epsilon, 4.0 * math.pi**2)
    return RatePrediction(rho, hyp.C, hyp.M, c, M_tilde, R, theta, theta_min, alpha, lp, lm, lam, epsilon, rate)


def remark2_rate(rho: float, lambda_rate: float) -> float:
    """Rate 2 min(rho, 4 pi^2, lambda) for identical channels exchanging everywhere."""
    return 2.0 * min(rho, 4.0 * math.pi**2, lambda_rate)
