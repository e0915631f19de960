import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bichannel_abf.diagnostics import (
    AbsoluteContinuityError,
    bias_error_bound_check,
    entropy_report,
    fisher_information,
    fit_decay_rate,
    fourier_amplitude,
    relative_entropy,
    wasserstein_1d,
)
from bichannel_abf.fokker_planck import BiasProfile, DensityField, concentrated_initial, solver_for, tilted_stationary
from bichannel_abf.grid import Grid

from conftest import gaussian_system

# 30-digit quadrature (mpmath) of the closed-form integrands
KL_BERNOULLI_HALF_QUARTER = 0.143841036225890464
FISHER_COSINE_HALF = 5.28910505777309625  # int |d ln(1 + cos(2 pi x)/2)|^2 (1 + cos(2 pi x)/2) dx


def random_field(g, seed, lo=0.05):
    r = np.random.default_rng(seed)
    return DensityField(r.uniform(lo, 1.0, (2, g.n_x, g.n_y)), g).normalized()


# -- relative entropy ------------------------------------------------------- #


def test_entropy_of_identical_laws_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert relative_entropy(p, p) == 0.0


def test_bernoulli_relative_entropy():
    assert relative_entropy([0.5, 0.5], [0.25, 0.75]) == pytest.approx(KL_BERNOULLI_HALF_QUARTER, abs=1e-15)


def test_zero_mass_convention_and_absolute_continuity():
    assert relative_entropy([0.0, 1.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))
    with pytest.raises(AbsoluteContinuityError):
        relative_entropy([0.5, 0.5], [1.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40))
def test_csiszar_kullback(seed, n):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(n))
    q = r.dirichlet(np.ones(n))
    assert relative_entropy(p, q) >= 0.5 * np.abs(p - q).sum() ** 2 - 1e-14


# -- Fisher information ----------------------------------------------------- #


def test_fisher_of_identical_laws_is_zero():
    p = 1.0 + 0.3 * np.sin(2 * np.pi * np.arange(64) / 64)
    assert fisher_information(p, p, 1 / 64) == 0.0


def test_fisher_cosine_against_quadrature():
    n = 1024
    x = (np.arange(n) + 0.5) / n
    p = 1.0 + 0.5 * np.cos(2 * np.pi * x)
    assert fisher_information(p, np.ones(n), 1.0 / n) == pytest.approx(FISHER_COSINE_HALF, abs=1e-4)


def test_fisher_requires_positive_densities():
    with pytest.raises(ValueError):
        fisher_information(np.array([1.0, 0.0, 1.0]), np.ones(3), 1 / 3)


def test_fisher_open_interval_uses_one_sided_ends():
    y = np.linspace(-3, 3, 301)
    dy = y[1] - y[0]
    p = np.exp(-0.5 * (y - 0.5) ** 2)
    q = np.exp(-0.5 * y**2)
    # d ln(p/q) = 0.5 everywhere, so I = 0.25 * sum p dy
    assert fisher_information(p, q, dy, periodic=False) == pytest.approx(0.25 * p.sum() * dy, rel=1e-10)


# -- entropy report --------------------------------------------------------- #


def test_report_at_stationarity_vanishes():
    sysm = gaussian_system(h=1.0)
    g = Grid(32, 32, 7.5)
    s = solver_for(sysm, g)
    st_ = s.stationary()
    rep = entropy_report(st_, st_, s.bias(st_), s.free.force)
    for k in ("E", "E_M", "E_m", "E_c", "P", "F_macro", "bias_error"):
        assert abs(getattr(rep, k)) < 1e-20, k


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_entropy_decomposition_on_random_fields(seed):
    g = Grid(8, 8, 3.0)
    f, f_inf = random_field(g, seed), random_field(g, seed + 1)
    rep = entropy_report(f, f_inf, None, np.zeros(g.n_x))
    assert rep.decomposition_residual <= 1e-10
    assert rep.E >= 0 and rep.E_M >= 0 and rep.E_m >= 0 and rep.E_c >= 0
    assert rep.E_c <= rep.P + 1e-12
    assert np.all(rep.e_cl >= 0)


def test_report_columns_and_row():
    g = Grid(8, 8, 3.0)
    f = random_field(g, 3)
    rep = entropy_report(f, random_field(g, 4), None, np.zeros(g.n_x), t=0.25)
    row = rep.as_row()
    assert len(row) == 8 and row[0] == 0.25
    assert rep.COLUMNS == ("t", "E", "E_M", "E_m", "E_c", "P", "F_macro", "bias_error")


def test_empty_channel_gets_zero_channel_entropy():
    sysm = gaussian_system(h=1.0)
    g = Grid(16, 32, 7.5)
    s = solver_for(sysm, g)
    f = concentrated_initial(sysm, g, channel=0)
    rep = entropy_report(f, s.stationary(), s.bias(f), s.free.force)
    assert rep.empty_channels[1].all() and not rep.empty_channels[0].any()
    assert np.all(rep.e_cl[1] == 0.0)
    # all mass in one channel against (1/2, 1/2) weights
    outside = ~sysm.exclusion.contains(g.x)
    assert np.allclose(rep.e_c[outside], math.log(2.0), atol=1e-12)


def test_marginal_zero_is_rejected():
    g = Grid(8, 8, 3.0)
    f = random_field(g, 1)
    f.psi[:, 2] = 0.0
    with pytest.raises(AbsoluteContinuityError):
        entropy_report(f, random_field(g, 2), None, np.zeros(g.n_x))


# -- bias bound ------------------------------------------------------------- #


def test_bound_check_at_stationarity_is_tight():
    sysm = gaussian_system(h=1.0)
    g = Grid(16, 16, 7.5)
    s = solver_for(sysm, g)
    st_ = s.stationary()
    chk = bias_error_bound_check(entropy_report(st_, st_, s.bias(st_), s.free.force), R=5.0)
    assert chk.holds and abs(chk.margin) < 1e-20


def test_bound_check_flags_violation():
    sysm = gaussian_system(h=1.0)
    g = Grid(16, 16, 7.5)
    s = solver_for(sysm, g)
    f = concentrated_initial(sysm, g)
    rep = entropy_report(f, s.stationary(), BiasProfile.zero(g), s.free.force)
    assert rep.bias_error > 0
    assert not bias_error_bound_check(rep, R=0.0).holds


# -- Wasserstein ------------------------------------------------------------ #


@pytest.mark.parametrize("a,b", [(3, 17), (0, 99), (40, 41)])
def test_point_masses(a, b):
    n = 100
    x = np.arange(n) * 0.01
    p, q = np.zeros(n), np.zeros(n)
    p[a], q[b] = 1.0, 1.0
    assert wasserstein_1d(p, q, x) == pytest.approx(abs(x[a] - x[b]), abs=1e-12)
    assert wasserstein_1d(p, p, x) == 0.0


@settings(max_examples=40, deadline=None)
@given(mu=st.floats(-1.5, 1.5), s=st.floats(0.5, 1.6))
def test_talagrand_for_standard_gaussian(mu, s):
    y = np.linspace(-10, 10, 4001)
    dy = y[1] - y[0]
    q = np.exp(-0.5 * y**2)
    q /= q.sum()
    p = np.exp(-0.5 * ((y - mu) / s) ** 2)
    p /= p.sum()
    # unit curvature gives LSI constant 1
    assert wasserstein_1d(p, q, y) <= math.sqrt(2.0 * relative_entropy(p, q) / 1.0) + dy


def test_wasserstein_shape_mismatch():
    with pytest.raises(ValueError):
        wasserstein_1d(np.ones(3), np.ones(4), np.arange(3))


# -- rate fits -------------------------------------------------------------- #


def test_exact_exponential_fit():
    t = np.linspace(0, 2, 50)
    est = fit_decay_rate(t, 3 * np.exp(-5 * t), window=1.0)
    assert est.rate == pytest.approx(5.0, rel=1e-12)
    assert est.r2 == pytest.approx(1.0, abs=1e-12)
    assert est.n_samples == 50
    assert np.allclose(est.local_rates, 5.0)


def test_noisy_exponential_fit():
    r = np.random.default_rng(7)
    t = np.linspace(0, 3, 100)
    v = np.exp(-2.0 * t) * (1 + 0.1 * r.standard_normal(100))
    assert fit_decay_rate(t, v, window=1.0).rate == pytest.approx(2.0, rel=0.05)


def test_heat_mode_amplitude_fit():
    sysm = gaussian_system(a=0.0, h=0.0, exclusion=())
    g = Grid(256, 8, 6.5)
    s = solver_for(sysm, g)
    f0 = tilted_stationary(sysm, g, lambda x: 1.0 + 0.5 * np.cos(2 * np.pi * x))
    run = s.run(f0, 0.05, record_every=256, on_record=lambda t, f, b: fourier_amplitude(f.marginal()), store=False)
    est = fit_decay_rate(run.times, run.records, window=1.0)
    assert est.rate == pytest.approx(4 * math.pi**2, rel=0.01)
    assert run.records[0] == pytest.approx(0.25, abs=1e-12)


def test_fit_window_and_floor():
    t = np.linspace(0, 10, 101)
    v = np.exp(-t)
    v[60:] = 0.0
    est = fit_decay_rate(t, v, window=0.5, floor=1e-12)
    assert est.t_end == pytest.approx(5.9)
    est = fit_decay_rate(t, np.exp(-t), window=(2.0, 4.0))
    assert est.t_start == pytest.approx(2.0) and est.t_end == pytest.approx(4.0)
    with pytest.raises(ValueError):
        fit_decay_rate(t, v, window=(5.0, 8.0))
    with pytest.raises(ValueError):
        fit_decay_rate(t[:5], np.exp(-t[:5]))


def test_fourier_amplitude_normalisation():
    x = np.arange(64) / 64
    assert fourier_amplitude(1 + 0.6 * np.cos(2 * np.pi * x)) == pytest.approx(0.3, abs=1e-15)
    assert fourier_amplitude(1 + 0.6 * np.cos(4 * np.pi * x), k=2) == pytest.approx(0.3, abs=1e-15)
