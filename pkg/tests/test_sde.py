import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bichannel_abf.diagnostics import entropy_report
from bichannel_abf.fokker_planck import coarsen, l1_distance, stationary_density, solver_for
from bichannel_abf.grid import Grid
from bichannel_abf.model import BiChannelSystem, DoubleWellChannel, Exclusion, reference_free_energy
from bichannel_abf.sde import (
    BinStats,
    SDEParams,
    _reflect,
    bias_at,
    histogram,
    interswitch_times,
    make_ensemble,
    run_sde,
    sample_density,
    step_ensemble,
    switch_positions,
    update_bias,
)

from conftest import gaussian_system


def free_particles(lam=1.0):
    """V = 0 in both channels: pure Brownian motion in (x, y)."""
    ch = DoubleWellChannel(0.0, 0.0)
    return BiChannelSystem((ch, ch), lam, Exclusion())


def test_no_switching_keeps_channels():
    sysm = gaussian_system(h=1.0, lam=0.0)
    n = 2000
    ens = make_ensemble(np.linspace(0, 1, n, endpoint=False), np.zeros(n), np.arange(n) % 2, 7.5, seed=3)
    i0 = ens.i.copy()
    for _ in range(50):
        step_ensemble(ens, None, sysm, 1e-3)
    assert np.array_equal(ens.i, i0)
    assert ens.switch_count.sum() == 0


def test_brownian_increments():
    sysm = free_particles(lam=0.0)
    n, dt = 200_000, 1e-3
    ens = make_ensemble(np.full(n, 0.5), np.zeros(n), np.zeros(n), 50.0, seed=11)
    step_ensemble(ens, None, sysm, dt)
    for inc in (ens.x - 0.5, ens.y):
        se = math.sqrt(2 * dt / n)
        assert abs(inc.mean()) < 4 * se
        assert inc.var() == pytest.approx(2 * dt, rel=4 * math.sqrt(2 / n))


def test_interswitch_times_are_exponential():
    lam, dt = 2.0, 1e-3
    n, per = 4000, 5
    ens = make_ensemble(np.random.default_rng(0).random(n), np.zeros(n), np.zeros(n), 7.0, seed=5, log_switches=True)
    sysm = free_particles(lam)
    while ens.switch_count.min() < per:
        step_ensemble(ens, None, sysm, dt)
    gaps = interswitch_times(ens, dt, per)
    assert gaps.size == n * per
    # a geometric number of steps with success 1 - exp(-lam dt)
    p = -math.expm1(-lam * dt)
    mean = dt / p
    se = gaps.std(ddof=1) / math.sqrt(gaps.size)
    assert abs(gaps.mean() - mean) < 3 * se
    # the step-discretised clock is late by dt / 2 on average
    assert abs(mean - 1 / lam) <= dt


def test_no_switches_inside_exclusion():
    sysm = gaussian_system(h=2.0, lam=5.0)
    n = 5000
    ens = make_ensemble(np.random.default_rng(1).random(n), np.zeros(n), np.zeros(n), 8.5, seed=2, log_switches=True)
    for _ in range(200):
        step_ensemble(ens, None, sysm, 1e-3)
    xs = switch_positions(ens)
    assert xs.size > 1000
    assert not sysm.exclusion.contains(xs).any()


def test_reflection_stays_in_domain():
    y = np.linspace(-30, 30, 1001)
    r = _reflect(y, 2.0)
    assert np.all(np.abs(r) <= 2.0)
    inside = np.abs(y) <= 2.0
    assert np.allclose(r[inside], y[inside])
    assert _reflect(np.array([2.5, -2.5]), 2.0) == pytest.approx([1.5, -1.5])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**64 - 1))
def test_same_seed_is_bit_identical(seed):
    sysm = gaussian_system(h=1.0, lam=3.0)
    params = SDEParams(N=300, dt=1e-3, t_end=0.02, n_bins=16, seed=seed)
    out = []
    for _ in range(2):
        ens = make_ensemble(np.linspace(0, 1, 300, endpoint=False), np.zeros(300), np.zeros(300), 7.5, params.seed)
        run = run_sde(sysm, params, ens, record_every=5)
        out.append((run.ensemble.x.tobytes(), run.ensemble.y.tobytes(), run.ensemble.i.tobytes(),
                    run.biases[-1].force.tobytes()))
    assert out[0] == out[1]


def test_blocks_have_independent_streams():
    ens = make_ensemble(np.zeros(20), np.zeros(20), np.zeros(20), 1.0, seed=0, block_size=8)
    assert len(ens.rngs) == 3
    draws = [rng.random(4) for rng, _ in ens.blocks()]
    assert not np.allclose(draws[0], draws[1])


# -- bias estimator --------------------------------------------------------- #


def test_frozen_walkers_read_local_force():
    sysm = gaussian_system(h=1.0)
    x, y, i = 0.4, 0.7, 1
    n = 50
    ens = make_ensemble(np.full(n, x), np.full(n, y), np.full(n, i), 7.5, seed=0)
    stats, _ = update_bias(BinStats.empty(32, n_min=10), ens, sysm)
    b = int(x * 32)
    assert stats.estimate()[b] == pytest.approx(float(sysm.force_x(i, x, y)), rel=1e-14)
    assert np.count_nonzero(stats.counts) == 1


def test_unvisited_bins_apply_zero_and_are_flagged():
    stats = BinStats.empty(8, n_min=10, n_ramp=100)
    stats.counts[2], stats.sums[2] = 50, 100.0
    stats.counts[5], stats.sums[5] = 5, 10.0
    b = stats.bias()
    assert b.sampled.tolist() == [False, False, True, False, False, False, False, False]
    assert stats.estimate()[2] == 2.0 and b.raw_force[5] == 0.0
    # zero-mean projection over the single visited bin leaves nothing
    assert np.all(b.force == 0.0)
    ramped = stats.bias(project=False)
    assert ramped.force[2] == pytest.approx(1.0) and np.count_nonzero(ramped.force) == 1


def test_ramp_and_projection():
    stats = BinStats.empty(4, n_min=1, n_ramp=100)
    stats.counts[:] = [200, 50, 200, 200]
    stats.sums[:] = [200.0, 100.0, -200.0, 0.0]
    applied = np.array([1.0, 2.0 * 0.5, -1.0, 0.0])
    assert np.allclose(stats.bias().force, applied - applied.mean())
    assert np.allclose(stats.bias(project=False).force, applied)


def test_estimator_converges_at_stationarity():
    sysm = gaussian_system(h=2.0, lam=5.0)
    g = Grid(256, 256, 8.5)
    n_bins = 32
    ens = sample_density(stationary_density(sysm, g), 1_000_000, seed=42)
    f = np.empty(ens.size)
    for c in (0, 1):
        m = ens.i == c
        f[m] = sysm.force_x(c, ens.x[m], ens.y[m])
    stats, _ = update_bias(BinStats.empty(n_bins), ens, sysm)
    b = np.minimum((ens.x * n_bins).astype(int), n_bins - 1)
    se = np.array([f[b == k].std(ddof=1) / math.sqrt((b == k).sum()) for k in range(n_bins)])
    # bin average of A' = -2 pi a sin(2 pi x): exact integral over each bin
    edges = np.arange(n_bins + 1) / n_bins
    a = 0.5
    bin_mean = a * (np.cos(2 * np.pi * edges[1:]) - np.cos(2 * np.pi * edges[:-1])) * n_bins
    assert np.all(np.abs(stats.estimate() - bin_mean) <= 4 * se)


def test_bias_lookup_is_piecewise_constant():
    stats = BinStats.empty(4, n_min=0, n_ramp=0)
    stats.counts[:] = 1
    stats.sums[:] = [1.0, 2.0, 3.0, 4.0]
    b = stats.bias(project=False)
    assert bias_at(b, np.array([0.0, 0.24, 0.26, 0.99])) == pytest.approx([1, 1, 2, 4])
    assert np.all(bias_at(None, np.array([0.3])) == 0.0)


# -- driver ----------------------------------------------------------------- #


def test_params_validation():
    with pytest.raises(ValueError):
        SDEParams(N=0)
    with pytest.raises(ValueError):
        SDEParams(seed=-1)
    with pytest.raises(ValueError):
        SDEParams(seed=2**64)


def test_remark2_occupancies_balance():
    sysm = gaussian_system(h=0.0, lam=1.0, exclusion=())
    n = 40_000
    ens = make_ensemble(np.random.default_rng(0).random(n), np.zeros(n), np.zeros(n), 6.5, seed=9)
    run = run_sde(sysm, SDEParams(N=n, dt=1e-2, t_end=4.0, n_bins=16, seed=9), ens, record_every=100)
    occ = float(np.mean(run.ensemble.i == 0))
    # the initial imbalance decays as exp(-2 lambda t)
    expected = 0.5 + 0.5 * math.exp(-2 * 4.0)
    assert abs(occ - expected) < 4 * math.sqrt(0.25 / n)


def test_sampled_ensemble_matches_density():
    sysm = gaussian_system(h=2.0, lam=5.0)
    g = Grid(64, 64, 8.5)
    f = stationary_density(sysm, g)
    ens = sample_density(f, 200_000, seed=1)
    hg = Grid(8, 8, g.L)
    assert l1_distance(histogram(ens, hg), coarsen(f, 8, 8)) < 0.02
    assert histogram(ens, hg).mass() == pytest.approx(1.0)


def test_adaptive_bias_error_within_entropy_bound():
    sysm = gaussian_system(a=0.5, h=2.0, lam=5.0)
    g = Grid(64, 64, 8.5)
    hg = Grid(16, 16, g.L)
    s = solver_for(sysm, g)
    ens = sample_density(s.stationary(), 20_000, seed=4)
    params = SDEParams(N=20_000, dt=1e-3, t_end=0.2, n_bins=16, seed=4)
    run = run_sde(sysm, params, ens, record_every=50, hist_grid=hg)
    # histogram entropies against the coarse stationary state, bias error on the bins
    st_ = coarsen(s.stationary(), 4, 4)
    hist = run.histograms[-1]
    hist.psi[hist.psi == 0] = 1e-300
    rep = entropy_report(hist, st_, None, np.zeros(hg.n_x))
    free = reference_free_energy(sysm, hg)
    est = run.stats[-1].estimate()
    m = hist.marginal()
    err = float(np.sum((est - free.force) ** 2 * m) * hg.dx)
    R = math.pi + 4 * math.pi
    assert err <= 2 * R * R * rep.E_m


def test_interswitch_requires_log():
    ens = make_ensemble(np.zeros(4), np.zeros(4), np.zeros(4), 1.0, seed=0)
    with pytest.raises(ValueError):
        interswitch_times(ens, 1e-3, 1)
    with pytest.raises(ValueError):
        switch_positions(ens)


def test_initial_walkers_must_be_inside():
    with pytest.raises(ValueError):
        make_ensemble(np.zeros(2), np.array([0.0, 3.0]), np.zeros(2), 2.0, seed=0)
