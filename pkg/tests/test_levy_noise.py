import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from levydpp.levy_noise import (
    NEVER, InvalidInput, LevyMeasureSpec, NoiseRealization, NoiseSampler, PointMasses, PowerLaw,
    ShiftedLognormal, first_exceed_time, is_never, path_seed, prob_exceed_by, sample_noise,
    small_jump_compensator, tail_mass, uniform_grid,
)

HEAVY = LevyMeasureSpec(large_part=PowerLaw(c=1.0, alpha=0.5))


def jump_counts(spec, n, T=1.0, seed=11):
    sampler = NoiseSampler(spec, 0, 0.0, T, np.array([0.0, T]))
    return np.array([r.jump_times.size for r in sampler.sample_paths(seed, n)])


def realization(events, T=1.0):
    times = np.array([t for t, _ in events], dtype=float)
    marks = np.array([[m] for _, m in events], dtype=float).reshape(-1, 1)
    grid = np.unique(np.concatenate(([0.0, T], times)))
    return NoiseRealization(seed=0, time_grid=grid, brownian_increments=np.zeros((grid.size - 1, 1)),
                            jump_times=times, jump_marks=marks)


# -- sample_noise --------------------------------------------------------------


def test_no_jump_mass_gives_no_events():
    r = sample_noise(LevyMeasureSpec(), 1, 0.0, 1.0, uniform_grid(0, 1, 8), seed=3)
    assert r.jump_times.size == 0
    assert r.brownian_increments.shape == (8, 1)


def test_point_mass_count_mean_matches_rate():
    spec = LevyMeasureSpec(large_part=PointMasses(atoms=(((2.0,), 3.0),)))
    n = jump_counts(spec, 100_000)
    se = n.std(ddof=1) / math.sqrt(n.size)
    assert abs(n.mean() - 3.0) <= 3 * se


def test_power_law_count_rate_matches_tail_mass():
    n = jump_counts(HEAVY, 20_000)
    se = n.std(ddof=1) / math.sqrt(n.size)
    assert abs(n.mean() - 4.0) <= 3 * se


def test_counts_are_poisson_chi_square():
    spec = LevyMeasureSpec(large_part=PointMasses(atoms=(((2.0,), 1.5),)))
    n = jump_counts(spec, 10_000, T=0.5, seed=5)
    lam = 1.5 * 0.5
    top = 5
    obs = np.array([np.sum(n == k) for k in range(top)] + [np.sum(n >= top)])
    probs = np.array([stats.poisson.pmf(k, lam) for k in range(top)] + [stats.poisson.sf(top - 1, lam)])
    chi = stats.chisquare(obs, probs * n.size)
    assert chi.pvalue > 0.01


def test_brownian_increments_have_interval_variance():
    sampler = NoiseSampler(LevyMeasureSpec(), 1, 0.0, 1.0, np.array([0.0, 0.25, 1.0]))
    dw = np.array([r.brownian_increments[:, 0] for r in sampler.sample_paths(2, 20_000)])
    for j, var in enumerate([0.25, 0.75]):
        v = dw[:, j].var(ddof=1)
        se = var * math.sqrt(2 / (dw.shape[0] - 1))
        assert abs(v - var) <= 4 * se


def test_same_seed_is_bit_identical():
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 0.5), large_part=PowerLaw(1.0, 0.5), small_cutoff=0.25)
    a = sample_noise(spec, 1, 0.0, 1.0, uniform_grid(0, 1, 16), seed=99)
    b = sample_noise(spec, 1, 0.0, 1.0, uniform_grid(0, 1, 16), seed=99)
    for x, y in [(a.time_grid, b.time_grid), (a.brownian_increments, b.brownian_increments),
                 (a.jump_times, b.jump_times), (a.jump_marks, b.jump_marks)]:
        assert x.tobytes() == y.tobytes()


def test_events_are_ordered_on_grid_and_above_cutoff():
    spec = LevyMeasureSpec(small_part=PowerLaw(2.0, 1.2), large_part=PowerLaw(1.0, 0.5), small_cutoff=0.2)
    for r in NoiseSampler(spec, 1, 0.0, 1.0, uniform_grid(0, 1, 8)).sample_paths(1, 200):
        assert np.all(np.diff(r.jump_times) > 0)
        assert np.all(r.jump_norms >= 0.2)
        assert np.all(r.time_grid[r.event_indices()] == r.jump_times)


def test_path_seeds_depend_on_every_key_component():
    seeds = {path_seed(7, a, b) for a in range(20) for b in range(20)}
    assert len(seeds) == 400
    assert path_seed(7, 1, 2) != path_seed(8, 1, 2)


@pytest.mark.parametrize("grid", [[0.0], [0.0, 0.5, 0.5, 1.0], [0.0, 0.7, 0.3, 1.0], [0.1, 1.0]])
def test_bad_grids_are_rejected(grid):
    with pytest.raises(InvalidInput):
        sample_noise(LevyMeasureSpec(), 1, 0.0, 1.0, grid, seed=0)


def test_invalid_measures_are_rejected():
    with pytest.raises(InvalidInput):
        PowerLaw(1.0, 2.0)
    with pytest.raises(InvalidInput):
        PointMasses(atoms=(((0.5,), 1.0),))
    with pytest.raises(InvalidInput):
        LevyMeasureSpec(small_cutoff=0.0)


# -- tail_mass -----------------------------------------------------------------


def test_tail_mass_examples():
    assert tail_mass(HEAVY, 1.0) == pytest.approx(4.0, rel=1e-15)
    assert tail_mass(HEAVY, math.inf) == 0.0
    assert tail_mass(HEAVY, 1e12) < 1e-5
    pm = LevyMeasureSpec(large_part=PointMasses(atoms=(((5.0,), 2.0),)))
    assert tail_mass(pm, 3.0) == 2.0
    assert tail_mass(pm, 5.5) == 0.0
    with pytest.raises(InvalidInput):
        tail_mass(HEAVY, 0.05)


def test_tail_mass_power_law_closed_form():
    for M in [1.0, 2.0, 7.5, 100.0]:
        assert tail_mass(HEAVY, M) == pytest.approx(2 * M ** -0.5 / 0.5, rel=1e-14)


def test_tail_mass_lognormal_matches_survival():
    spec = LevyMeasureSpec(large_part=ShiftedLognormal(rate=2.0, mu=0.0, sigma=1.0))
    assert tail_mass(spec, 1.0) == 2.0
    assert tail_mass(spec, 2.0) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 50.0), st.floats(0.1, 50.0), st.floats(0.1, 1.9), st.floats(0.1, 5.0))
def test_tail_mass_nonincreasing(m1, m2, alpha, c):
    spec = LevyMeasureSpec(small_part=PowerLaw(c, alpha), large_part=PowerLaw(c, alpha),
                           small_cutoff=0.1)
    lo, hi = min(m1, m2), max(m1, m2)
    assert tail_mass(spec, hi) <= tail_mass(spec, lo)


def test_tail_mass_continuous_at_unit_radius():
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 0.5), large_part=PowerLaw(1.0, 0.5), small_cutoff=0.1)
    assert tail_mass(spec, 1.0 - 1e-12) == pytest.approx(tail_mass(spec, 1.0), abs=1e-9)


def test_small_part_has_finite_second_moment():
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 1.5))
    assert spec.small_second_moment() == pytest.approx(2 * 1.0 / 0.5)


# -- first_exceed_time -----------------------------------------------------------


def test_first_exceed_time_examples():
    assert is_never(first_exceed_time(realization([]), 2.0))
    r = realization([(0.3, 1.5), (0.7, -5.0)])
    assert first_exceed_time(r, 2.0) == 0.7
    assert first_exceed_time(r, 1.0) == 0.3
    assert first_exceed_time(r, 6.0) == NEVER


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(1.0, 30.0), st.floats(1.0, 30.0))
def test_first_exceed_time_monotone_in_level(seed, a, b):
    r = sample_noise(HEAVY, 1, 0.0, 1.0, [0.0, 1.0], seed)
    lo, hi = min(a, b), max(a, b)
    assert first_exceed_time(r, lo) <= first_exceed_time(r, hi)


def test_first_exceed_time_is_exponential_ks():
    M, T = 4.0, 10.0
    lam = tail_mass(HEAVY, M)
    sampler = NoiseSampler(HEAVY, 0, 0.0, T, np.array([0.0, T]))
    taus = np.array([first_exceed_time(r, M) for r in sampler.sample_paths(21, 100_000)])
    hit = taus[~np.array([is_never(t) for t in taus])]
    norm = -math.expm1(-lam * T)
    res = stats.kstest(hit, lambda t: -np.expm1(-lam * t) / norm)
    crit = 1.628 / math.sqrt(hit.size)  # 1% level
    assert res.statistic < crit


def test_exceedance_probability_matches_and_decreases():
    sampler = NoiseSampler(HEAVY, 0, 0.0, 1.0, np.array([0.0, 1.0]))
    reals = sampler.sample_paths(4, 10_000)
    prev = 1.0
    for M in [1.0, 4.0, 16.0, 64.0]:
        emp = np.mean([not is_never(first_exceed_time(r, M)) for r in reals])
        p = prob_exceed_by(HEAVY, M, 1.0)
        assert abs(emp - p) <= 3 * math.sqrt(p * (1 - p) / len(reals))
        assert p < prev
        prev = p


# -- compensator ---------------------------------------------------------------


def test_compensator_zero_without_small_part():
    comp = small_jump_compensator(HEAVY)
    assert comp.is_zero
    assert comp.integrate(abs) == 0.0


def test_symmetric_compensator_vanishes_for_odd_gamma():
    comp = small_jump_compensator(LevyMeasureSpec(small_part=PowerLaw(1.0, 0.5)))
    assert comp.first_moment[0] == 0.0
    assert comp.integrate(lambda r: r) == pytest.approx(0.0, abs=1e-12)


def test_compensator_quadrature_matches_hand_integral():
    # 2 * int_{1/4}^{1} r * r^{-3/2} dr = 2 * [2 sqrt(r)]_{1/4}^{1} = 2
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 0.5), small_cutoff=0.25)
    assert small_jump_compensator(spec).integrate(abs) == pytest.approx(2.0, rel=1e-10)


def test_one_sided_first_moment_closed_form():
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 0.5, symmetric=False), small_cutoff=0.25)
    comp = small_jump_compensator(spec)
    assert comp.first_moment[0] == pytest.approx(1.0, rel=1e-14)
    assert comp.integrate(lambda r: r) == pytest.approx(1.0, rel=1e-10)


def test_compensated_band_increment_has_zero_mean():
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 0.5, symmetric=False), small_cutoff=0.25)
    m1 = small_jump_compensator(spec).first_moment[0]
    sampler = NoiseSampler(spec, 0, 0.0, 1.0, np.array([0.0, 1.0]))
    inc = np.array([r.jump_marks[:, 0].sum() - m1 for r in sampler.sample_paths(8, 20_000)])
    assert abs(inc.mean()) <= 3 * inc.std(ddof=1) / math.sqrt(inc.size)
