import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levydpp import _kernels
from levydpp.control import ActionSet, constant, lattice_feedback, piecewise_constant
from levydpp.dynamics import (
    CoefficientSet, affine_coefficients, integrate, integrate_batch, integrate_truncated, pack_noise,
    check_coefficient_bounds,
)
from levydpp.levy_noise import (
    InvalidInput, LevyMeasureSpec, NoiseRealization, NoiseSampler, PowerLaw, first_exceed_time,
    sample_noise, uniform_grid,
)

HEAVY = LevyMeasureSpec(large_part=PowerLaw(1.0, 0.5))


def hand_noise(events, n=4, T=1.0):
    times = np.array([t for t, _ in events], dtype=float)
    marks = np.array([m for _, m in events], dtype=float).reshape(-1, 1)
    grid = np.unique(np.concatenate((uniform_grid(0.0, T, n), times)))
    return NoiseRealization(seed=0, time_grid=grid, brownian_increments=np.zeros((grid.size - 1, 1)),
                            jump_times=times, jump_marks=marks)


def test_zero_coefficients_keep_state():
    c = affine_coefficients()
    r = sample_noise(HEAVY, 1, 0.0, 1.0, uniform_grid(0, 1, 8), seed=1)
    p = integrate(c, constant(1.0), r, 0.0, 2.5, 1.0)
    assert np.all(p.values == 2.5)
    assert not p.diverged


def test_constant_drift_is_exact():
    c = affine_coefficients(bu=1.0)
    r = sample_noise(LevyMeasureSpec(), 1, 0.0, 1.0, uniform_grid(0, 1, 16), seed=1)
    p = integrate(c, piecewise_constant([0.5], [1.0, -1.0]), r, 0.0, 0.0, 1.0)
    assert p.value_at(0.5)[0] == pytest.approx(0.5)
    assert p.terminal[0] == pytest.approx(0.0, abs=1e-15)


def test_linear_ode_converges_first_order():
    # x' = -x from 1: exact exp(-1)
    c = affine_coefficients(bx=-1.0)
    errs = []
    for n in [32, 64, 128, 256]:
        r = sample_noise(LevyMeasureSpec(), 1, 0.0, 1.0, uniform_grid(0, 1, n), seed=0)
        errs.append(abs(integrate(c, constant(0.0), r, 0.0, 1.0, 1.0).terminal[0] - math.exp(-1)))
    rates = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(0.9 < q < 1.1 for q in rates)


def test_pure_jump_path_sums_marks():
    c = affine_coefficients(g0=1.0)
    r = hand_noise([(0.3, 1.5), (0.7, -5.0)])
    p = integrate(c, constant(0.0), r, 0.0, 0.0, 1.0)
    assert p.terminal[0] == pytest.approx(-3.5)
    assert p.value_at(0.5)[0] == pytest.approx(1.5)
    assert list(p.jump_left_limits()[:, 0]) == [0.0, 1.5]


def test_truncation_drops_large_mark_only():
    c = affine_coefficients(g0=1.0)
    r = hand_noise([(0.3, 1.5), (0.7, -5.0)])
    p = integrate_truncated(c, constant(0.0), r, 0.0, 0.0, 1.0, M=5.0)
    assert list(p.applied) == [True, False]
    assert p.terminal[0] == pytest.approx(1.5)
    with pytest.raises(InvalidInput):
        integrate_truncated(c, constant(0.0), r, 0.0, 0.0, 1.0, M=0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32), st.sampled_from([1.0, 2.0, 4.0, 16.0]))
def test_truncated_and_full_paths_agree_before_first_exceedance(seed, M):
    c = affine_coefficients(bx=-0.5, bu=1.0, s0=0.3, g0=1.0)
    r = sample_noise(HEAVY, 1, 0.0, 1.0, uniform_grid(0, 1, 32), seed)
    pol = piecewise_constant([0.5], [1.0, -1.0])
    full = integrate(c, pol, r, 0.0, 0.0, 1.0)
    trunc = integrate_truncated(c, pol, r, 0.0, 0.0, 1.0, M)
    tau = first_exceed_time(r, M)
    before = r.time_grid < tau
    at = r.time_grid <= tau
    assert full.values[before].tobytes() == trunc.values[before].tobytes()
    # at the exceedance the truncated value equals the full left limit
    assert full.left_limits[at].tobytes() == trunc.left_limits[at].tobytes()
    if tau <= 1.0:
        i = int(np.searchsorted(r.time_grid, tau))
        assert trunc.values[i, 0] == full.left_limits[i, 0]


def test_restart_from_grid_point_reproduces_tail():
    c = affine_coefficients(bx=-0.5, bu=1.0, s0=0.4, g0=1.0)
    r = sample_noise(HEAVY, 1, 0.0, 1.0, uniform_grid(0, 1, 16), seed=12)
    pol = constant(1.0)
    full = integrate(c, pol, r, 0.0, 0.3, 1.0)
    t = 0.5
    i = int(np.searchsorted(full.time_grid, t))
    tail = integrate(c, pol, r.restrict(t), t, full.values[i], 1.0)
    assert tail.values.tobytes() == full.values[i:].tobytes()


def test_shared_noise_couples_controls():
    c = affine_coefficients(bu=1.0, s0=1.0, g0=1.0)
    r = sample_noise(HEAVY, 1, 0.0, 1.0, uniform_grid(0, 1, 16), seed=2)
    up = integrate(c, constant(1.0), r, 0.0, 0.0, 1.0)
    down = integrate(c, constant(-1.0), r, 0.0, 0.0, 1.0)
    assert up.terminal[0] - down.terminal[0] == pytest.approx(2.0)


def test_lattice_feedback_reads_left_limit():
    # jump at 0.5 from 0 to 3; the action on the jump interval must still see x < 1
    c = affine_coefficients(bu=1.0, g0=1.0)
    r = hand_noise([(0.5, 3.0)], n=2)
    pol = lattice_feedback([], [1.0], np.array([[1.0, -1.0]]))
    p = integrate(c, pol, r, 0.0, 0.0, 1.0)
    assert p.jump_controls[0, 0] == 1.0
    assert list(p.controls[:, 0]) == [1.0, -1.0]


def test_divergence_is_flagged():
    c = affine_coefficients(bx=50.0)
    r = sample_noise(LevyMeasureSpec(), 1, 0.0, 1.0, uniform_grid(0, 1, 8), seed=0)
    p = integrate(c, constant(0.0), r, 0.0, 1.0, 1.0, guard=1e6)
    assert p.diverged
    assert np.isnan(p.terminal[0])


def test_state_shape_mismatch_rejected():
    r = sample_noise(LevyMeasureSpec(), 1, 0.0, 1.0, uniform_grid(0, 1, 8), seed=0)
    with pytest.raises(InvalidInput):
        integrate(affine_coefficients(), constant(0.0), r, 0.0, [0.0, 1.0], 1.0)
    with pytest.raises(InvalidInput):
        integrate(affine_coefficients(), constant(0.0), r, 0.0, 0.0, 2.0)


def test_compensated_small_jumps_keep_mean():
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 0.5, symmetric=False), small_cutoff=0.25)
    c = affine_coefficients(g0=1.0)
    reals = NoiseSampler(spec, 1, 0.0, 1.0, uniform_grid(0, 1, 4)).sample_paths(3, 20_000)
    xt = integrate_batch(c, constant(0.0), pack_noise(reals), 0.0, spec=spec).terminal
    assert abs(xt.mean()) <= 3 * xt.std(ddof=1) / math.sqrt(xt.size)


# -- batch route ------------------------------------------------------------------


def batch_case(seed=5, n=300, M=None):
    spec = LevyMeasureSpec(small_part=PowerLaw(1.0, 1.2, symmetric=False), large_part=PowerLaw(1.0, 0.5),
                           small_cutoff=0.2)
    c = affine_coefficients(bx=-0.5, bu=1.0, s0=0.3, g0=0.5, gx=0.1)
    pol = lattice_feedback([0.5], [0.0], np.array([[1.0, -1.0], [-1.0, 1.0]]))
    reals = NoiseSampler(spec, 1, 0.0, 1.0, uniform_grid(0, 1, 16)).sample_paths(seed, n)
    return c, pol, spec, reals


@pytest.mark.parametrize("M", [None, 2.0])
def test_compiled_and_python_kernels_identical(M):
    c, pol, spec, reals = batch_case(M=M)
    nb = pack_noise(reals)
    a = integrate_batch(c, pol, nb, 0.1, M=M, spec=spec, kernel=_kernels.python_jump_euler_affine)
    b = integrate_batch(c, pol, nb, 0.1, M=M, spec=spec)
    for u, v in [(a.values, b.values), (a.left, b.left), (a.controls, b.controls), (a.applied, b.applied)]:
        assert np.asarray(u).tobytes() == np.asarray(v).tobytes()


def test_batch_matches_single_path_integrator():
    c, pol, spec, reals = batch_case(n=40)
    bp = integrate_batch(c, pol, pack_noise(reals), 0.1, M=4.0, spec=spec)
    for b in range(0, 40, 7):
        single = integrate(c, pol, reals[b], 0.0, 0.1, 1.0, M=4.0, spec=spec)
        assert np.allclose(bp.path(b).values, single.values, rtol=1e-13, atol=1e-13)


def test_backend_reported():
    assert _kernels.BACKEND in ("cython", "python")


# -- coefficient check -----------------------------------------------------------


def test_affine_coefficients_pass_spot_check():
    c = affine_coefficients(bx=-0.5, bu=1.0, s0=1.0, sx=0.2, g0=1.0, gx=0.3)
    rep = check_coefficient_bounds(c, 500, 10.0, [1.0, 4.0], ActionSet.finite_grid([-1.0, 1.0]), seed=1)
    assert rep.passed, str(rep)
    assert "pass" in str(rep)


def test_quadratic_drift_fails_spot_check():
    base = affine_coefficients()
    c = CoefficientSet(d=1, m=1, ell=1, b=lambda t, x, u: x ** 2, sigma=base.sigma, gamma=base.gamma,
                       lip_C=1.0, lip_CM=lambda M: 1.0)
    rep = check_coefficient_bounds(c, 200, 10.0, [1.0], seed=0)
    assert not rep.passed
    assert rep.max_ratio["drift_diffusion_lipschitz"] > 1.0


def test_spot_check_rejects_empty_sample():
    with pytest.raises(InvalidInput):
        check_coefficient_bounds(affine_coefficients(), 0, 1.0, [1.0])


def test_user_drift_and_multiplicative_jumps_pass_spot_check():
    base = affine_coefficients()
    c = CoefficientSet(d=1, m=1, ell=1, b=lambda t, x, u: np.array([u[0] * x[0]]), sigma=base.sigma,
                       gamma=base.gamma, lip_C=1.0, lip_CM=lambda M: 1.0)
    assert check_coefficient_bounds(c, 400, 10.0, [1.0], ActionSet.finite_grid([-1.0, 1.0]), seed=2).passed
    jumps = affine_coefficients(gx=1.0)
    rep = check_coefficient_bounds(jumps, 400, 10.0, [1.0, 2.0, 8.0, 64.0], seed=3)
    assert rep.passed, str(rep)


# -- worked examples ----------------------------------------------------------------


def test_constant_drift_moves_by_rate_times_horizon():
    c = affine_coefficients(b0=0.75)
    r = sample_noise(LevyMeasureSpec(), 1, 0.25, 1.0, uniform_grid(0.25, 1.0, 12), seed=4)
    p = integrate(c, constant(0.0), r, 0.25, -1.0, 1.0)
    assert p.terminal[0] == pytest.approx(-1.0 + 0.75 * 0.75, abs=1e-14)


def test_inactive_truncation_is_bit_identical():
    c = affine_coefficients(bx=-0.3, bu=1.0, g0=1.0)
    r = sample_noise(HEAVY, 1, 0.0, 1.0, uniform_grid(0, 1, 32), seed=11)
    assert r.jump_marks.size > 0
    M = float(np.abs(r.jump_marks).max()) + 1.0
    full = integrate(c, constant(1.0), r, 0.0, 0.5, 1.0)
    trunc = integrate_truncated(c, constant(1.0), r, 0.0, 0.5, 1.0, M=M)
    assert np.array_equal(full.values, trunc.values)
    assert np.all(trunc.applied)


def test_single_large_event_is_dropped_by_truncation():
    c = affine_coefficients(g0=1.0)
    r = hand_noise([(0.5, 10.0)])
    assert integrate_truncated(c, constant(0.0), r, 0.0, 2.0, 1.0, M=5.0).terminal[0] == 2.0
    assert integrate(c, constant(0.0), r, 0.0, 2.0, 1.0).terminal[0] == 12.0
