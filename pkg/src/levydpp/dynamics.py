"""Jump-adapted Euler integration of the controlled SDE and its truncation.

Every jump time is a grid point.  Between grid points the scheme applies
drift, diffusion and the small-jump compensator; at a jump time it applies
``gamma(t, X_{t-}, u_t, eta)``.  The truncated scheme runs the very same
operations but skips the state update for marks with ``|eta| >= M``, so both
paths agree bit-for-bit up to (and at the left limit of) ``tau_M``.

Two execution routes exist.  :func:`integrate` works for any coefficient set
and any :class:`~levydpp.control.ControlPolicy`.  :func:`integrate_batch`
packs many realizations and runs the compiled kernel when the coefficients
are affine in ``(x, u)``, the state is scalar and the policy is tabular; the
two routes produce identical numbers on the problems they share.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .control import ActionSet, ControlPolicy, PathHistory, TabularPolicy
from .levy_noise import (
    InvalidInput, LevyMeasureSpec, NoiseRealization, rng_for, small_jump_compensator,
)

DEFAULT_GUARD = 1e12


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineCoefficients:
    """Scalar coefficients affine in ``(x, u)`` with mark-linear jumps.

    ``b = b0 + bx x + bu u``, ``sigma = s0 + sx x + su u`` and
    ``gamma = (g0 + gx x + gu u) * eta``.
    """

    b0: float = 0.0
    bx: float = 0.0
    bu: float = 0.0
    s0: float = 0.0
    sx: float = 0.0
    su: float = 0.0
    g0: float = 0.0
    gx: float = 0.0
    gu: float = 0.0

    def as_array(self, m1: float) -> np.ndarray:
        return np.array([self.b0, self.bx, self.bu, self.s0, self.sx, self.su,
                         self.g0, self.gx, self.gu, m1], dtype=float)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients ``b``, ``sigma``, ``gamma`` with declared Lipschitz constants.

    Callables must be reentrant.  ``gamma_matrix(t, x, u)``, when given,
    declares ``gamma(t, x, u, eta) = gamma_matrix(t, x, u) @ eta``, which lets
    the compensator use the band's first moment instead of quadrature.
    """

    d: int
    m: int
    ell: int
    b: Callable
    sigma: Callable
    gamma: Callable
    lip_C: float
    lip_CM: Callable[[float], float]
    gamma_matrix: Optional[Callable] = None
    affine: Optional[AffineCoefficients] = None
    name: str = ""


def affine_coefficients(u_bound: float = 1.0, name: str = "", **kw) -> CoefficientSet:
    """Scalar :class:`CoefficientSet` backed by :class:`AffineCoefficients`."""
    a = AffineCoefficients(**kw)

    def b(t, x, u):
        return np.array([a.b0 + a.bx * x[0] + a.bu * u[0]])

    def sigma(t, x, u):
        return np.array([[a.s0 + a.sx * x[0] + a.su * u[0]]])

    def gmat(t, x, u):
        return np.array([[a.g0 + a.gx * x[0] + a.gu * u[0]]])

    def gamma(t, x, u, eta):
        return gmat(t, x, u) @ np.atleast_1d(eta)

    cm = max(abs(a.gx), abs(a.g0) + abs(a.gu) * u_bound)
    return CoefficientSet(
        d=1, m=1, ell=1, b=b, sigma=sigma, gamma=gamma,
        lip_C=abs(a.bx) + abs(a.sx), lip_CM=lambda M: cm,
        gamma_matrix=gmat, affine=a, name=name,
    )


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------


@dataclass
class StatePath:
    time_grid: np.ndarray
    values: np.ndarray          # (n, d), value after any jump at that time
    left_limits: np.ndarray     # (n, d), value before any jump at that time
    controls: np.ndarray        # (n-1, l), action on (t_i, t_{i+1}]
    jump_times: np.ndarray
    jump_marks: np.ndarray
    jump_controls: np.ndarray   # (events, l), action at the jump (sees X_{t-})
    applied: np.ndarray         # (events,) bool
    diverged: bool = False
    M: Optional[float] = None

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def event_indices(self) -> np.ndarray:
        return np.searchsorted(self.time_grid, self.jump_times)

    def jump_left_limits(self) -> np.ndarray:
        return self.left_limits[self.event_indices()]

    def value_at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.time_grid, t))
        if i >= len(self.time_grid) or self.time_grid[i] != t:
            raise InvalidInput(f"{t} is not a grid point of the path")
        return self.values[i]

    def identical_to(self, other: "StatePath") -> bool:
        """Bit-exact equality of grid, values, left limits and controls."""
        return (
            np.array_equal(self.time_grid, other.time_grid)
            and _same_bits(self.values, other.values)
            and _same_bits(self.left_limits, other.left_limits)
            and _same_bits(self.controls, other.controls)
        )


def _same_bits(a, b) -> bool:
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# general integrator
# ---------------------------------------------------------------------------


def _prepare_noise(noise: NoiseRealization, s: float, T: float) -> NoiseRealization:
    if noise.s != s:
        noise = noise.restrict(s)
    if noise.T != T:
        raise InvalidInput(f"noise ends at {noise.T}, horizon is {T}")
    return noise


def _compensator_fn(coeffs: CoefficientSet, spec: Optional[LevyMeasureSpec]):
    if spec is None:
        return None
    comp = small_jump_compensator(spec)
    if comp.is_zero:
        return None
    if coeffs.gamma_matrix is not None:
        m1 = comp.first_moment
        return lambda t, x, u: coeffs.gamma_matrix(t, x, u) @ m1
    return lambda t, x, u: np.array(
        [comp.integrate(lambda eta, k=k: coeffs.gamma(t, x, u, np.atleast_1d(eta))[k]) for k in range(coeffs.d)]
    )


def integrate(
    coeffs: CoefficientSet,
    policy: ControlPolicy,
    noise: NoiseRealization,
    s: float,
    x,
    T: float,
    M: Optional[float] = None,
    spec: Optional[LevyMeasureSpec] = None,
    guard: float = DEFAULT_GUARD,
) -> StatePath:
    """Integrate on ``noise`` from ``(s, x)`` to ``T``.

    ``spec`` supplies the small-jump compensator (and the Gaussian remainder
    scale); omit it for noise without a simulated small-jump band.  With ``M``
    set, marks with ``|eta| >= M`` are recorded but not applied.
    """
    noise = _prepare_noise(noise, s, T)
    x = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    if x.shape != (coeffs.d,):
        raise InvalidInput(f"initial state has shape {x.shape}, expected ({coeffs.d},)")
    if noise.brownian_increments.shape[1] != coeffs.m:
        raise InvalidInput("Brownian dimension of the noise does not match the coefficients")
    Mv = math.inf if M is None else float(M)
    comp = _compensator_fn(coeffs, spec)
    rem_scale = 0.0
    if noise.remainder_increments is not None and spec is not None:
        rem_scale = math.sqrt(spec.remainder_variance())

    grid = noise.time_grid
    n = grid.size
    d, ell = coeffs.d, coeffs.ell
    values = np.full((n, d), np.nan)
    left = np.full((n, d), np.nan)
    controls = np.full((n - 1, ell), np.nan)
    ev_idx = noise.event_indices()
    n_ev = ev_idx.size
    jump_controls = np.full((n_ev, ell), np.nan)
    applied = np.zeros(n_ev, dtype=bool)
    norms = noise.jump_norms
    values[0] = left[0] = x
    hist = PathHistory(s, x, T)
    diverged = False
    e = 0
    for i in range(n - 1):
        t0, t1 = grid[i], grid[i + 1]
        dt = t1 - t0
        u = np.atleast_1d(policy.evaluate(t1, hist))
        drift = coeffs.b(t0, x, u)
        if comp is not None:
            drift = drift - comp(t0, x, u)
        xn = x + drift * dt + coeffs.sigma(t0, x, u) @ noise.brownian_increments[i]
        if rem_scale:
            xn = xn + (coeffs.gamma_matrix(t0, x, u) * rem_scale) @ noise.remainder_increments[i]
        left[i + 1] = xn
        controls[i] = u
        hist.record(t1, xn, xn)
        while e < n_ev and ev_idx[e] == i + 1:
            uj = np.atleast_1d(policy.evaluate(t1, hist))
            jump_controls[e] = uj
            if norms[e] < Mv:
                xn = xn + coeffs.gamma(t1, xn, uj, noise.jump_marks[e])
                applied[e] = True
            hist.record_jump(t1, norms[e])
            e += 1
        hist.values[-1] = xn
        values[i + 1] = xn
        x = xn
        if not np.all(np.abs(x) <= guard):
            diverged = True
            values[i + 2:] = np.nan
            left[i + 2:] = np.nan
            controls[i + 1:] = np.nan
            break
    return StatePath(
        time_grid=grid, values=values, left_limits=left, controls=controls,
        jump_times=noise.jump_times, jump_marks=noise.jump_marks,
        jump_controls=jump_controls, applied=applied, diverged=diverged, M=M,
    )


def integrate_truncated(coeffs, policy, noise, s, x, T, M: float, spec=None, guard=DEFAULT_GUARD) -> StatePath:
    if M < 1.0:
        raise InvalidInput(f"truncation level must be >= 1, got {M}")
    return integrate(coeffs, policy, noise, s, x, T, M=M, spec=spec, guard=guard)


# ---------------------------------------------------------------------------
# batched route
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class NoiseBatch:
    """Realizations packed into flat arrays (one CSR block per path)."""

    realizations: list
    grid_ptr: np.ndarray
    grid_t: np.ndarray
    dw: np.ndarray
    rem: np.ndarray
    ev_ptr: np.ndarray
    ev_idx: np.ndarray
    ev_mark: np.ndarray
    ev_norm: np.ndarray
    _interval_index: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.realizations)

    @property
    def interval_starts(self) -> np.ndarray:
        """Flat index (into ``grid_t``) of the left end of every interval."""
        if self._interval_index is None:
            mask = np.ones(self.grid_t.size, dtype=bool)
            mask[self.grid_ptr[1:] - 1] = False
            self._interval_index = np.flatnonzero(mask)
        return self._interval_index

    @property
    def interval_ptr(self) -> np.ndarray:
        return self.grid_ptr - np.arange(self.grid_ptr.size)


def pack_noise(realizations: Sequence[NoiseRealization]) -> NoiseBatch:
    reals = list(realizations)
    if not reals:
        raise InvalidInput("empty noise batch")
    q = reals[0].jump_marks.shape[1]
    sizes = np.array([r.time_grid.size for r in reals], dtype=np.int64)
    grid_ptr = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
    ev_sizes = np.array([r.jump_times.size for r in reals], dtype=np.int64)
    ev_ptr = np.concatenate(([0], np.cumsum(ev_sizes))).astype(np.int64)
    grid_t = np.concatenate([r.time_grid for r in reals])
    dw = np.concatenate([r.brownian_increments[:, 0] for r in reals]) if reals[0].brownian_increments.shape[1] else np.zeros(int(sizes.sum() - len(reals)))
    if reals[0].remainder_increments is not None:
        rem = np.concatenate([r.remainder_increments[:, 0] for r in reals])
    else:
        rem = np.zeros(0)
    ev_idx = np.concatenate([r.event_indices() for r in reals]).astype(np.int64) if ev_ptr[-1] else np.zeros(0, np.int64)
    if ev_ptr[-1]:
        marks = np.concatenate([r.jump_marks for r in reals])
        ev_mark = marks[:, 0] if q == 1 else np.full(marks.shape[0], np.nan)
        ev_norm = np.linalg.norm(marks, axis=1)
    else:
        ev_mark = np.zeros(0)
        ev_norm = np.zeros(0)
    return NoiseBatch(reals, grid_ptr, grid_t, dw, rem, ev_ptr, ev_idx, ev_mark, ev_norm)


@dataclass(eq=False)
class BatchPaths:
    noise: NoiseBatch
    values: np.ndarray      # flat, aligned with noise.grid_t
    left: np.ndarray
    controls: np.ndarray    # flat, one per interval
    jump_controls: np.ndarray
    applied: np.ndarray
    diverged: np.ndarray    # bool per path
    M: Optional[float] = None

    def __len__(self):
        return len(self.noise)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[self.noise.grid_ptr[1:] - 1]

    def path(self, b: int) -> StatePath:
        nb = self.noise
        o, o2 = nb.grid_ptr[b], nb.grid_ptr[b + 1]
        w, w2 = o - b, o2 - b - 1
        e, e2 = nb.ev_ptr[b], nb.ev_ptr[b + 1]
        r = nb.realizations[b]
        return StatePath(
            time_grid=nb.grid_t[o:o2], values=self.values[o:o2, None], left_limits=self.left[o:o2, None],
            controls=self.controls[w:w2, None], jump_times=r.jump_times, jump_marks=r.jump_marks,
            jump_controls=self.jump_controls[e:e2, None], applied=self.applied[e:e2].astype(bool),
            diverged=bool(self.diverged[b]), M=self.M,
        )


def kernel_eligible(coeffs: CoefficientSet, policy: ControlPolicy, spec: Optional[LevyMeasureSpec]) -> bool:
    return (
        coeffs.affine is not None and coeffs.d == 1 and coeffs.m == 1 and coeffs.ell == 1
        and isinstance(policy, TabularPolicy) and policy.table.shape[2] == 1
        and (spec is None or spec.jump_dim == 1)
    )


def integrate_batch(
    coeffs: CoefficientSet,
    policy: ControlPolicy,
    noise: NoiseBatch,
    x0,
    M: Optional[float] = None,
    spec: Optional[LevyMeasureSpec] = None,
    guard: float = DEFAULT_GUARD,
    kernel=None,
) -> BatchPaths:
    """Integrate every packed realization from its own start time.

    ``x0`` is a scalar or one initial state per path.  Uses the compiled
    kernel when eligible, otherwise loops over :func:`integrate`.
    """
    B = len(noise)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (B,)).copy()
    Mv = math.inf if M is None else float(M)
    if kernel_eligible(coeffs, policy, spec):
        comp = small_jump_compensator(spec) if spec is not None else None
        m1 = float(comp.first_moment[0]) if comp is not None and not comp.is_zero else 0.0
        rem_scale = math.sqrt(spec.remainder_variance()) if (spec is not None and noise.rem.size) else 0.0
        nt, ni, ne = noise.grid_t.size, noise.grid_t.size - B, noise.ev_idx.size
        values, left = np.empty(nt), np.empty(nt)
        controls, jump_controls = np.empty(ni), np.full(ne, np.nan)
        applied, diverged = np.zeros(ne, dtype=np.int8), np.zeros(B, dtype=np.int8)
        fn = kernel or _kernels.jump_euler_affine
        fn(
            noise.grid_ptr, noise.grid_t, noise.dw, noise.rem if noise.rem.size else np.zeros(1),
            noise.ev_ptr, noise.ev_idx, noise.ev_mark, x0,
            coeffs.affine.as_array(m1), rem_scale,
            np.asarray(policy.breaks, dtype=float), np.asarray(policy.edges, dtype=float),
            np.ascontiguousarray(policy.table[:, :, 0].ravel()),
            Mv, float(guard), values, left, controls, jump_controls, applied, diverged,
        )
        return BatchPaths(noise, values, left, controls, jump_controls, applied.astype(bool), diverged.astype(bool), M)

    if coeffs.d != 1 or coeffs.ell != 1:
        raise InvalidInput("batched integration stores scalar paths; use integrate() for vector states")
    parts = [
        integrate(coeffs, policy, r, r.s, x0[b], r.T, M=M, spec=spec, guard=guard)
        for b, r in enumerate(noise.realizations)
    ]
    return BatchPaths(
        noise,
        np.concatenate([p.values[:, 0] for p in parts]),
        np.concatenate([p.left_limits[:, 0] for p in parts]),
        np.concatenate([p.controls[:, 0] for p in parts]),
        np.concatenate([p.jump_controls[:, 0] for p in parts]) if noise.ev_idx.size else np.zeros(0),
        np.concatenate([p.applied for p in parts]) if noise.ev_idx.size else np.zeros(0, bool),
        np.array([p.diverged for p in parts]),
        M,
    )


# ---------------------------------------------------------------------------
# coefficient bound spot check
# ---------------------------------------------------------------------------


@dataclass
class CoefficientBoundsReport:
    passed: bool
    max_ratio: dict
    violations: list
    sample_count: int

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        ratios = ", ".join(f"{k}={v:.4g}" for k, v in self.max_ratio.items())
        return f"coefficient bound spot check: {status} ({ratios}; {len(self.violations)} violations)"


def check_coefficient_bounds(
    coeffs: CoefficientSet,
    sample_count: int,
    radius: float,
    M_list: Sequence[float],
    action_set: Optional[ActionSet] = None,
    T: float = 1.0,
    q: int = 1,
    seed: int = 0,
    rtol: float = 1e-9,
) -> CoefficientBoundsReport:
    """Sample ``(t, x1, x2, u, eta)`` and test the Lipschitz and growth bounds.

    Ratios are observed/declared; anything above ``1 + rtol`` is a violation.
    """
    if sample_count <= 0:
        raise InvalidInput("sample_count must be positive")
    rng = rng_for(seed)
    acts = action_set.points if action_set is not None else np.zeros((1, coeffs.ell))
    d = coeffs.d
    worst = {"drift_diffusion_lipschitz": 0.0}
    for M in M_list:
        worst[f"jump_lipschitz[M={M:g}]"] = 0.0
        worst[f"jump_growth[M={M:g}]"] = 0.0
    violations = []

    def note(key, ratio, sample):
        if ratio > worst[key]:
            worst[key] = ratio
        if ratio > 1.0 + rtol:
            violations.append((key, ratio, sample))

    for _ in range(sample_count):
        t = rng.uniform(0.0, T)
        u = acts[rng.integers(len(acts))]
        x1 = rng.uniform(-radius, radius, d)
        x2 = rng.uniform(-radius, radius, d)
        dx = np.linalg.norm(x1 - x2)
        if dx == 0:
            continue
        lhs = np.linalg.norm(coeffs.sigma(t, x1, u) - coeffs.sigma(t, x2, u)) + np.linalg.norm(
            coeffs.b(t, x1, u) - coeffs.b(t, x2, u))
        bound = coeffs.lip_C * dx
        note("drift_diffusion_lipschitz", lhs / bound if bound > 0 else (math.inf if lhs > 0 else 0.0),
             dict(t=t, x1=x1, x2=x2, u=u))
        for M in M_list:
            cm = coeffs.lip_CM(M)
            r = rng.uniform(0.0, M)
            if r == 0:
                continue
            g = rng.standard_normal(q)
            eta = r * g / np.linalg.norm(g)
            l2 = np.linalg.norm(coeffs.gamma(t, x1, u, eta) - coeffs.gamma(t, x2, u, eta))
            b2 = cm * r * dx
            note(f"jump_lipschitz[M={M:g}]", l2 / b2 if b2 > 0 else (math.inf if l2 > 0 else 0.0),
                 dict(t=t, x1=x1, x2=x2, u=u, eta=eta))
            l3 = np.linalg.norm(coeffs.gamma(t, x1, u, eta))
            b3 = cm * r * (1.0 + np.linalg.norm(x1))
            note(f"jump_growth[M={M:g}]", l3 / b3 if b3 > 0 else (math.inf if l3 > 0 else 0.0),
                 dict(t=t, x=x1, u=u, eta=eta))
    return CoefficientBoundsReport(passed=not violations, max_ratio=worst, violations=violations, sample_count=sample_count)


# name used by the published API
verify_assumption1 = check_coefficient_bounds
