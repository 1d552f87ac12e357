"""Lévy measures, noise sampling and jump-law quantities.

A Lévy measure is split at ``|eta| = 1`` into a small-jump part (only the
band ``small_cutoff <= |eta| < 1`` is simulated, as a compensated compound
Poisson stream) and a large-jump part (a compound Poisson stream).  All
families have closed-form tail masses so that jump-law checks are exact.

Randomness is counter based: each path gets its own Philox stream keyed by
``path_seed(base_seed, k, ...)``, so results never depend on evaluation order.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate as _quad
from scipy.special import ndtr

# Sentinel returned when no jump exceeds the truncation level.
NEVER = sys.float_info.max


def is_never(t: float) -> bool:
    """True if ``t`` is the no-exceedance sentinel."""
    return t >= NEVER


_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def path_seed(base_seed: int, *key: int) -> int:
    """64-bit seed for path ``key`` of an experiment with ``base_seed``.

    A splitmix64 chain over ``(base_seed, *key)``; the result keys a Philox
    stream, so paths are independent of evaluation order and worker count.
    """
    h = _splitmix64(int(base_seed) & _MASK64)
    for k in key:
        h = _splitmix64(h ^ (int(k) & _MASK64))
    return h


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))


class InvalidInput(ValueError):
    """Raised for malformed grids, measures or thresholds."""


# ---------------------------------------------------------------------------
# measure families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerLaw:
    """Radial density ``c * r**(-1-alpha)``.

    In one dimension a symmetric law puts this density on each sign, so the
    total radial intensity is doubled.  In higher dimension the direction is
    uniform on the sphere and ``c`` is the total radial intensity.
    """

    c: float
    alpha: float
    symmetric: bool = True
    kind: str = field(default="power_law", init=False)

    def __post_init__(self):
        if not self.c > 0:
            raise InvalidInput(f"power_law c must be positive, got {self.c}")
        if not 0 < self.alpha < 2:
            raise InvalidInput(f"power_law alpha must lie in (0, 2), got {self.alpha}")

    def weight(self, q: int) -> float:
        return 2.0 if (q == 1 and self.symmetric) else 1.0

    def radial_mass(self, q: int, lo: float, hi: float = math.inf) -> float:
        """Mass of ``lo <= |eta| < hi``."""
        a = self.alpha
        upper = 0.0 if math.isinf(hi) else hi ** (-a)
        return self.weight(q) * self.c * (lo ** (-a) - upper) / a

    def sample_radii(self, rng, n: int, lo: float, hi: float = math.inf) -> np.ndarray:
        a = self.alpha
        u = rng.random(n)
        lo_a = lo ** (-a)
        hi_a = 0.0 if math.isinf(hi) else hi ** (-a)
        # P(r >= x) proportional to x**-a - hi**-a on [lo, hi)
        return (hi_a + (1.0 - u) * (lo_a - hi_a)) ** (-1.0 / a)


@dataclass(frozen=True)
class PointMasses:
    """Atoms ``(mark, rate)`` with ``|mark| >= 1``."""

    atoms: tuple
    kind: str = field(default="point_masses", init=False)

    def __post_init__(self):
        atoms = tuple((tuple(float(v) for v in np.atleast_1d(mark)), float(rate)) for mark, rate in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        for mark, rate in atoms:
            if np.linalg.norm(mark) < 1.0:
                raise InvalidInput(f"point mass at {mark} lies inside the unit ball")
            if not rate > 0:
                raise InvalidInput(f"point mass rate must be positive, got {rate}")


@dataclass(frozen=True)
class ShiftedLognormal:
    """Total ``rate`` of jumps with ``|eta| = 1 + LogNormal(mu, sigma)``."""

    rate: float
    mu: float = 0.0
    sigma: float = 1.0
    symmetric: bool = True
    kind: str = field(default="lognormal_shifted", init=False)

    def __post_init__(self):
        if not self.rate > 0 or not self.sigma > 0:
            raise InvalidInput("lognormal_shifted needs rate > 0 and sigma > 0")

    def survival(self, r: float) -> float:
        if r <= 1.0:
            return 1.0
        return float(ndtr(-(math.log(r - 1.0) - self.mu) / self.sigma))


LargePart = Union[PowerLaw, PointMasses, ShiftedLognormal]


@dataclass(frozen=True)
class LevyMeasureSpec:
    jump_dim: int = 1
    small_part: Optional[PowerLaw] = None
    large_part: Optional[LargePart] = None
    small_cutoff: float = 0.1
    gaussian_remainder: bool = False

    def __post_init__(self):
        if self.jump_dim < 1:
            raise InvalidInput("jump_dim must be a positive integer")
        if not 0 < self.small_cutoff <= 1:
            raise InvalidInput(f"small_cutoff must lie in (0, 1], got {self.small_cutoff}")
        if self.small_part is not None and not isinstance(self.small_part, PowerLaw):
            raise InvalidInput("small_part must be a power_law or none")
        if isinstance(self.large_part, PointMasses):
            for mark, _ in self.large_part.atoms:
                if len(mark) != self.jump_dim:
                    raise InvalidInput(f"point mass {mark} does not have dimension {self.jump_dim}")
        if self.gaussian_remainder and self.jump_dim != 1:
            raise InvalidInput("gaussian_remainder is only supported for jump_dim = 1")

    # -- analytic quantities -------------------------------------------------

    def small_second_moment(self) -> float:
        """``int_{0<|eta|<1} |eta|^2 nu(d eta)``; finite for every admissible family."""
        if self.small_part is None:
            return 0.0
        p = self.small_part
        return p.weight(self.jump_dim) * p.c / (2.0 - p.alpha)

    def remainder_variance(self) -> float:
        """Second moment of the dropped jumps ``|eta| < small_cutoff`` per unit time."""
        if self.small_part is None:
            return 0.0
        p = self.small_part
        return p.weight(self.jump_dim) * p.c * self.small_cutoff ** (2.0 - p.alpha) / (2.0 - p.alpha)

    def band_rate(self) -> float:
        if self.small_part is None or self.small_cutoff >= 1.0:
            return 0.0
        return self.small_part.radial_mass(self.jump_dim, self.small_cutoff, 1.0)

    def large_rate(self) -> float:
        return _large_tail(self.large_part, self.jump_dim, 1.0)


def _large_tail(part, q: int, M: float) -> float:
    if part is None:
        return 0.0
    if isinstance(part, PowerLaw):
        return part.radial_mass(q, max(M, 1.0))
    if isinstance(part, PointMasses):
        return math.fsum(rate for mark, rate in part.atoms if np.linalg.norm(mark) >= M)
    return part.rate * part.survival(M)


def tail_mass(spec: LevyMeasureSpec, M: float) -> float:
    """``nu({|eta| >= M})`` restricted to the simulated jumps (``M >= small_cutoff``)."""
    if M < spec.small_cutoff:
        raise InvalidInput(f"threshold {M} lies below the small-jump cutoff {spec.small_cutoff}")
    if math.isinf(M):
        return 0.0
    mass = _large_tail(spec.large_part, spec.jump_dim, M)
    if M < 1.0 and spec.small_part is not None:
        mass += spec.small_part.radial_mass(spec.jump_dim, M, 1.0)
    return mass


def prob_exceed_by(spec: LevyMeasureSpec, M: float, horizon: float) -> float:
    """Analytic ``P(tau_M <= s + horizon)``."""
    return -math.expm1(-tail_mass(spec, M) * horizon)


# ---------------------------------------------------------------------------
# compensator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandCompensator:
    """Intensity data for the simulated small-jump band ``[eps, 1)``.

    ``first_moment`` is ``int eta nu(d eta)`` over the band, which is all a
    mark-linear ``gamma`` needs; :meth:`integrate` handles any ``g`` by
    quadrature (one-dimensional marks only).
    """

    spec: LevyMeasureSpec
    first_moment: np.ndarray

    @property
    def is_zero(self) -> bool:
        return self.spec.small_part is None or self.spec.small_cutoff >= 1.0

    def integrate(self, g: Callable[[float], float]) -> float:
        if self.is_zero:
            return 0.0
        if self.spec.jump_dim != 1:
            raise NotImplementedError("band quadrature is implemented for one-dimensional marks")
        p = self.spec.small_part
        eps = self.spec.small_cutoff

        def dens(r):
            return p.c * r ** (-1.0 - p.alpha)

        total, _ = _quad.quad(lambda r: g(r) * dens(r), eps, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)
        if p.symmetric:
            neg, _ = _quad.quad(lambda r: g(-r) * dens(r), eps, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)
            total += neg
        return total


def small_jump_compensator(spec: LevyMeasureSpec) -> BandCompensator:
    q = spec.jump_dim
    m1 = np.zeros(q)
    p = spec.small_part
    if p is not None and spec.small_cutoff < 1.0 and q == 1 and not p.symmetric:
        eps, a = spec.small_cutoff, p.alpha
        if a == 1.0:
            m1[0] = -p.c * math.log(eps)
        else:
            m1[0] = p.c * (1.0 - eps ** (1.0 - a)) / (1.0 - a)
    return BandCompensator(spec=spec, first_moment=m1)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseRealization:
    """One path of driving noise on ``time_grid``.

    ``time_grid`` already contains every jump time, so ``brownian_increments[i]``
    is the increment over ``(time_grid[i], time_grid[i+1]]``.
    """

    seed: int
    time_grid: np.ndarray
    brownian_increments: np.ndarray
    jump_times: np.ndarray
    jump_marks: np.ndarray
    remainder_increments: Optional[np.ndarray] = None

    @property
    def s(self) -> float:
        return float(self.time_grid[0])

    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    @property
    def jump_norms(self) -> np.ndarray:
        return np.linalg.norm(self.jump_marks, axis=1)

    def event_indices(self) -> np.ndarray:
        """Grid index at which each jump event sits."""
        return np.searchsorted(self.time_grid, self.jump_times)

    def restrict(self, t: float) -> "NoiseRealization":
        """Tail of this realization on ``[t, T]``; ``t`` must be a grid point."""
        i = int(np.searchsorted(self.time_grid, t))
        if i >= len(self.time_grid) or self.time_grid[i] != t:
            raise InvalidInput(f"restart time {t} is not a grid point of the realization")
        keep = self.jump_times > t
        rem = None if self.remainder_increments is None else self.remainder_increments[i:]
        return NoiseRealization(
            seed=self.seed,
            time_grid=self.time_grid[i:],
            brownian_increments=self.brownian_increments[i:],
            jump_times=self.jump_times[keep],
            jump_marks=self.jump_marks[keep],
            remainder_increments=rem,
        )


def uniform_grid(s: float, T: float, n_steps: int) -> np.ndarray:
    grid = s + (T - s) * np.arange(n_steps + 1) / n_steps
    grid[-1] = T
    return grid


def restart_grid(base: np.ndarray, t: float) -> np.ndarray:
    """``t`` followed by the points of ``base`` strictly after ``t``."""
    return np.concatenate(([t], base[base > t]))


def _directions(rng, n: int, q: int, symmetric: bool) -> np.ndarray:
    if q == 1:
        if symmetric:
            return np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
        return np.ones((n, 1))
    g = rng.standard_normal((n, q))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _check_grid(grid, s, T):
    grid = np.asarray(grid, dtype=float)
    if not s < T:
        raise InvalidInput(f"need s < T, got s={s}, T={T}")
    if grid.ndim != 1 or grid.size < 2:
        raise InvalidInput("time grid must contain at least two points")
    if np.any(np.diff(grid) <= 0):
        raise InvalidInput("time grid must be strictly increasing")
    if grid[0] != s or grid[-1] != T:
        raise InvalidInput(f"time grid must span [{s}, {T}], got [{grid[0]}, {grid[-1]}]")
    return grid


def sample_noise(
    spec: LevyMeasureSpec,
    m: int,
    s: float,
    T: float,
    grid: Sequence[float],
    seed: int,
) -> NoiseRealization:
    """Draw Brownian increments and jump events on ``[s, T]`` from ``seed``.

    Jumps are drawn first (small band, then the large part) and their times
    are merged into ``grid``; Brownian increments are drawn on the merged grid.
    """
    return NoiseSampler(spec, m, s, T, grid).sample(seed)


class NoiseSampler:
    """Validated, precomputed sampler for many seeds on one grid."""

    def __init__(self, spec: LevyMeasureSpec, m: int, s: float, T: float, grid):
        self.grid = _check_grid(grid, s, T)
        self.spec, self.m, self.s, self.T = spec, int(m), float(s), float(T)
        self.span = self.T - self.s
        self.band_mean = spec.band_rate() * self.span
        lp = spec.large_part
        if isinstance(lp, PointMasses):
            self.large = [(np.asarray(mark), rate * self.span) for mark, rate in lp.atoms]
        elif lp is not None:
            self.large = spec.large_rate() * self.span
        self.use_rem = spec.gaussian_remainder and spec.small_part is not None

    def _times(self, rng, mean):
        n = int(rng.poisson(mean)) if mean > 0 else 0
        # uniform on (s, T]
        return n, self.s + self.span * (1.0 - rng.random(n))

    def sample(self, seed: int) -> NoiseRealization:
        spec, q = self.spec, self.spec.jump_dim
        rng = rng_for(seed)
        times, marks = [], []
        p = spec.small_part
        if p is not None and spec.small_cutoff < 1.0:
            n, t = self._times(rng, self.band_mean)
            if n:
                r = p.sample_radii(rng, n, spec.small_cutoff, 1.0)
                times.append(t)
                marks.append(r[:, None] * _directions(rng, n, q, p.symmetric))
        lp = spec.large_part
        if isinstance(lp, PowerLaw):
            n, t = self._times(rng, self.large)
            if n:
                r = lp.sample_radii(rng, n, 1.0)
                times.append(t)
                marks.append(r[:, None] * _directions(rng, n, q, lp.symmetric))
        elif isinstance(lp, PointMasses):
            for mark, mean in self.large:
                n, t = self._times(rng, mean)
                if n:
                    times.append(t)
                    marks.append(np.tile(mark, (n, 1)))
        elif isinstance(lp, ShiftedLognormal):
            n, t = self._times(rng, self.large)
            if n:
                r = 1.0 + rng.lognormal(lp.mu, lp.sigma, n)
                times.append(t)
                marks.append(r[:, None] * _directions(rng, n, q, lp.symmetric))

        if times:
            jt = np.concatenate(times) if len(times) > 1 else times[0]
            jm = np.concatenate(marks) if len(marks) > 1 else marks[0]
            order = np.argsort(jt, kind="stable")
            jt, jm = jt[order], jm[order]
            full = np.sort(np.concatenate((self.grid, jt)))
            dt = full[1:] - full[:-1]
            if np.any(dt <= 0):
                full = np.unique(full)
                dt = full[1:] - full[:-1]
        else:
            jt, jm = _EMPTY_T, np.empty((0, q))
            full = self.grid
            dt = full[1:] - full[:-1]
        sd = np.sqrt(dt)
        dW = rng.standard_normal((dt.size, self.m)) * sd[:, None]
        rem = rng.standard_normal((dt.size, q)) * sd[:, None] if self.use_rem else None
        return NoiseRealization(
            seed=int(seed), time_grid=full, brownian_increments=dW,
            jump_times=jt, jump_marks=jm, remainder_increments=rem,
        )

    def sample_paths(self, base_seed: int, n_paths: int, *key: int) -> list:
        return [self.sample(path_seed(base_seed, *key, k)) for k in range(n_paths)]


_EMPTY_T = np.empty(0)


def first_exceed_time(noise: NoiseRealization, M: float) -> float:
    """First jump time with ``|eta| >= M``, or :data:`NEVER`."""
    if M < 1.0:
        raise InvalidInput(f"truncation level must be >= 1, got {M}")
    hit = np.flatnonzero(noise.jump_norms >= M)
    return float(noise.jump_times[hit[0]]) if hit.size else NEVER


def first_large_jump_time(noise: NoiseRealization) -> float:
    return first_exceed_time(noise, 1.0)
