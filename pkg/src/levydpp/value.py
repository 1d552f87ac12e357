"""Monte Carlo revenue and value estimates, modulus of continuity, partitions.

All estimators use common random numbers: path ``k`` of an experiment with
base seed ``seed`` is always driven by the same noise, whichever policy or
truncation level is being evaluated.  Sums go through :func:`math.fsum`, so
estimates do not depend on accumulation order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .control import ActionSet, ControlPolicy
from .dynamics import BatchPaths, CoefficientSet, NoiseBatch, integrate_batch, pack_noise, DEFAULT_GUARD
from .levy_noise import InvalidInput, LevyMeasureSpec, NoiseSampler, rng_for, uniform_grid


class EstimationFailed(RuntimeError):
    """Every simulated path diverged."""


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Running reward ``f(t, x, u)`` and terminal reward ``h(x)``.

    Both are called on arrays: ``t`` of shape ``(n,)``, ``x`` of shape
    ``(n, d)``, ``u`` of shape ``(n, l)``; they return shape ``(n,)``.
    """

    f: Callable
    h: Callable
    f_bound: float
    h_bound: float
    f_lip: Optional[float] = None
    h_lip: Optional[float] = None
    name: str = ""

    def bound(self, horizon: float) -> float:
        """Sup-norm bound ``horizon * f_bound + h_bound`` on any revenue."""
        return horizon * self.f_bound + self.h_bound

    def check_bounds(self, actions: ActionSet, d: int, radius: float, T: float,
                     sample_count: int = 2000, seed: int = 0) -> bool:
        rng = rng_for(seed)
        t = rng.uniform(0.0, T, sample_count)
        x = rng.uniform(-radius, radius, (sample_count, d))
        u = actions.points[rng.integers(len(actions), size=sample_count)]
        return bool(np.all(np.abs(self.f(t, x, u)) <= self.f_bound) and np.all(np.abs(self.h(x)) <= self.h_bound))


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    std_error: float
    n_paths: int
    M: Optional[float] = None
    diverged_count: int = 0

    def as_row(self) -> dict:
        return dict(mean=self.mean, std_error=self.std_error, n_paths=self.n_paths,
                    M=self.M, diverged=self.diverged_count)


def estimate_from_samples(samples: np.ndarray, M: Optional[float] = None, diverged: int = 0) -> ValueEstimate:
    """Mean and standard error of finite samples, order independent."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n == 0:
        raise EstimationFailed("no finite samples left to estimate from")
    mean = math.fsum(x.tolist()) / n
    if n > 1:
        var = math.fsum(((x - mean) ** 2).tolist()) / (n - 1)
        se = math.sqrt(var / n)
    else:
        se = math.nan
    return ValueEstimate(mean=mean, std_error=se, n_paths=n, M=M, diverged_count=diverged)


# ---------------------------------------------------------------------------
# simulation plumbing
# ---------------------------------------------------------------------------


def sample_batch(spec: LevyMeasureSpec, m: int, s: float, T: float, n_steps: int,
                 seed: int, n_paths: int, key: tuple = (), base_grid=None) -> NoiseBatch:
    """Pack ``n_paths`` realizations on ``[s, T]``.

    ``base_grid`` (a grid on some ``[s0, T]``) restricts to its points after
    ``s``, so restarts line up with the original time grid.
    """
    if base_grid is not None:
        base_grid = np.asarray(base_grid, dtype=float)
        grid = np.concatenate(([s], base_grid[base_grid > s]))
    else:
        grid = uniform_grid(s, T, n_steps)
    sampler = NoiseSampler(spec, m, s, T, grid)
    return pack_noise(sampler.sample_paths(seed, n_paths, *key))


def interval_rewards(paths: BatchPaths, cost: CostSpec) -> np.ndarray:
    """Trapezoid contribution of each interval, ``f`` taken at left limits."""
    nb = paths.noise
    i0 = nb.interval_starts
    t0, t1 = nb.grid_t[i0], nb.grid_t[i0 + 1]
    u = paths.controls[:, None]
    f0 = cost.f(t0, paths.values[i0][:, None], u)
    f1 = cost.f(t1, paths.left[i0 + 1][:, None], u)
    return 0.5 * (t1 - t0) * (f0 + f1)


def _segment_sums(contrib: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    out = np.zeros(ptr.size - 1)
    nonempty = ptr[1:] > ptr[:-1]
    if contrib.size:
        sums = np.add.reduceat(contrib, ptr[:-1][nonempty])
        out[nonempty] = sums
    return out


def running_reward(paths: BatchPaths, cost: CostSpec, stop_index: Optional[np.ndarray] = None,
                   contrib: Optional[np.ndarray] = None) -> np.ndarray:
    """``int_s^tau f dt`` per path; ``stop_index`` is the local grid index of ``tau``."""
    nb = paths.noise
    if contrib is None:
        contrib = interval_rewards(paths, cost)
    iptr = nb.interval_ptr
    if stop_index is not None:
        local = np.arange(contrib.size) - np.repeat(iptr[:-1], np.diff(iptr))
        stop_rep = np.repeat(np.asarray(stop_index), np.diff(iptr))
        contrib = np.where(local < stop_rep, contrib, 0.0)
    return _segment_sums(contrib, iptr)


def path_revenues(paths: BatchPaths, cost: CostSpec) -> np.ndarray:
    """Per-path ``int f dt + h(X_T)``; NaN on diverged paths."""
    total = running_reward(paths, cost) + cost.h(paths.terminal[:, None])
    return np.where(paths.diverged, np.nan, total)


def stop_values(paths: BatchPaths, stop_index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(tau, X_tau)`` per path from local grid indices."""
    flat = paths.noise.grid_ptr[:-1] + np.asarray(stop_index)
    return paths.noise.grid_t[flat], paths.values[flat]


# ---------------------------------------------------------------------------
# revenue and value
# ---------------------------------------------------------------------------


@dataclass
class FamilyResult:
    estimates: list
    samples: np.ndarray          # (policies, paths), NaN where diverged
    best_index: int
    policies: list = field(default_factory=list)

    @property
    def best(self) -> ValueEstimate:
        return self.estimates[self.best_index]

    @property
    def best_policy(self):
        return self.policies[self.best_index]

    def per_path_max(self) -> np.ndarray:
        return np.max(self.samples, axis=0)


def revenue_on(noise: NoiseBatch, policy: ControlPolicy, coeffs: CoefficientSet, cost: CostSpec,
               x, spec: Optional[LevyMeasureSpec] = None, M: Optional[float] = None,
               guard: float = DEFAULT_GUARD) -> np.ndarray:
    paths = integrate_batch(coeffs, policy, noise, x, M=M, spec=spec, guard=guard)
    return path_revenues(paths, cost)


def _estimate(samples: np.ndarray, M) -> ValueEstimate:
    ok = np.isfinite(samples)
    div = int(samples.size - ok.sum())
    if not ok.any():
        raise EstimationFailed(f"all {samples.size} paths diverged")
    return estimate_from_samples(samples[ok], M=M, diverged=div)


def revenue(policy: ControlPolicy, coeffs: CoefficientSet, cost: CostSpec, spec: LevyMeasureSpec,
            s: float, x, T: float, n_paths: int, seed: int, M: Optional[float] = None,
            n_steps: int = 256, guard: float = DEFAULT_GUARD, noise: Optional[NoiseBatch] = None) -> ValueEstimate:
    """Monte Carlo estimate of the (truncated, if ``M`` is set) revenue functional."""
    if n_paths < 2:
        raise InvalidInput("n_paths must be at least 2")
    if noise is None:
        noise = sample_batch(spec, coeffs.m, s, T, n_steps, seed, n_paths)
    return _estimate(revenue_on(noise, policy, coeffs, cost, x, spec, M, guard), M)


def evaluate_family(policies: Sequence[ControlPolicy], coeffs: CoefficientSet, cost: CostSpec,
                    spec: LevyMeasureSpec, s: float, x, T: float, n_paths: int, seed: int,
                    M: Optional[float] = None, n_steps: int = 256, guard: float = DEFAULT_GUARD,
                    noise: Optional[NoiseBatch] = None) -> FamilyResult:
    """Revenue of every policy on the same noise; argmax with first-index ties."""
    policies = list(policies)
    if not policies:
        raise InvalidInput("policy family is empty")
    if n_paths < 2:
        raise InvalidInput("n_paths must be at least 2")
    if noise is None:
        noise = sample_batch(spec, coeffs.m, s, T, n_steps, seed, n_paths)
    samples = np.stack([revenue_on(noise, p, coeffs, cost, x, spec, M, guard) for p in policies])
    estimates = [_estimate(row, M) for row in samples]
    means = [e.mean for e in estimates]
    best = int(np.argmax(means))
    return FamilyResult(estimates=estimates, samples=samples, best_index=best, policies=policies)


def value(policy_family, coeffs, cost, spec, s, x, T, n_paths, seed, M=None, n_steps=256,
          guard=DEFAULT_GUARD, noise=None):
    """``(estimate, maximizing policy)`` over a finite family."""
    res = evaluate_family(policy_family, coeffs, cost, spec, s, x, T, n_paths, seed, M, n_steps, guard, noise)
    return res.best, res.best_policy


# ---------------------------------------------------------------------------
# modulus of continuity
# ---------------------------------------------------------------------------


def modulus(cost: CostSpec, alpha: float, beta: float, sample_count: int, actions: ActionSet,
            T: float = 1.0, d: int = 1, seed: int = 0) -> float:
    """Sampled lower bound on the joint modulus of continuity of ``f`` and ``h``.

    Pair separations are drawn independently of ``alpha`` and pairs farther
    apart than ``alpha`` are discarded, so for a fixed seed the sampled set
    grows with ``alpha`` and the estimate is nondecreasing in it.
    """
    if not (alpha > 0 and beta > 0):
        raise InvalidInput("alpha and beta must be positive")
    rng = rng_for(seed)
    g = rng.standard_normal((sample_count, d))
    x = g / np.linalg.norm(g, axis=1, keepdims=True) * (beta * rng.random((sample_count, 1)) ** (1.0 / d))
    e = rng.standard_normal((sample_count, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    sep = 2.0 * beta * rng.random(sample_count)
    xh = x + sep[:, None] * e
    t = rng.uniform(0.0, T, sample_count)
    u = actions.points[rng.integers(len(actions), size=sample_count)]
    keep = (sep <= alpha) & (np.linalg.norm(xh, axis=1) <= beta)
    if not keep.any():
        return 0.0
    x, xh, t, u = x[keep], xh[keep], t[keep], u[keep]
    osc = np.abs(cost.f(t, x, u) - cost.f(t, xh, u)) + np.abs(cost.h(x) - cost.h(xh))
    return float(np.max(osc))


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    """Axis-aligned boxes covering ``[-beta, beta]^d``, ``n`` per axis."""

    lower: np.ndarray          # (cells, d)
    upper: np.ndarray
    n: int
    side: float
    diameter_bound: float
    beta: float

    def __len__(self):
        return self.lower.shape[0]

    def locate(self, x) -> np.ndarray:
        """Cell index of each row of ``x``; -1 outside the covered box."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        edges = -self.beta + self.side * np.arange(self.n + 1)
        edges[-1] = self.beta
        # bisect on the stored edges; floor((x + beta) / side) misplaces points next to an edge
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, self.n - 1)
        inside = np.all(np.abs(x) <= self.beta, axis=1)
        flat = np.zeros(x.shape[0], dtype=int)
        for k in range(x.shape[1]):
            flat = flat * self.n + idx[:, k]
        return np.where(inside, flat, -1)


def make_partition(beta: float, alpha: float, p: float, epsilon: float, d: int = 1, cap: int = 100_000) -> Partition:
    """Boxes of side ``<= alpha * epsilon**(1/p) / sqrt(d)`` covering the ``beta``-ball.

    Any two points of one box are then at most ``alpha * epsilon**(1/p)`` apart.
    """
    if not (alpha > 0 and beta > 0 and epsilon > 0):
        raise InvalidInput("alpha, beta and epsilon must be positive")
    diam = alpha * epsilon ** (1.0 / p)
    max_side = diam / math.sqrt(d)
    n = int(math.ceil(2 * beta / max_side - 1e-12))
    if n ** d > cap:
        raise InvalidInput(f"partition needs {n ** d} cells, above the cap of {cap}")
    side = 2 * beta / n
    edges = -beta + side * np.arange(n + 1)
    edges[-1] = beta
    lo, hi = [], []
    for cell in itertools.product(range(n), repeat=d):
        lo.append([edges[c] for c in cell])
        hi.append([edges[c + 1] for c in cell])
    return Partition(lower=np.array(lo), upper=np.array(hi), n=n, side=side, diameter_bound=diam, beta=beta)
