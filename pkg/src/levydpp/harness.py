"""Verification checks, each returning a :class:`CheckReport`.

A report is a list of cases.  Every case compares a left and a right side
under one relation (``eq``, ``le`` or ``ge``) with a tolerance made of a
statistical part (a multiple of the combined standard error) plus a declared
deterministic allowance; both parts are stored.  A report passes when all of
its cases do.  Reports built from the same arguments are identical.
"""
from __future__ import annotations

import itertools
import math
import sys
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .control import TabularPolicy
from .dp import (
    DiscreteProblem, MarkovPolicy, brute_force_value, chain_dpp_monte_carlo, dp_oracle, dpp_rhs_exact,
    markov_policies,
)
from .dynamics import NoiseBatch, integrate_batch, pack_noise
from .levy_noise import (
    InvalidInput, LevyMeasureSpec, NoiseSampler, first_exceed_time, is_never, prob_exceed_by, tail_mass,
    uniform_grid,
)
from .problems import Problem
from .value import (
    estimate_from_samples, evaluate_family, make_partition, modulus, path_revenues,
    running_reward, sample_batch, stop_values,
)

OUTER, INNER, FRESH = 0, 1, 2


class NestedBudgetExceeded(RuntimeError):
    def __init__(self, needed: int, cap: int):
        super().__init__(f"nested simulation needs {needed} inner paths, above the budget of {cap}")
        self.needed, self.cap = needed, cap


@dataclass(frozen=True)
class Gate:
    """Tolerance ``se_mult * SE + delta_dt (+ nested allowance)``."""

    se_mult: float = 3.0
    delta_dt: Optional[float] = None   # default 0.01 * f_bound

    def allowance(self, f_bound: float) -> float:
        return 0.01 * f_bound if self.delta_dt is None else float(self.delta_dt)


@dataclass
class Case:
    label: str
    relation: str          # "eq": |lhs-rhs| <= tol, "le": lhs <= rhs + tol, "ge": lhs >= rhs - tol
    lhs: float
    rhs: float
    lhs_se: float = 0.0
    rhs_se: float = 0.0
    statistical: float = 0.0
    allowance: float = 0.0
    nested: float = 0.0
    passed: bool = False

    @property
    def tolerance(self) -> float:
        return self.statistical + self.allowance + self.nested

    def decide(self) -> "Case":
        d = self.lhs - self.rhs
        tol = self.tolerance
        if not (math.isfinite(self.lhs) and math.isfinite(self.rhs)):
            self.passed = False
        elif self.relation == "eq":
            self.passed = abs(d) <= tol
        elif self.relation == "le":
            self.passed = d <= tol
        elif self.relation == "ge":
            self.passed = d >= -tol
        else:
            raise InvalidInput(f"unknown relation {self.relation!r}")
        return self


def make_case(label, relation, lhs, rhs, lhs_se=0.0, rhs_se=0.0, extra_se=(), se_mult=3.0,
              allowance=0.0, nested=0.0, paired_se=None) -> Case:
    """Case with ``statistical = se_mult * sqrt(sum of squared SEs)``.

    ``paired_se`` replaces the two side SEs when the difference was
    estimated path by path.
    """
    parts = [paired_se] if paired_se is not None else [lhs_se, rhs_se]
    parts += list(extra_se)
    se = math.sqrt(math.fsum(float(v) ** 2 for v in parts if v is not None and math.isfinite(v)))
    return Case(label, relation, float(lhs), float(rhs), float(lhs_se), float(rhs_se),
                se_mult * se, float(allowance), float(nested)).decide()


def finite_case(label, value) -> Case:
    """Passes iff ``value`` is a finite number."""
    return Case(label, "le", float(value), sys.float_info.max).decide()


@dataclass
class CheckReport:
    name: str
    problem: str
    cases: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)     # name -> list of row dicts
    notes: dict = field(default_factory=dict)
    category: str = "check"                        # or "expected_fail"

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def worst(self) -> Optional[Case]:
        """Case with the smallest margin to its tolerance."""
        def margin(c):
            d = c.lhs - c.rhs
            slack = {"eq": c.tolerance - abs(d), "le": c.tolerance - d, "ge": c.tolerance + d}[c.relation]
            return slack if math.isfinite(slack) else -math.inf
        return min(self.cases, key=margin) if self.cases else None

    def cases_with(self, prefix: str) -> list:
        return [c for c in self.cases if c.label.startswith(prefix)]

    def to_dict(self) -> dict:
        d = dict(name=self.name, problem=self.problem, passed=self.passed, category=self.category,
                 cases=[dict(asdict(c), tolerance=c.tolerance) for c in self.cases],
                 tables=self.tables, notes=self.notes)
        return d

    def summary(self) -> str:
        n_fail = sum(not c.passed for c in self.cases)
        status = "PASS" if self.passed else "FAIL"
        w = self.worst
        tail = "" if w is None else f"; tightest {w.label}: |lhs-rhs|={abs(w.lhs - w.rhs):.4g} tol={w.tolerance:.4g}"
        return f"{status} {self.name} [{self.problem}] {len(self.cases) - n_fail}/{len(self.cases)} cases{tail}"


# ---------------------------------------------------------------------------
# noise and restart helpers
# ---------------------------------------------------------------------------


def tile_batch(nb: NoiseBatch, reps: int) -> NoiseBatch:
    """``reps`` back-to-back copies of a packed batch."""
    sizes = np.tile(np.diff(nb.grid_ptr), reps)
    ev_sizes = np.tile(np.diff(nb.ev_ptr), reps)
    return NoiseBatch(
        realizations=list(nb.realizations) * reps,
        grid_ptr=np.concatenate(([0], np.cumsum(sizes))).astype(np.int64),
        grid_t=np.tile(nb.grid_t, reps), dw=np.tile(nb.dw, reps), rem=np.tile(nb.rem, reps),
        ev_ptr=np.concatenate(([0], np.cumsum(ev_sizes))).astype(np.int64),
        ev_idx=np.tile(nb.ev_idx, reps), ev_mark=np.tile(nb.ev_mark, reps), ev_norm=np.tile(nb.ev_norm, reps),
    )


def restrict_batch(nb: NoiseBatch, t: float) -> NoiseBatch:
    """Every realization cut to ``[t, T]``; ``t`` must be a grid point of each."""
    return pack_noise([r.restrict(t) for r in nb.realizations])


def time_key(t: float) -> int:
    return int(round(float(t) * 2 ** 32))


def grid_index(nb: NoiseBatch, t: float) -> np.ndarray:
    """Local index of time ``t`` on every path; ``t`` must be on each grid."""
    out = np.empty(len(nb), dtype=np.int64)
    for b in range(len(nb)):
        g = nb.grid_t[nb.grid_ptr[b]:nb.grid_ptr[b + 1]]
        i = int(np.searchsorted(g, t))
        if i >= g.size or g[i] != t:
            raise InvalidInput(f"time {t} is not a grid point")
        out[b] = i
    return out


def first_jump_index(nb: NoiseBatch, min_norm: float = 1.0) -> np.ndarray:
    """Local index of the first event with ``|eta| >= min_norm``, or the last point."""
    out = np.diff(nb.grid_ptr) - 1
    for b in range(len(nb)):
        e0, e1 = nb.ev_ptr[b], nb.ev_ptr[b + 1]
        hit = np.flatnonzero(nb.ev_norm[e0:e1] >= min_norm)
        if hit.size:
            out[b] = nb.ev_idx[e0 + hit[0]]
    return out


def exceed_mask(nb: NoiseBatch, M: float) -> np.ndarray:
    """True on paths with some event ``|eta| >= M`` (``tau_M <= T``)."""
    hit = (nb.ev_norm >= M).astype(np.int64)
    counts = np.zeros(len(nb), dtype=np.int64)
    nonempty = nb.ev_ptr[1:] > nb.ev_ptr[:-1]
    if hit.size:
        counts[nonempty] = np.add.reduceat(hit, nb.ev_ptr[:-1][nonempty])
    return counts > 0


def restart_policies(family: Sequence[TabularPolicy], t: float) -> list:
    """Policies that act differently after ``t``; the first of each class is kept."""
    seen, out = set(), []
    for p in family:
        k0 = int(np.searchsorted(np.asarray(p.breaks, dtype=float), t, side="right"))
        key = (p.breaks[k0:], p.edges, p.table[k0:].tobytes())
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


class RestartValue:
    """Nested estimate of ``V(t, x)``: the family restarted at ``t``.

    For a deterministic ``t`` one inner batch is shared by every outer state,
    so the estimate is a fixed (random) function of ``x``; distinct states
    are evaluated once.  The returned standard error belongs to the
    maximizing restart policy.
    """

    def __init__(self, problem: Problem, family, M, n_inner: int, seed: int, base_grid,
                 chunk_paths: int = 1 << 15, fresh_budget: int = 400_000):
        self.problem, self.family, self.M = problem, list(family), M
        self.n_inner, self.seed, self.base_grid = n_inner, seed, np.asarray(base_grid, dtype=float)
        self.chunk_paths, self.fresh_budget = chunk_paths, fresh_budget
        self._noise = {}
        self.max_family = 1

    def inner_noise(self, t: float, key=None) -> NoiseBatch:
        k = (INNER, time_key(t)) if key is None else (FRESH, time_key(t)) + tuple(key)
        if k not in self._noise or key is not None:
            p = self.problem
            nb = sample_batch(p.spec, p.coeffs.m, t, p.T, p.n_steps, self.seed, self.n_inner, key=k,
                              base_grid=self.base_grid)
            if key is not None:
                return nb
            self._noise[k] = nb
        return self._noise[k]

    def _values(self, t, xs, noise):
        p = self.problem
        pols = restart_policies(self.family, t)
        self.max_family = max(self.max_family, len(pols))
        n_in = len(noise)
        per_chunk = max(1, self.chunk_paths // n_in)
        vals = np.empty(xs.size)
        ses = np.empty(xs.size)
        for c0 in range(0, xs.size, per_chunk):
            xc = xs[c0:c0 + per_chunk]
            tiled = tile_batch(noise, xc.size) if xc.size > 1 else noise
            x0 = np.repeat(xc, n_in)
            means, sds = [], []
            for pol in pols:
                paths = integrate_batch(p.coeffs, pol, tiled, x0, M=self.M, spec=p.spec)
                rev = path_revenues(paths, p.cost).reshape(xc.size, n_in)
                ok = np.isfinite(rev)
                cnt = ok.sum(axis=1)
                r0 = np.where(ok, rev, 0.0)
                mu = r0.sum(axis=1) / np.maximum(cnt, 1)
                var = np.where(ok, (rev - mu[:, None]) ** 2, 0.0).sum(axis=1) / np.maximum(cnt - 1, 1)
                mu = np.where(cnt > 0, mu, np.nan)
                means.append(mu)
                sds.append(np.sqrt(var / np.maximum(cnt, 1)))
            means, sds = np.array(means), np.array(sds)
            filled = np.where(np.isnan(means), -np.inf, means)
            best = np.argmax(filled, axis=0)
            cols = np.arange(xc.size)
            vals[c0:c0 + xc.size] = means[best, cols]
            ses[c0:c0 + xc.size] = sds[best, cols]
        return vals, ses

    def __call__(self, t: float, xs) -> tuple[np.ndarray, np.ndarray]:
        xs = np.asarray(xs, dtype=float)
        out_v = np.full(xs.size, np.nan)
        out_s = np.zeros(xs.size)
        ok = np.isfinite(xs)
        if t >= self.problem.T:
            out_v[ok] = self.problem.cost.h(xs[ok][:, None])
            return out_v, out_s
        uniq, inv = np.unique(xs[ok], return_inverse=True)
        if uniq.size:
            v, s = self._values(t, uniq, self.inner_noise(t))
            out_v[ok], out_s[ok] = v[inv], s[inv]
        return out_v, out_s

    def fresh(self, ts, xs) -> tuple[np.ndarray, np.ndarray]:
        """``V(t_k, x_k)`` with independent inner noise per outer path ``k``."""
        ts, xs = np.asarray(ts, dtype=float), np.asarray(xs, dtype=float)
        need = int(np.sum((ts < self.problem.T) & np.isfinite(xs))) * self.n_inner
        if need > self.fresh_budget:
            raise NestedBudgetExceeded(need, self.fresh_budget)
        vals, ses = np.full(xs.size, np.nan), np.zeros(xs.size)
        for k in range(xs.size):
            if not math.isfinite(xs[k]):
                continue
            if ts[k] >= self.problem.T:
                vals[k] = self.problem.cost.h(xs[k:k + 1, None])[0]
                continue
            v, s = self._values(ts[k], xs[k:k + 1], self.inner_noise(ts[k], key=(k,)))
            vals[k], ses[k] = v[0], s[0]
        return vals, ses


def nested_allowance(inner_se: float, family_size: int) -> float:
    """Upward bias bound for a max of ``family_size`` noisy means."""
    return inner_se * math.sqrt(2.0 * math.log(family_size)) if family_size > 1 else 0.0


def _mean_finite(a) -> float:
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    return math.fsum(a.tolist()) / a.size if a.size else 0.0


def base_grid_for(problem: Problem) -> np.ndarray:
    return uniform_grid(problem.s, problem.T, problem.n_steps)


def outer_batch(problem: Problem, n_paths: int, seed: int) -> NoiseBatch:
    return sample_batch(problem.spec, problem.coeffs.m, problem.s, problem.T, problem.n_steps, seed, n_paths,
                        key=(OUTER,))


# ---------------------------------------------------------------------------
# dynamic programming identity
# ---------------------------------------------------------------------------


def _stop_indices(nb: NoiseBatch, tau, problem: Problem) -> np.ndarray:
    if tau == "first_jump":
        return first_jump_index(nb)
    t = float(tau)
    if not problem.s <= t <= problem.T:
        raise InvalidInput(f"stopping time {t} outside [{problem.s}, {problem.T}]")
    return grid_index(nb, t)


def check_dpp(problem: Problem, taus=(0.5,), n_paths: int = 400, n_inner: int = 128, seed: int = 0,
              M: Optional[float] = None, gate: Gate = Gate(), fresh_budget: int = 400_000) -> CheckReport:
    """Both sides of the identity, plus the two one-sided inequalities.

    ``taus`` entries are times on the base grid or ``"first_jump"``.  The
    left side is the best family revenue on the outer paths; the right side
    stops each outer path at ``tau`` and adds a nested estimate of the value
    restarted there.
    """
    family = problem.family()
    nb = outer_batch(problem, n_paths, seed)
    lhs_res = evaluate_family(family, problem.coeffs, problem.cost, problem.spec, problem.s, problem.x0,
                              problem.T, n_paths, seed, M=M, noise=nb)
    lhs = lhs_res.best
    inner = RestartValue(problem, family, M, n_inner, seed, base_grid_for(problem), fresh_budget=fresh_budget)
    delta = gate.allowance(problem.cost.f_bound)
    report = CheckReport("dpp", problem.name, notes=dict(
        n_paths=n_paths, n_inner=n_inner, seed=seed, M=M, family_size=len(family), delta_dt=delta,
        lhs_policy=lhs_res.best_policy.name))
    rows = []
    for tau in taus:
        label = "first_jump" if tau == "first_jump" else f"t={float(tau):g}"
        rhs_rows, inner_ses = [], []
        for pol in family:
            paths = integrate_batch(problem.coeffs, pol, nb, problem.x0, M=M, spec=problem.spec)
            stop = _stop_indices(nb, tau, problem)
            run = running_reward(paths, problem.cost, stop_index=stop)
            t_tau, x_tau = stop_values(paths, stop)
            x_tau = np.where(paths.diverged, np.nan, x_tau)
            if tau == "first_jump":
                v, se = inner.fresh(t_tau, x_tau)
            else:
                v, se = inner(float(tau), x_tau)
            rhs_rows.append(run + v)
            inner_ses.append(_mean_finite(se))
        ests = [estimate_from_samples(r[np.isfinite(r)], M=M) for r in rhs_rows]
        best = int(np.argmax([e.mean for e in ests]))
        rhs = ests[best]
        inner_se = inner_ses[best]
        nest = nested_allowance(inner_se, inner.max_family)
        diff = lhs_res.samples[lhs_res.best_index] - rhs_rows[best]
        diff = diff[np.isfinite(diff)]
        paired = estimate_from_samples(diff).std_error if diff.size > 1 else 0.0
        common = dict(se_mult=gate.se_mult, allowance=delta, extra_se=(inner_se,))
        report.cases.append(make_case(f"identity {label}", "eq", lhs.mean, rhs.mean, lhs.std_error, rhs.std_error,
                                      paired_se=paired, nested=nest, **common))
        report.cases.append(make_case(f"easy {label}", "le", lhs.mean, rhs.mean, lhs.std_error, rhs.std_error,
                                      paired_se=paired, nested=nest, **common))
        for pol, est, row, ise in zip(family, ests, rhs_rows, inner_ses):
            d = lhs_res.samples[lhs_res.best_index] - row
            d = d[np.isfinite(d)]
            pse = estimate_from_samples(d).std_error if d.size > 1 else 0.0
            report.cases.append(make_case(f"hard {label} {pol.name}", "ge", lhs.mean, est.mean, lhs.std_error,
                                          est.std_error, paired_se=pse, se_mult=gate.se_mult, allowance=delta,
                                          extra_se=(ise,)))
        rows.append(dict(tau=label, lhs=lhs.mean, lhs_se=lhs.std_error, rhs=rhs.mean, rhs_se=rhs.std_error,
                         inner_se=inner_se, nested_allowance=nest, rhs_policy=family[best].name))
    report.tables["dpp"] = rows
    return report


def check_dpp_discrete(problem: DiscreteProblem, taus=("stage:1", "first_jump"), n_outer: int = 10_000,
                       n_inner: int = 512, seed: int = 0, gate: Gate = Gate(), f_bound: Optional[float] = None,
                       monte_carlo: bool = True) -> CheckReport:
    """Exact identity from backward induction and brute force, then nested Monte Carlo."""
    table = dp_oracle(problem)
    if f_bound is None:
        f_bound = max(abs(float(problem.reward(0, 0.0, u))) for u in problem.actions)
    delta = gate.allowance(f_bound)
    report = CheckReport("dpp", problem.name or "discrete", notes=dict(
        n_outer=n_outer, n_inner=n_inner, seed=seed, delta_dt=delta, dp_value=table.root))
    bf = brute_force_value(problem)
    report.cases.append(make_case("exact lhs brute-force", "eq", table.root, bf))
    rows = []
    for tau in taus:
        rhs = dpp_rhs_exact(problem, table, tau)
        rhs_bf = brute_force_value(problem, tau=tau, table=table)
        report.cases.append(make_case(f"exact identity {tau}", "eq", table.root, rhs))
        report.cases.append(make_case(f"exact brute-force {tau}", "eq", rhs, rhs_bf))
        row = dict(tau=tau, dp_lhs=table.root, dp_rhs=rhs, brute_force_rhs=rhs_bf)
        if monte_carlo:
            mc = chain_dpp_monte_carlo(problem, tau, n_outer, n_inner, seed)
            report.cases.append(make_case(
                f"identity {tau}", "eq", mc.lhs.mean, mc.rhs.mean, mc.lhs.std_error, mc.rhs.std_error,
                se_mult=gate.se_mult, allowance=delta, nested=mc.nested_allowance, extra_se=(mc.inner_se,)))
            report.cases.append(make_case(
                f"easy {tau}", "le", mc.lhs.mean, mc.rhs.mean, mc.lhs.std_error, mc.rhs.std_error,
                se_mult=gate.se_mult, allowance=delta, nested=mc.nested_allowance, extra_se=(mc.inner_se,)))
            row.update(mc_lhs=mc.lhs.mean, mc_lhs_se=mc.lhs.std_error, mc_rhs=mc.rhs.mean,
                       mc_rhs_se=mc.rhs.std_error, inner_se=mc.inner_se, nested_allowance=mc.nested_allowance)
        rows.append(row)
    report.tables["dpp"] = rows
    return report


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------


def check_truncation_convergence(problem: Problem, M_list=(1, 2, 4, 8, 16), n_paths: int = 10_000,
                                 seed: int = 0, gate: Gate = Gate()) -> CheckReport:
    """``|V^M - V|`` against ``2 * revenue bound * P(tau_M <= T)`` on common noise.

    Also checks the coupling: on paths without a jump of size ``>= M`` every
    policy's truncated revenue equals the untruncated one bit for bit.
    """
    M_list = [float(m) for m in M_list]
    if M_list != sorted(M_list):
        raise InvalidInput("M_list must be increasing")
    family = problem.family()
    nb = outer_batch(problem, n_paths, seed)
    kw = dict(noise=nb)
    full = evaluate_family(family, problem.coeffs, problem.cost, problem.spec, problem.s, problem.x0,
                           problem.T, n_paths, seed, **kw)
    V = full.best
    bound = problem.revenue_bound
    report = CheckReport("truncation", problem.name, notes=dict(n_paths=n_paths, seed=seed, V=V.mean,
                                                                V_se=V.std_error, revenue_bound=bound))
    rows, curve = [], []
    for M in M_list:
        res = evaluate_family(family, problem.coeffs, problem.cost, problem.spec, problem.s, problem.x0,
                              problem.T, n_paths, seed, M=M, **kw)
        VM = res.best
        prob = prob_exceed_by(problem.spec, M, problem.horizon)
        allow = 2.0 * bound * prob
        report.cases.append(make_case(f"bound M={M:g}", "eq", VM.mean, V.mean, VM.std_error, V.std_error,
                                      se_mult=gate.se_mult, allowance=allow))
        calm = ~exceed_mask(nb, M)
        a, b = full.samples[:, calm], res.samples[:, calm]
        mismatches = int(np.sum(a.view(np.uint64) != b.view(np.uint64)))
        report.cases.append(make_case(f"coupling M={M:g}", "eq", mismatches, 0))
        rows.append(dict(M=M, V=V.mean, V_se=V.std_error, VM=VM.mean, VM_se=VM.std_error,
                         gap=abs(VM.mean - V.mean), bound=allow, prob_exceed=prob,
                         coupled_paths=int(calm.sum()), mismatches=mismatches))
        curve.append(dict(M=M, bound=allow))
    report.tables["truncation"] = rows
    report.tables["truncation_bound"] = curve
    return report


# ---------------------------------------------------------------------------
# supermartingale
# ---------------------------------------------------------------------------


def check_supermartingale(problem: Problem, time_pairs=((0.0, 0.25), (0.25, 0.5), (0.5, 0.75)),
                          M: Optional[float] = None, n_paths: int = 400, n_inner: int = 128, seed: int = 0,
                          gate: Gate = Gate(), partition_alpha: float = 2.0, partition_beta: float = 4.0,
                          min_cell: int = 50) -> CheckReport:
    """``E G(t2) <= E G(t1)`` for every family policy, ``G(t) = int_s^t f + V^M(t, X_t)``.

    The maximizing policy should make ``G`` a martingale, checked as
    near-equality.  A conditional version groups paths by the cell of
    ``X_{t1}`` in a coarse partition.
    """
    family = problem.family()
    nb = outer_batch(problem, n_paths, seed)
    inner = RestartValue(problem, family, M, n_inner, seed, base_grid_for(problem))
    times = sorted({float(t) for pair in time_pairs for t in pair})
    for t1, t2 in time_pairs:
        if not (problem.s <= t1 < t2 < problem.T or (problem.s <= t1 < t2 == problem.T)):
            raise InvalidInput(f"time pair ({t1}, {t2}) must satisfy s <= t1 < t2 <= T")
    delta = gate.allowance(problem.cost.f_bound)
    part = make_partition(partition_beta, partition_alpha, 2.0, 1.0, d=1)
    V0, _ = inner(problem.s, np.array([problem.x0]))
    lhs0 = evaluate_family(family, problem.coeffs, problem.cost, problem.spec, problem.s, problem.x0, problem.T,
                           n_paths, seed, M=M, noise=nb)
    best_name = lhs0.best_policy.name
    report = CheckReport("supermartingale", problem.name, notes=dict(
        n_paths=n_paths, n_inner=n_inner, seed=seed, M=M, delta_dt=delta, argmax_policy=best_name,
        partition_cells=len(part)))
    rows = []
    for pol in family:
        paths = integrate_batch(problem.coeffs, pol, nb, problem.x0, M=M, spec=problem.spec)
        G, se_in, X = {}, {}, {}
        for t in times:
            idx = grid_index(nb, t)
            run = running_reward(paths, problem.cost, stop_index=idx)
            _, xt = stop_values(paths, idx)
            xt = np.where(paths.diverged, np.nan, xt)
            v, s = inner(t, xt)
            G[t], se_in[t], X[t] = run + v, _mean_finite(s), xt
        nest = nested_allowance(max(se_in.values()), inner.max_family)
        for t1, t2 in time_pairs:
            d = G[t2] - G[t1]
            ok = np.isfinite(d)
            e1, e2 = _mean_finite(G[t1]), _mean_finite(G[t2])
            dse = estimate_from_samples(d[ok]).std_error
            tag = f"{pol.name} ({t1:g},{t2:g})"
            report.cases.append(make_case(f"super {tag}", "le", e2, e1, paired_se=dse, extra_se=(se_in[t1], se_in[t2]),
                                          se_mult=gate.se_mult, allowance=delta, nested=nest))
            if pol.name == best_name:
                report.cases.append(make_case(f"martingale {tag}", "eq", e2, e1, paired_se=dse,
                                              extra_se=(se_in[t1], se_in[t2]), se_mult=gate.se_mult,
                                              allowance=delta, nested=nest))
            cells = part.locate(X[t1][:, None])
            for c in range(len(part)):
                sel = ok & (cells == c)
                if sel.sum() < min_cell:
                    continue
                g1, g2 = G[t1][sel], G[t2][sel]
                cse = estimate_from_samples(g2 - g1).std_error
                report.cases.append(make_case(
                    f"conditional {tag} cell={c}", "le", _mean_finite(g2), _mean_finite(g1), paired_se=cse,
                    extra_se=(se_in[t1], se_in[t2]), se_mult=gate.se_mult, allowance=delta, nested=nest))
            rows.append(dict(policy=pol.name, t1=t1, t2=t2, EG1=e1, EG2=e2, diff=e2 - e1, diff_se=dse,
                             inner_se1=se_in[t1], inner_se2=se_in[t2]))
    report.notes["V_s"] = float(V0[0])
    report.tables["supermartingale"] = rows
    return report


def check_supermartingale_discrete(problem: DiscreteProblem) -> CheckReport:
    """Exact ``E G(k+1) <= E G(k)`` for every Markov policy, equality for the optimal one."""
    table = dp_oracle(problem)
    n = problem.n_stages
    report = CheckReport("supermartingale", problem.name or "discrete")
    seqs = list(itertools.product(range(len(problem.outcomes)), repeat=n))
    opt = MarkovPolicy(rules=tuple(dict((x, table.policy[k][x]) for x in table.policy[k]) for k in range(n)))
    rows = []
    for pi, pol in enumerate(markov_policies(problem) + [opt]):
        EG = [0.0] * (n + 1)
        for seq in seqs:
            prob = math.prod(problem.outcomes[o][1] for o in seq)
            x, acc = float(problem.x0), 0.0
            EG[0] += prob * table.V(0, x)
            for k in range(n):
                u = float(pol.actions_for(problem, k, np.array([x]))[0])
                acc += float(problem.reward(k, x, u))
                x = float(problem.move(x, u, problem.outcomes[seq[k]][0]))
                EG[k + 1] += prob * (acc + table.V(k + 1, x))
        name = "optimal" if pi == len(markov_policies(problem)) else f"m{pi}"
        for k in range(n):
            report.cases.append(make_case(f"super {name} ({k},{k + 1})", "le", EG[k + 1], EG[k]))
            if name == "optimal":
                report.cases.append(make_case(f"martingale {name} ({k},{k + 1})", "eq", EG[k + 1], EG[k]))
        rows.append(dict(policy=name, **{f"EG{k}": EG[k] for k in range(n + 1)}))
    report.tables["supermartingale"] = rows
    return report


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def _sup_abs(paths, start_index=None) -> np.ndarray:
    nb = paths.noise
    a = np.maximum(np.abs(paths.values), np.abs(paths.left))
    out = np.maximum.reduceat(a, nb.grid_ptr[:-1])
    return np.where(paths.diverged, np.nan, out)


def hill_estimator(samples, k: int) -> float:
    """Tail index from the ``k`` largest absolute values."""
    a = np.sort(np.abs(np.asarray(samples, dtype=float)))[::-1]
    a = a[np.isfinite(a)]
    if not 0 < k < a.size:
        raise InvalidInput(f"need 0 < k < {a.size}")
    logs = np.log(a[:k]) - math.log(a[k])
    return 1.0 / (math.fsum(logs.tolist()) / k)


def heavy_tail_contrast(problem: Problem, n_samples: int = 100_000, seed: int = 0, k: Optional[int] = None,
                        sizes=(1_000, 10_000, 100_000), n_steps: int = 4) -> dict:
    """Untruncated terminal states under ``u = +1``: Hill index and raw second moments."""
    from .control import constant
    p = problem.with_(n_steps=n_steps)
    nb = sample_batch(p.spec, p.coeffs.m, p.s, p.T, n_steps, seed, n_samples, key=(3,))
    paths = integrate_batch(p.coeffs, constant(1.0), nb, p.x0, spec=p.spec)
    xT = np.where(paths.diverged, np.nan, paths.terminal)
    k = k if k is not None else int(round(math.sqrt(n_samples)))
    hill = hill_estimator(xT, k)
    moments = []
    for n in sizes:
        if n <= n_samples:
            moments.append(dict(n=n, second_moment=_mean_finite(xT[:n] ** 2)))
    tail_index = getattr(p.spec.large_part, "alpha", None)
    return dict(hill=hill, k=k, n_samples=n_samples, diverged=int(np.sum(paths.diverged)),
                tail_index=tail_index, moments=moments)


def check_moment_bounds(problem: Problem, M: Optional[float] = 8.0, p_list=(2, 4), x_grid=(0.0, 1.0, 4.0, 16.0),
                        n_paths: int = 2000, seed: int = 0, slack: float = 50.0,
                        x_pairs=((0.0, 0.5), (1.0, 2.0), (4.0, 3.0)), s_pairs=((0.0, 0.0), (0.0, 0.125), (0.0, 0.25)),
                        contrast: Optional[Problem] = None, contrast_samples: int = 100_000) -> CheckReport:
    """Truncated sup-moments over a starting grid, and the increment bound.

    The first ratio is ``E sup |X^M|^p / (1 + |x|^p)``, maximized over the
    family; its max/min spread over ``x_grid`` must stay below ``slack``.
    The increment ratio divides ``E sup |X^{s,x,M} - X^{s',x',M}|^p`` by
    ``|x - x'|^p + (1 + |x|^p) |s - s'|`` and must be finite.
    """
    if any(p < 2 for p in p_list):
        raise InvalidInput("moment orders must be at least 2")
    family = problem.family()
    nb = outer_batch(problem, n_paths, seed)
    report = CheckReport("moments", problem.name, notes=dict(n_paths=n_paths, seed=seed, M=M, slack=slack))
    rows = []
    sups = {}
    for x in x_grid:
        sups[x] = [_sup_abs(integrate_batch(problem.coeffs, pol, nb, x, M=M, spec=problem.spec)) for pol in family]
    for p in p_list:
        ratios = []
        for x in x_grid:
            r = max(_mean_finite(s ** p) for s in sups[x]) / (1.0 + abs(x) ** p)
            ratios.append(r)
            rows.append(dict(p=p, x=x, ratio=r))
        spread = max(ratios) / min(ratios) if min(ratios) > 0 else math.inf
        report.cases.append(make_case(f"spread p={p}", "le", spread, slack))
    report.tables["moments"] = rows

    inc_rows = []
    restricted = {}
    for s_a, s_b in s_pairs:
        for s_ in (s_a, s_b):
            if s_ not in restricted:
                restricted[s_] = nb if s_ == problem.s else restrict_batch(nb, s_)
    for p in p_list:
        worst = 0.0
        for x, xh in x_pairs:
            for s_a, s_b in s_pairs:
                denom = abs(x - xh) ** p + (1.0 + abs(x) ** p) * abs(s_a - s_b)
                stats = []
                for pol in family:
                    pa = integrate_batch(problem.coeffs, pol, restricted[s_a], x, M=M, spec=problem.spec)
                    pb = integrate_batch(problem.coeffs, pol, restricted[s_b], xh, M=M, spec=problem.spec)
                    stats.append(_mean_finite(_coupled_sup_gap(pa, pb, xh) ** p))
                r = max(stats) / denom
                worst = max(worst, r)
                inc_rows.append(dict(p=p, x=x, x_hat=xh, s=s_a, s_hat=s_b, moment=max(stats), denom=denom, ratio=r))
        report.cases.append(finite_case(f"increment p={p}", worst))
        report.notes[f"increment_constant_p{p}"] = worst
    report.tables["increments"] = inc_rows

    if contrast is not None:
        info = heavy_tail_contrast(contrast, n_samples=contrast_samples, seed=seed)
        report.notes["contrast"] = dict(problem=contrast.name, category="expected_fail", **info)
        report.tables["contrast_moments"] = info["moments"]
    return report


def _coupled_sup_gap(pa, pb, xh) -> np.ndarray:
    """``sup_t |X_t - X'_t|`` where ``X'`` starts later and equals ``xh`` before its start."""
    na, nb_ = pa.noise, pb.noise
    out = np.empty(len(na))
    for b in range(len(na)):
        a0, a1 = na.grid_ptr[b], na.grid_ptr[b + 1]
        b0, b1 = nb_.grid_ptr[b], nb_.grid_ptr[b + 1]
        va, la = pa.values[a0:a1], pa.left[a0:a1]
        vb, lb = pb.values[b0:b1], pb.left[b0:b1]
        off = va.size - vb.size
        pre = np.abs(va[:off + 1] - xh) if off > 0 else np.zeros(0)
        pre_l = np.abs(la[:off + 1] - xh) if off > 0 else np.zeros(0)
        post = np.maximum(np.abs(va[off:] - vb), np.abs(la[off:] - lb))
        out[b] = max(pre.max(initial=0.0), pre_l.max(initial=0.0), post.max(initial=0.0))
        if pa.diverged[b] or pb.diverged[b]:
            out[b] = np.nan
    return out


# ---------------------------------------------------------------------------
# tau_M law
# ---------------------------------------------------------------------------


def check_tau_law(spec: LevyMeasureSpec, M_list=(1, 2, 4, 8, 16), T: float = 1.0, n_seeds: int = 10_000,
                  seed: int = 0, s: float = 0.0, se_mult: float = 3.0, name: str = "") -> CheckReport:
    """Empirical ``P(tau_M <= T)`` against ``1 - exp(-tail_mass(M) (T - s))``."""
    if n_seeds < 1000:
        raise InvalidInput("n_seeds must be at least 1000")
    sampler = NoiseSampler(spec, 0, s, T, np.array([s, T]))
    reals = sampler.sample_paths(seed, n_seeds, 4)
    report = CheckReport("tau-law", name or "spec", notes=dict(n_seeds=n_seeds, seed=seed, T=T))
    rows, prev = [], None
    for M in M_list:
        M = float(M)
        taus = np.array([first_exceed_time(r, M) for r in reals])
        hits = np.array([not is_never(t) for t in taus])
        emp = float(hits.sum()) / n_seeds
        p = prob_exceed_by(spec, M, T - s)
        se = math.sqrt(p * (1 - p) / n_seeds)
        report.cases.append(make_case(f"law M={M:g}", "eq", emp, p, paired_se=se, se_mult=se_mult))
        if prev is not None:
            report.cases.append(make_case(f"monotone M={M:g}", "le", emp, prev[0], paired_se=math.hypot(se, prev[1]),
                                          se_mult=se_mult))
        prev = (emp, se)
        rows.append(dict(M=M, empirical=emp, analytic=p, binomial_se=se, tail_mass=tail_mass(spec, M)))
    report.tables["tau_law"] = rows
    return report


# ---------------------------------------------------------------------------
# continuity
# ---------------------------------------------------------------------------

DEFAULT_PAIRS = (
    ((0.0, 0.0), (0.0, 0.25)), ((0.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (0.25, 1.0)), ((0.0, 0.0), (0.5, 0.0)),
    ((0.25, -1.0), (0.5, -0.5)), ((0.0, 2.0), (0.0, 2.5)), ((0.5, 0.0), (0.75, 1.0)), ((0.0, -2.0), (0.25, -2.0)),
    ((0.25, 0.5), (0.25, 1.5)), ((0.0, 1.0), (0.5, 3.0)),
)


def check_continuity(problem: Problem, pairs=DEFAULT_PAIRS, p: float = 2.0, alpha: float = 0.25, beta: float = 8.0,
                     M: Optional[float] = 8.0, n_paths: int = 4000, seed: int = 0, rho_samples: int = 20_000,
                     se_mult: float = 3.0) -> CheckReport:
    """Fit the constant of the continuity bound for fixed controls and for the value.

    The bound is ``C_T rho(alpha, beta) + K * (|x-x'|^p + (1+|x'|^p)|s-s'|) / alpha^p
    + K * (1 + |x|^p + |x'|^p) / beta^p`` with ``C_T = T - s + 1``; ``K`` is the
    smallest constant covering every pair.  Starting points share noise.
    """
    family = problem.family()
    nb = outer_batch(problem, n_paths, seed)
    rho = modulus(problem.cost, alpha, beta, rho_samples, problem.actions, T=problem.T, seed=seed)
    CT = problem.horizon + 1.0
    starts = sorted({s_ for pair in pairs for s_, _ in pair})
    noise = {s_: (nb if s_ == problem.s else restrict_batch(nb, s_)) for s_ in starts}
    report = CheckReport("continuity", problem.name, notes=dict(rho=rho, C_T=CT, alpha=alpha, beta=beta, p=p, M=M,
                                                                n_paths=n_paths, seed=seed))
    samples = {}

    def rev(pol_i, s_, x):
        key = (pol_i, s_, x)
        if key not in samples:
            paths = integrate_batch(problem.coeffs, family[pol_i], noise[s_], x, M=M, spec=problem.spec)
            samples[key] = path_revenues(paths, problem.cost)
        return samples[key]

    rows = []
    for which in ["policy:" + pol.name for pol in family] + ["value"]:
        terms, gaps = [], []
        for (s_a, x_a), (s_b, x_b) in pairs:
            if which == "value":
                ra = np.max(np.stack([rev(i, s_a, x_a) for i in range(len(family))]), axis=0)
                rb = np.max(np.stack([rev(i, s_b, x_b) for i in range(len(family))]), axis=0)
                ea = max(_mean_finite(rev(i, s_a, x_a)) for i in range(len(family)))
                eb = max(_mean_finite(rev(i, s_b, x_b)) for i in range(len(family)))
            else:
                i = [pp.name for pp in family].index(which.split(":", 1)[1])
                ra, rb = rev(i, s_a, x_a), rev(i, s_b, x_b)
                ea, eb = _mean_finite(ra), _mean_finite(rb)
            d = ra - rb
            dse = estimate_from_samples(d[np.isfinite(d)]).std_error
            term = ((abs(x_a - x_b) ** p + (1 + abs(x_b) ** p) * abs(s_a - s_b)) / alpha ** p
                    + (1 + abs(x_a) ** p + abs(x_b) ** p) / beta ** p)
            gaps.append((abs(ea - eb), dse))
            terms.append(term)
            rows.append(dict(target=which, s=s_a, x=x_a, s_hat=s_b, x_hat=x_b, gap=abs(ea - eb), gap_se=dse, term=term))
        K = max(max(0.0, g - CT * rho) / t for (g, _), t in zip(gaps, terms))
        report.notes[f"K[{which}]"] = K
        report.cases.append(finite_case(f"finite {which}", K))
        for ((g, dse), t), ((s_a, x_a), (s_b, x_b)) in zip(zip(gaps, terms), pairs):
            report.cases.append(make_case(f"bound {which} ({s_a:g},{x_a:g})-({s_b:g},{x_b:g})", "le", g,
                                          CT * rho + K * t, paired_se=dse, se_mult=se_mult))
    report.tables["continuity"] = rows
    return report
