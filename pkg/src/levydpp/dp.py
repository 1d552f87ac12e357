"""Exact backward induction for small discrete control problems.

A :class:`DiscreteProblem` is a finite-stage Markov chain
``x_{k+1} = x_k + step * u_k + J_k`` with ``J_k`` drawn from a finite law.
:func:`dp_oracle` solves it exactly on the reachable lattice; the
brute-force enumerators and the Monte Carlo simulator below share none of
its code, which is what makes them useful as cross-checks.

With dyadic rewards, jumps and probabilities every quantity here is exactly
representable, so the exact comparisons are equalities, not tolerances.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .levy_noise import InvalidInput, path_seed, rng_for
from .value import ValueEstimate, estimate_from_samples


class NodeCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    n_stages: int
    actions: tuple
    outcomes: tuple              # ((jump, prob), ...)
    reward: Callable             # reward(k, x, u) for one stage, numpy-vectorizable
    terminal: Callable           # terminal(x)
    x0: float = 0.0
    step: float = 1.0
    dt: float = 1.0
    node_cap: int = 5000
    name: str = ""

    def __post_init__(self):
        probs = [p for _, p in self.outcomes]
        if any(p < 0 for p in probs) or abs(math.fsum(probs) - 1.0) > 1e-12:
            raise InvalidInput("outcome probabilities must be nonnegative and sum to one")
        if not self.actions:
            raise InvalidInput("action set is empty")

    def move(self, x, u, jump):
        return x + self.step * u + jump

    def stage_time(self, k: int) -> float:
        return k * self.dt

    @property
    def jump_outcomes(self) -> list[int]:
        return [i for i, (j, _) in enumerate(self.outcomes) if j != 0]

    def reachable(self) -> list[list[float]]:
        """Sorted reachable states per stage ``0..n_stages``."""
        layers = [[float(self.x0)]]
        total = 1
        for _ in range(self.n_stages):
            nxt = sorted({float(self.move(x, u, j)) for x in layers[-1] for u in self.actions for j, _ in self.outcomes})
            total += len(nxt)
            if total > self.node_cap:
                raise NodeCapExceeded(f"more than {self.node_cap} (stage, state) nodes")
            layers.append(nxt)
        return layers


@dataclass
class ValueTable:
    values: list          # values[k][x]
    policy: list          # policy[k][x] = action index (first index on ties)
    problem: DiscreteProblem

    def V(self, k: int, x: float) -> float:
        if k == self.problem.n_stages:
            return float(self.problem.terminal(x))
        return self.values[k][float(x)]

    @property
    def root(self) -> float:
        return self.values[0][float(self.problem.x0)]


def _q_value(problem: DiscreteProblem, k: int, x: float, u: float, cont: Callable[[float, int], float]) -> float:
    total = float(problem.reward(k, x, u))
    exp = 0.0
    for oi, (j, p) in enumerate(problem.outcomes):
        exp += p * cont(problem.move(x, u, j), oi)
    return total + exp


def dp_oracle(problem: DiscreteProblem) -> ValueTable:
    """Backward induction over the reachable lattice."""
    layers = problem.reachable()
    n = problem.n_stages
    values = [dict() for _ in range(n)]
    policy = [dict() for _ in range(n)]

    for k in range(n - 1, -1, -1):
        def cont(y, oi, k=k):
            return float(problem.terminal(y)) if k + 1 == n else values[k + 1][float(y)]
        for x in layers[k]:
            qs = [_q_value(problem, k, x, u, cont) for u in problem.actions]
            best = int(np.argmax(qs))
            values[k][x] = qs[best]
            policy[k][x] = best
    return ValueTable(values=values, policy=policy, problem=problem)


# ---------------------------------------------------------------------------
# exact dynamic programming identity
# ---------------------------------------------------------------------------


def dpp_rhs_exact(problem: DiscreteProblem, table: ValueTable, tau: str) -> float:
    """``sup_u E[sum of rewards before tau + V(tau, X_tau)]`` by backward recursion.

    ``tau`` is ``"stage:k"`` (deterministic stage time) or ``"first_jump"``
    (end of the first stage with a nonzero jump, capped at the horizon).
    """
    n = problem.n_stages
    if tau.startswith("stage:"):
        kt = int(tau.split(":")[1])
        if not 0 <= kt <= n:
            raise InvalidInput(f"stage {kt} outside 0..{n}")
        if kt == 0:
            return table.root
        W = {x: table.V(kt, x) for x in problem.reachable()[kt]}
        for k in range(kt - 1, -1, -1):
            W = {
                x: max(_q_value(problem, k, x, u, lambda y, oi, W=W: W[float(y)]) for u in problem.actions)
                for x in problem.reachable()[k]
            }
        return W[float(problem.x0)]
    if tau == "first_jump":
        jumpers = set(problem.jump_outcomes)
        layers = problem.reachable()
        W = {x: table.V(n, x) for x in layers[n]}
        for k in range(n - 1, -1, -1):
            def cont(y, oi, k=k, W=W):
                return table.V(k + 1, y) if oi in jumpers else W[float(y)]
            W = {x: max(_q_value(problem, k, x, u, cont) for u in problem.actions) for x in layers[k]}
        return W[float(problem.x0)]
    raise InvalidInput(f"unknown stopping rule {tau!r}")


def tau_stage(problem: DiscreteProblem, tau: str, outcome_seq: Sequence[int]) -> int:
    """Stage index of ``tau`` along an outcome sequence."""
    if tau.startswith("stage:"):
        return int(tau.split(":")[1])
    jumpers = set(problem.jump_outcomes)
    for k, oi in enumerate(outcome_seq):
        if oi in jumpers:
            return k + 1
    return problem.n_stages


# ---------------------------------------------------------------------------
# brute force
# ---------------------------------------------------------------------------


def _histories(n_out: int, n_stages: int):
    return [h for k in range(n_stages) for h in itertools.product(range(n_out), repeat=k)]


def brute_force_value(problem: DiscreteProblem, tau: Optional[str] = None,
                      table: Optional[ValueTable] = None, max_stages: int = 3) -> float:
    """Max over all history-dependent policies of the expected total reward.

    With ``tau`` given, rewards stop at ``tau`` and ``table``'s value at
    ``(tau, X_tau)`` is added, i.e. the right-hand side of the dynamic
    programming identity.  Only for ``n_stages <= max_stages``.
    """
    n = problem.n_stages
    if n > max_stages:
        raise InvalidInput(f"brute force limited to {max_stages} stages")
    if tau is not None and table is None:
        raise InvalidInput("a value table is needed to stop at tau")
    n_out = len(problem.outcomes)
    hists = _histories(n_out, n)
    seqs = list(itertools.product(range(n_out), repeat=n))
    best = -math.inf
    for choice in itertools.product(range(len(problem.actions)), repeat=len(hists)):
        rule = dict(zip(hists, choice))
        total = 0.0
        for seq in seqs:
            prob = 1.0
            for oi in seq:
                prob *= problem.outcomes[oi][1]
            stop = n if tau is None else tau_stage(problem, tau, seq)
            x, acc = float(problem.x0), 0.0
            for k in range(stop):
                u = problem.actions[rule[seq[:k]]]
                acc += float(problem.reward(k, x, u))
                x = float(problem.move(x, u, problem.outcomes[seq[k]][0]))
            acc += float(problem.terminal(x)) if tau is None else table.V(stop, x)
            total += prob * acc
        best = max(best, total)
    return best


def open_loop_value(problem: DiscreteProblem) -> float:
    """Max over deterministic action sequences."""
    n_out = len(problem.outcomes)
    best = -math.inf
    for acts in itertools.product(problem.actions, repeat=problem.n_stages):
        total = 0.0
        for seq in itertools.product(range(n_out), repeat=problem.n_stages):
            prob, x, acc = 1.0, float(problem.x0), 0.0
            for k, (u, oi) in enumerate(zip(acts, seq)):
                prob *= problem.outcomes[oi][1]
                acc += float(problem.reward(k, x, u))
                x = float(problem.move(x, u, problem.outcomes[oi][0]))
            total += prob * (acc + float(problem.terminal(x)))
        best = max(best, total)
    return best


# ---------------------------------------------------------------------------
# Monte Carlo on the chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MarkovPolicy:
    """Action index per ``(stage, state)``; states not listed use action 0."""

    rules: tuple   # per stage: dict state -> action index

    def actions_for(self, problem: DiscreteProblem, k: int, x: np.ndarray) -> np.ndarray:
        rule = self.rules[k]
        idx = np.zeros(x.shape, dtype=int)
        for state, a in rule.items():
            idx[x == state] = a
        return np.asarray(problem.actions, dtype=float)[idx]


def markov_policies(problem: DiscreteProblem, from_stage: int = 0, start: Optional[Sequence[float]] = None,
                    cap: int = 4096) -> list[MarkovPolicy]:
    """Every Markov policy on the states reachable from ``start`` at ``from_stage``."""
    layers = [sorted(set(float(v) for v in (start if start is not None else [problem.x0])))]
    for _ in range(from_stage, problem.n_stages - 1):
        layers.append(sorted({float(problem.move(x, u, j)) for x in layers[-1] for u in problem.actions
                              for j, _ in problem.outcomes}))
    slots = [(k, x) for k, layer in enumerate(layers) for x in layer]
    size = len(problem.actions) ** len(slots)
    if size > cap:
        raise InvalidInput(f"Markov family has {size} members, above the cap of {cap}")
    out = []
    for choice in itertools.product(range(len(problem.actions)), repeat=len(slots)):
        rules = [dict() for _ in range(problem.n_stages)]
        for (k, x), a in zip(slots, choice):
            rules[from_stage + k][x] = a
        out.append(MarkovPolicy(rules=tuple(rules)))
    return out


def outcome_draws(problem: DiscreteProblem, uniforms: np.ndarray) -> np.ndarray:
    cdf = np.cumsum([p for _, p in problem.outcomes])
    cdf[-1] = 1.0
    return np.searchsorted(cdf, uniforms, side="right")


def simulate_chain(problem: DiscreteProblem, policy: MarkovPolicy, x: np.ndarray, outcomes: np.ndarray,
                   from_stage: int = 0, to_stage: Optional[np.ndarray] = None):
    """Run the chain from ``from_stage``; returns ``(reward sum, final state)``.

    ``outcomes[..., k - from_stage]`` is the outcome index at stage ``k``;
    ``to_stage`` (per path) stops each path early.
    """
    n = problem.n_stages
    jumps = np.array([j for j, _ in problem.outcomes], dtype=float)
    x = np.array(x, dtype=float, copy=True)
    acc = np.zeros_like(x)
    for k in range(from_stage, n):
        live = np.ones_like(x, dtype=bool) if to_stage is None else (to_stage > k)
        u = policy.actions_for(problem, k, x)
        r = problem.reward(k, x, u)
        xn = problem.move(x, u, jumps[outcomes[..., k - from_stage]])
        acc = np.where(live, acc + r, acc)
        x = np.where(live, xn, x)
    return acc, x


@dataclass
class ChainDppResult:
    lhs: ValueEstimate
    rhs: ValueEstimate
    inner_se: float
    nested_allowance: float
    family_size: int
    restart_family_size: int


def chain_dpp_monte_carlo(problem: DiscreteProblem, tau: str, n_outer: int, n_inner: int, seed: int,
                          family: Optional[list] = None) -> ChainDppResult:
    """Nested Monte Carlo for both sides of the identity on the chain.

    Outer path ``k`` draws its stage outcomes and its inner outcomes from its
    own stream, shared by every policy (common random numbers).  The inner
    value at ``(tau, X_tau)`` is the best mean over the Markov policies
    restarted at ``tau``.
    """
    n = problem.n_stages
    family = family if family is not None else markov_policies(problem)
    outer = np.empty((n_outer, n))
    inner = np.empty((n_outer, n_inner, n))
    for k in range(n_outer):
        rng = rng_for(path_seed(seed, k))
        outer[k] = rng.random(n)
        inner[k] = rng.random((n_inner, n))
    out_idx = outcome_draws(problem, outer)
    in_idx = outcome_draws(problem, inner)
    x0 = np.full(n_outer, float(problem.x0))

    lhs_samples = [simulate_chain(problem, p, x0, out_idx) for p in family]
    lhs_tot = [a + problem.terminal(xf) for a, xf in lhs_samples]
    lhs_means = [math.fsum(v.tolist()) / n_outer for v in lhs_tot]
    lhs = estimate_from_samples(lhs_tot[int(np.argmax(lhs_means))])

    stop = np.array([tau_stage(problem, tau, seq) for seq in out_idx.tolist()])
    rhs_rows, inner_ses, restart_sizes = [], [], [1]
    restarts = {}
    for p in family:
        acc, xt = simulate_chain(problem, p, x0, out_idx, to_stage=stop)
        v = np.array(problem.terminal(xt), dtype=float)
        for kt in sorted(set(stop.tolist())):
            if kt >= n:
                continue
            for xs in sorted(set(xt[stop == kt].tolist())):
                sel = np.flatnonzero((stop == kt) & (xt == xs))
                if (kt, xs) not in restarts:
                    restarts[(kt, xs)] = markov_policies(problem, from_stage=kt, start=[xs])
                    restart_sizes.append(len(restarts[(kt, xs)]))
                sub = in_idx[sel][:, :, kt:]
                xs_arr = np.full(sub.shape[:2], xs)
                means, ses = [], []
                for r in restarts[(kt, xs)]:
                    a, xf = simulate_chain(problem, r, xs_arr, sub, from_stage=kt)
                    tot = a + problem.terminal(xf)
                    means.append(tot.mean(axis=1))
                    ses.append(tot.std(axis=1, ddof=1) / math.sqrt(n_inner))
                means = np.array(means)
                best = np.argmax(means, axis=0)
                v[sel] = means[best, np.arange(sel.size)]
                inner_ses.extend(np.array(ses)[best, np.arange(sel.size)].tolist())
        rhs_rows.append(acc + v)
    rhs_means = [math.fsum(r.tolist()) / n_outer for r in rhs_rows]
    rhs = estimate_from_samples(rhs_rows[int(np.argmax(rhs_means))])
    inner_se = math.fsum(inner_ses) / len(inner_ses) if inner_ses else 0.0
    kmax = max(restart_sizes)
    allowance = inner_se * math.sqrt(2.0 * math.log(kmax)) if kmax > 1 else 0.0
    return ChainDppResult(lhs=lhs, rhs=rhs, inner_se=inner_se, nested_allowance=allowance,
                          family_size=len(family), restart_family_size=kmax)


# ---------------------------------------------------------------------------
# bundled instances
# ---------------------------------------------------------------------------


def desk_problem() -> DiscreteProblem:
    """Two stages, actions -1/+1, jump 0 or +1 with probability 1/2.

    Terminal reward ``-|x|`` and a cost of 1/4 for choosing +1; feedback on
    the stage-1 state beats every open-loop plan.
    """
    return DiscreteProblem(
        n_stages=2, actions=(-1.0, 1.0), outcomes=((0.0, 0.5), (1.0, 0.5)),
        reward=lambda k, x, u: -0.25 * (np.asarray(u) > 0),
        terminal=lambda x: -np.abs(x), name="desk",
    )


def linear_desk_problem() -> DiscreteProblem:
    """Same chain with terminal reward ``x``: the optimum is open loop."""
    return DiscreteProblem(
        n_stages=2, actions=(-1.0, 1.0), outcomes=((0.0, 0.5), (1.0, 0.5)),
        reward=lambda k, x, u: -0.25 * (np.asarray(u) > 0),
        terminal=lambda x: np.asarray(x, dtype=float) * 1.0, name="linear-desk",
    )
