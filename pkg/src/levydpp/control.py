"""Admissible controls as evaluable, predictable policies.

Every policy maps ``(t, history)`` to an action in a compact set ``A`` and
only looks at the history strictly before ``t``: at a jump time it sees the
pre-jump left limit.  Piecewise-constant and lattice-feedback policies share
one tabular representation (time segments x state cells), which is also what
the compiled integrator consumes.
"""
from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .levy_noise import NEVER, InvalidInput


class PolicyFamilyTooLarge(ValueError):
    def __init__(self, size: int, cap: int):
        super().__init__(f"policy family has {size} members, above the cap of {cap}")
        self.size = size
        self.cap = cap


# ---------------------------------------------------------------------------
# action sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionSet:
    points: np.ndarray  # (K, l)
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @classmethod
    def finite_grid(cls, actions) -> "ActionSet":
        pts = np.asarray(actions, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.size == 0:
            raise InvalidInput("action set must be nonempty")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("action set must be bounded")
        return cls(points=pts)

    @classmethod
    def box(cls, lower, upper, resolution: int) -> "ActionSet":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidInput("box action set needs finite bounds with lower <= upper")
        axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
        pts = np.array(list(itertools.product(*axes)), dtype=float)
        return cls(points=pts, lower=lo, upper=hi)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.points)

    def contains(self, a) -> bool:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        if self.lower is not None:
            return bool(np.all(a >= self.lower) and np.all(a <= self.upper))
        return bool(np.any(np.all(self.points == a, axis=1)))

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.points, axis=1)))


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------


class PathHistory:
    """Observed path: grid entries ``(t, left value, value)`` and jump marks.

    ``left_limit(t)`` returns the pre-jump value recorded at ``t`` if ``t`` is
    a recorded time, otherwise the latest value strictly before ``t``.
    """

    def __init__(self, s: float, x, T: Optional[float] = None):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        self.s = float(s)
        self.T = T
        self.times = [self.s]
        self.left = [x]
        self.values = [x]
        self.jump_times: list[float] = []
        self.jump_norms: list[float] = []

    def record(self, t: float, left, value) -> None:
        self.times.append(float(t))
        self.left.append(np.atleast_1d(left))
        self.values.append(np.atleast_1d(value))

    def record_jump(self, t: float, norm: float) -> None:
        self.jump_times.append(float(t))
        self.jump_norms.append(float(norm))

    def left_limit(self, t: float) -> np.ndarray:
        i = bisect.bisect_left(self.times, t)
        if i < len(self.times) and self.times[i] == t and i > 0:
            return self.left[i]
        if i == 0:
            return self.values[0]
        return self.values[i - 1]

    def truncated_before(self, t: float) -> "PathHistory":
        """Copy of the history with everything at or after ``t`` replaced by its left limit."""
        h = PathHistory(self.s, self.values[0], self.T)
        for tt, lf, v in zip(self.times[1:], self.left[1:], self.values[1:]):
            if tt < t:
                h.record(tt, lf, v)
            elif tt == t:
                h.record(tt, lf, lf)
        for tt, nn in zip(self.jump_times, self.jump_norms):
            if tt < t:
                h.record_jump(tt, nn)
        return h


# ---------------------------------------------------------------------------
# stopping rules
# ---------------------------------------------------------------------------


class StoppingRule:
    def time(self, history: PathHistory) -> float:
        """Stopping time read off a history (:data:`NEVER` if not yet reached)."""
        raise NotImplementedError

    def occurred_before(self, t: float, history: PathHistory) -> bool:
        return self.time(history) < t


@dataclass(frozen=True)
class DeterministicTime(StoppingRule):
    t: float

    def time(self, history):
        return self.t


@dataclass(frozen=True)
class FirstJumpTime(StoppingRule):
    """First jump with ``|eta| >= min_norm``; ``min_norm = M`` gives ``tau_M``."""

    min_norm: float = 1.0

    def time(self, history):
        for t, n in zip(history.jump_times, history.jump_norms):
            if n >= self.min_norm:
                return t
        return NEVER


@dataclass(frozen=True)
class FirstExitTime(StoppingRule):
    """First recorded time with ``|X| >= radius``."""

    radius: float

    def time(self, history):
        for t, v in zip(history.times, history.values):
            if np.linalg.norm(v) >= self.radius:
                return t
        return NEVER


def resolve_stop(rule: StoppingRule, history: PathHistory, T: float) -> float:
    """Stopping time capped at the horizon."""
    return min(rule.time(history), T)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


class ControlPolicy:
    def evaluate(self, t: float, history: PathHistory) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class TabularPolicy(ControlPolicy):
    """Action table over time segments x state cells.

    Segment ``k`` covers ``(breaks[k-1], breaks[k]]``, so the action switches
    strictly after a breakpoint.  Cell ``j`` covers ``[edges[j-1], edges[j])``
    of the first state coordinate.
    """

    breaks: tuple
    edges: tuple
    table: np.ndarray  # (segments, cells, l)
    name: str = ""

    def __post_init__(self):
        tab = np.asarray(self.table, dtype=float)
        if tab.ndim == 2:
            tab = tab[:, :, None]
        if tab.shape[0] != len(self.breaks) + 1 or tab.shape[1] != len(self.edges) + 1:
            raise InvalidInput(
                f"table shape {tab.shape[:2]} does not match {len(self.breaks)} breaks and {len(self.edges)} edges"
            )
        if list(self.breaks) != sorted(self.breaks) or list(self.edges) != sorted(self.edges):
            raise InvalidInput("breaks and edges must be sorted")
        tab.setflags(write=False)
        object.__setattr__(self, "table", tab)

    @property
    def is_open_loop(self) -> bool:
        return bool(np.all(self.table == self.table[:, :1, :]))

    def segment(self, t: float) -> int:
        return bisect.bisect_left(self.breaks, t)

    def cell(self, x0: float) -> int:
        return bisect.bisect_right(self.edges, x0)

    def action_at(self, t: float, x) -> np.ndarray:
        return self.table[self.segment(t), self.cell(float(np.atleast_1d(x)[0]))]

    def evaluate(self, t, history):
        _check_time(t, history)
        return self.action_at(t, history.left_limit(t))


def _check_time(t, history):
    if t < history.s or (history.T is not None and t > history.T):
        raise InvalidInput(f"time {t} outside [{history.s}, {history.T}]")


def constant(action) -> TabularPolicy:
    a = np.atleast_1d(np.asarray(action, dtype=float))
    return TabularPolicy(breaks=(), edges=(), table=a[None, None, :], name=f"const{a.tolist()}")


def piecewise_constant(breaks, actions) -> TabularPolicy:
    acts = np.asarray(actions, dtype=float)
    if acts.ndim == 1:
        acts = acts[:, None]
    return TabularPolicy(breaks=tuple(float(b) for b in breaks), edges=(), table=acts[:, None, :])


def lattice_feedback(breaks, edges, table) -> TabularPolicy:
    return TabularPolicy(breaks=tuple(float(b) for b in breaks), edges=tuple(float(e) for e in edges), table=table)


@dataclass(frozen=True, eq=False)
class ConcatenatedPolicy(ControlPolicy):
    """``first`` on ``[s, tau]``, ``second`` on ``(tau, T]``."""

    first: ControlPolicy
    second: ControlPolicy
    switch: StoppingRule

    def evaluate(self, t, history):
        _check_time(t, history)
        if self.switch.occurred_before(t, history):
            return self.second.evaluate(t, history)
        return self.first.evaluate(t, history)


def concatenate(u: ControlPolicy, u_tilde: ControlPolicy, tau) -> ConcatenatedPolicy:
    if not isinstance(tau, StoppingRule):
        tau = DeterministicTime(float(tau))
    return ConcatenatedPolicy(first=u, second=u_tilde, switch=tau)


def evaluate(policy: ControlPolicy, t: float, history: PathHistory) -> np.ndarray:
    return policy.evaluate(t, history)


# ---------------------------------------------------------------------------
# finite families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeedbackLattice:
    """State-cell edges used on the listed time segments."""

    edges: tuple
    segments: tuple


def family_size(n_actions: int, n_segments: int, lattice: Optional[FeedbackLattice]) -> int:
    if lattice is None:
        return n_actions ** n_segments
    n_cells = len(lattice.edges) + 1
    fb = len(set(lattice.segments))
    return n_actions ** ((n_segments - fb) + fb * n_cells)


def enumerate_policies(
    action_set: ActionSet,
    time_breaks: Sequence[float],
    feedback_lattice: Optional[FeedbackLattice] = None,
    cap: int = 4096,
) -> list[TabularPolicy]:
    """Every piecewise-constant (optionally lattice-feedback) policy on the grid.

    Ordered lexicographically in action index, segment by segment.
    """
    breaks = tuple(float(b) for b in time_breaks)
    n_seg = len(breaks) + 1
    size = family_size(len(action_set), n_seg, feedback_lattice)
    if size > cap:
        raise PolicyFamilyTooLarge(size, cap)
    edges = () if feedback_lattice is None else tuple(float(e) for e in feedback_lattice.edges)
    fb_segments = set() if feedback_lattice is None else set(feedback_lattice.segments)
    for k in fb_segments:
        if not 0 <= k < n_seg:
            raise InvalidInput(f"feedback segment {k} out of range for {n_seg} segments")
    n_cells = len(edges) + 1
    slots = []  # (segment, cell or None)
    for k in range(n_seg):
        if k in fb_segments:
            slots.extend((k, j) for j in range(n_cells))
        else:
            slots.append((k, None))
    pts = action_set.points
    out = []
    for idx, choice in enumerate(itertools.product(range(len(pts)), repeat=len(slots))):
        table = np.empty((n_seg, n_cells, action_set.dim))
        for (k, j), a in zip(slots, choice):
            if j is None:
                table[k, :, :] = pts[a]
            else:
                table[k, j, :] = pts[a]
        out.append(TabularPolicy(breaks=breaks, edges=edges, table=table, name=f"p{idx}"))
    return out


def restart_family(policies: Sequence[TabularPolicy]) -> list[TabularPolicy]:
    """Distinct policies only (tables compared exactly); keeps first occurrence."""
    seen, out = set(), []
    for p in policies:
        key = (p.breaks, p.edges, p.table.tobytes())
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


def max_action_norm(policies: Sequence[TabularPolicy]) -> float:
    return max(float(np.max(np.linalg.norm(p.table, axis=2))) for p in policies) if policies else 0.0

