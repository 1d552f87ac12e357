"""Built-in test problems, selected by name.

Every problem here is scalar, affine in ``(x, u)`` and uses the action set
``{-1, +1}`` with drift ``+u``.  The running reward does not depend on the
action and both rewards increase in the state, so with additive noise the
policy ``u = +1`` is optimal on every path.  That gives the checks exact
reference values while the dynamics stay nontrivial.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .control import ActionSet, FeedbackLattice, enumerate_policies
from .dynamics import CoefficientSet, affine_coefficients
from .levy_noise import InvalidInput, LevyMeasureSpec, PointMasses, PowerLaw
from .value import CostSpec

CLIP = 10.0


def _f(t, x, u):
    return 0.5 * np.tanh(0.5 * np.asarray(x, dtype=float)[:, 0])


def _h(x):
    return np.clip(np.asarray(x, dtype=float)[:, 0], -CLIP, CLIP)


def default_cost() -> CostSpec:
    """Bounded increasing rewards: ``f = tanh(x/2)/2`` and ``h = clip(x, -10, 10)``."""
    return CostSpec(f=_f, h=_h, f_bound=0.5, h_bound=CLIP, f_lip=0.25, h_lip=1.0, name="tanh-clip")


@dataclass(frozen=True, eq=False)
class Problem:
    name: str
    coeffs: CoefficientSet
    cost: CostSpec
    spec: LevyMeasureSpec
    actions: ActionSet
    s: float = 0.0
    T: float = 1.0
    x0: float = 0.0
    time_breaks: tuple = (0.5,)
    lattice: Optional[FeedbackLattice] = None
    n_steps: int = 256
    M: Optional[float] = None
    deterministic: bool = False
    description: str = ""

    @property
    def horizon(self) -> float:
        return self.T - self.s

    def family(self, cap: int = 4096):
        return enumerate_policies(self.actions, self.time_breaks, self.lattice, cap=cap)

    @property
    def revenue_bound(self) -> float:
        return self.cost.bound(self.horizon)

    def with_(self, **kw) -> "Problem":
        return replace(self, **kw)


SIGN_ACTIONS = ActionSet.finite_grid([-1.0, 1.0])


def controlled_sign_drift() -> Problem:
    return Problem(
        name="controlled-sign-drift",
        coeffs=affine_coefficients(bu=1.0, name="controlled-sign-drift"),
        cost=default_cost(), spec=LevyMeasureSpec(), actions=SIGN_ACTIONS,
        deterministic=True, description="dx = u dt, no noise",
    )


def linear_drift() -> Problem:
    return Problem(
        name="linear-drift",
        coeffs=affine_coefficients(bx=-0.5, bu=1.0, s0=1.0, name="linear-drift"),
        cost=default_cost(), spec=LevyMeasureSpec(), actions=SIGN_ACTIONS,
        description="dx = (-x/2 + u) dt + dW",
    )


def pure_jump() -> Problem:
    spec = LevyMeasureSpec(large_part=PointMasses(atoms=(((2.0,), 1.0), ((-5.0,), 0.5))))
    return Problem(
        name="pure-jump",
        coeffs=affine_coefficients(bu=1.0, s0=0.2, g0=1.0, name="pure-jump"),
        cost=default_cost(), spec=spec, actions=SIGN_ACTIONS,
        description="dx = u dt + 0.2 dW + jumps of +2 (rate 1) and -5 (rate 1/2)",
    )


def heavy_tail() -> Problem:
    spec = LevyMeasureSpec(large_part=PowerLaw(c=1.0, alpha=0.5))
    return Problem(
        name="heavy-tail",
        coeffs=affine_coefficients(bu=1.0, s0=0.25, g0=1.0, name="heavy-tail"),
        cost=default_cost(), spec=spec, actions=SIGN_ACTIONS,
        description="dx = u dt + dW/4 + symmetric power-law jumps, index 1/2",
    )


REGISTRY = {
    "controlled-sign-drift": controlled_sign_drift,
    "linear-drift": linear_drift,
    "pure-jump": pure_jump,
    "heavy-tail": heavy_tail,
}


def get_problem(name: str, **overrides) -> Problem:
    try:
        p = REGISTRY[name]()
    except KeyError:
        raise InvalidInput(f"unknown problem {name!r}; choose from {sorted(REGISTRY)}") from None
    return p.with_(**overrides) if overrides else p


def registry_names() -> list[str]:
    return list(REGISTRY)
