import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levydpp.control import (
    ActionSet, DeterministicTime, FeedbackLattice, FirstExitTime, FirstJumpTime, PathHistory,
    PolicyFamilyTooLarge, concatenate, constant, enumerate_policies, evaluate, family_size, lattice_feedback,
    max_action_norm, piecewise_constant, resolve_stop, restart_family,
)
from levydpp.levy_noise import NEVER, InvalidInput


def history(points, jumps=(), s=0.0, x=0.0, T=1.0):
    """``points`` are (t, left, value) triples; ``jumps`` are (t, norm)."""
    h = PathHistory(s, x, T)
    for t, lf, v in points:
        h.record(t, lf, v)
    for t, n in jumps:
        h.record_jump(t, n)
    return h


def test_constant_and_piecewise_policies():
    h = history([(0.25, 0.0, 0.0), (0.5, 0.0, 0.0), (0.75, 0.0, 0.0), (1.0, 0.0, 0.0)])
    assert evaluate(constant(0.3), 0.7, h)[0] == 0.3
    p = piecewise_constant([0.5], [1.0, -1.0])
    assert evaluate(p, 0.25, h)[0] == 1.0
    # switch happens strictly after the breakpoint
    assert evaluate(p, 0.5, h)[0] == 1.0
    assert evaluate(p, 0.75, h)[0] == -1.0


def test_evaluation_outside_horizon_rejected():
    h = history([])
    with pytest.raises(InvalidInput):
        evaluate(constant(1.0), 1.5, h)
    with pytest.raises(InvalidInput):
        evaluate(constant(1.0), -0.1, h)


def test_lattice_feedback_uses_left_limit_at_jump():
    # at t=0.5 the path jumps from 0.2 to 3; the policy must see 0.2
    h = history([(0.25, 0.2, 0.2), (0.5, 0.2, 3.0), (0.75, 3.0, 3.0)])
    p = lattice_feedback([], [1.0], np.array([[1.0, -1.0]]))
    assert evaluate(p, 0.5, h)[0] == 1.0
    assert evaluate(p, 0.75, h)[0] == -1.0
    # between grid points the latest value counts
    assert evaluate(p, 0.6, h)[0] == -1.0


def test_cells_are_left_closed():
    p = lattice_feedback([], [0.0, 1.0], np.array([[1.0, 2.0, 3.0]]))
    assert p.action_at(0.5, -0.1)[0] == 1.0
    assert p.action_at(0.5, 0.0)[0] == 2.0
    assert p.action_at(0.5, 1.0)[0] == 3.0


def test_table_shape_checked():
    with pytest.raises(InvalidInput):
        piecewise_constant([0.5], [1.0])
    with pytest.raises(InvalidInput):
        lattice_feedback([0.6, 0.2], [], np.ones((3, 1)))


# -- concatenation -----------------------------------------------------------------


GRID = [0.125 * k for k in range(1, 9)]
U = piecewise_constant([0.5], [1.0, -1.0])
V = constant(0.5)
W = piecewise_constant([0.25], [-0.5, 0.25])


def flat_history():
    return history([(t, 0.0, 0.0) for t in GRID])


def actions(policy, h):
    return [float(evaluate(policy, t, h)[0]) for t in GRID]


def test_concatenate_at_start_is_second_policy():
    h = flat_history()
    assert actions(concatenate(U, V, 0.0), h) == actions(V, h)


def test_concatenate_at_horizon_is_first_policy():
    h = flat_history()
    assert actions(concatenate(U, V, 1.0), h) == actions(U, h)


def test_concatenate_switches_strictly_after_tau():
    h = flat_history()
    a = actions(concatenate(U, V, 0.375), h)
    assert a[:3] == [1.0, 1.0, 1.0]
    assert a[3:] == [0.5] * 5


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_concatenation_is_associative(t1, t2):
    t1, t2 = min(t1, t2), max(t1, t2)
    h = flat_history()
    left = concatenate(concatenate(U, V, t1), W, t2)
    right = concatenate(U, concatenate(V, W, t2), t1)
    assert actions(left, h) == actions(right, h)


def test_concatenate_on_random_time():
    # switch at the first jump of norm >= 2, which happens at 0.375
    h = history([(t, 0.0, 0.0) for t in GRID], jumps=[(0.25, 1.0), (0.375, 2.5)])
    a = actions(concatenate(U, V, FirstJumpTime(2.0)), h)
    assert a[:3] == [1.0, 1.0, 1.0]
    assert a[3:] == [0.5] * 5


# -- predictability ----------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.integers(0, 7), st.floats(-5, 5))
def test_policies_ignore_the_present_jump(vals, k, bumped):
    # changing the value recorded at t (after its jump) and everything later cannot change u(t)
    pts = [(t, v, v) for t, v in zip(GRID, vals)]
    h = history(pts)
    t = GRID[k]
    h2 = history(pts[:k] + [(t, vals[k], bumped)] + [(tt, bumped, bumped) for tt in GRID[k + 1:]])
    pol = lattice_feedback([0.5], [-1.0, 1.0], np.array([[1.0, 0.0, -1.0], [-1.0, 0.5, 1.0]]))
    sw = concatenate(pol, constant(0.0), FirstExitTime(3.0))
    for p in (pol, sw):
        assert np.array_equal(evaluate(p, t, h), evaluate(p, t, h2))
        assert np.array_equal(evaluate(p, t, h), evaluate(p, t, h.truncated_before(t)))


# -- stopping rules -----------------------------------------------------------------


def test_stopping_rules():
    h = history([(0.25, 0.5, 0.5), (0.5, 0.5, 4.0)], jumps=[(0.5, 3.5)])
    assert DeterministicTime(0.3).time(h) == 0.3
    assert FirstJumpTime(3.0).time(h) == 0.5
    assert FirstJumpTime(4.0).time(h) == NEVER
    assert FirstExitTime(2.0).time(h) == 0.5
    assert resolve_stop(FirstJumpTime(4.0), h, 1.0) == 1.0


# -- families -------------------------------------------------------------------------


def test_family_counts():
    two = ActionSet.finite_grid([-1.0, 1.0])
    assert len(enumerate_policies(two, [])) == 2
    assert len(enumerate_policies(two, [0.5])) == 4
    lat = FeedbackLattice(edges=(0.0,), segments=(1,))
    fam = enumerate_policies(two, [0.25, 0.5], lat)
    assert len(fam) == 16 == family_size(2, 3, lat)
    assert len(restart_family(fam)) == 16
    assert max_action_norm(fam) == 1.0
    # one break, three cells on the second segment: 2 * 2**3
    three = FeedbackLattice(edges=(-1.0, 1.0), segments=(1,))
    assert len(enumerate_policies(two, [0.5], three)) == 16 == family_size(2, 2, three)


def test_family_is_exhaustive_and_distinct():
    fam = enumerate_policies(ActionSet.finite_grid([-1.0, 0.0, 1.0]), [0.5])
    tables = {p.table.tobytes() for p in fam}
    assert len(tables) == 9
    assert all(p.is_open_loop for p in fam)


def test_family_cap():
    with pytest.raises(PolicyFamilyTooLarge) as exc:
        enumerate_policies(ActionSet.finite_grid([-1.0, 1.0]), [0.1 * k for k in range(1, 13)], cap=4096)
    assert exc.value.size == 8192


def test_restart_family_drops_duplicates():
    fam = enumerate_policies(ActionSet.finite_grid([-1.0, 1.0]), [0.5])
    assert len(restart_family(fam + fam)) == 4


def test_action_sets():
    box = ActionSet.box([-1.0], [1.0], 5)
    assert len(box) == 5
    assert box.contains(0.3)
    assert not box.contains(1.5)
    grid = ActionSet.finite_grid([-1.0, 1.0])
    assert grid.contains(1.0) and not grid.contains(0.0)
    assert grid.sup_norm() == 1.0
    with pytest.raises(InvalidInput):
        ActionSet.finite_grid([])
    with pytest.raises(InvalidInput):
        ActionSet.finite_grid([np.inf])
    with pytest.raises(InvalidInput):
        ActionSet.box([1.0], [-1.0], 3)
