import random
import time
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from elaskit.errors import IncompatibleL, Infeasible
from elaskit.partition import (LayerAssignment, LayerMove, brute_force_partition, diff_assignments,
                               per_layer_cost, plan_partition)
from oracles import partition_oracle


def _plan(times, P, caps=None, mems=None):
    time_fn, mem_fn = per_layer_cost(times, mems)
    return plan_partition(len(times), P, caps or [1.0] * P, time_fn, mem_fn)


def test_four_layer_example():
    a = _plan([1, 2, 3, 4], 2)
    assert a.boundaries == (3,) and a.objective == 6


def test_forced_partition():
    a = _plan([5, 5, 5, 5], 4)
    assert a.boundaries == (1, 2, 3) and a.objective == 5


def test_memory_cap_overrides_balance():
    a = _plan([1, 1, 1, 1], 2, caps=[10, 1], mems=[1, 1, 1, 1])
    assert a.boundaries == (3,) and a.objective == 3


def test_infeasible_names_tightest_stage():
    with pytest.raises(Infeasible) as exc:
        _plan([1, 1, 1], 2, caps=[5, 0.5], mems=[1, 1, 1])
    assert exc.value.stage == 2
    with pytest.raises(Infeasible):
        _plan([1], 2)


def test_oracle_equivalence_1000_instances():
    rng = random.Random(11)
    infeasible = 0
    for _ in range(1000):
        L = rng.randint(1, 12)
        P = rng.randint(1, min(L, 4))
        times = [Fraction(rng.randint(1, 12), 4) for _ in range(L)]
        mems = [rng.randint(1, 5) for _ in range(L)]
        caps = [rng.randint(3, 20) for _ in range(P)]
        obj, cut = partition_oracle(times, P, caps, mems)
        if cut is None:
            infeasible += 1
            with pytest.raises(Infeasible):
                _plan(times, P, caps, mems)
            continue
        got = _plan(times, P, caps, mems)
        assert got.objective == obj and list(got.boundaries) == cut
        blocks = got.stage_ranges()
        assert all(sum(mems[a - 1:b]) <= caps[i] for i, (a, b) in enumerate(blocks))
    assert infeasible > 10


def test_package_brute_force_matches_oracle():
    rng = random.Random(5)
    for _ in range(200):
        L = rng.randint(1, 9)
        P = rng.randint(1, min(L, 4))
        times = [rng.randint(1, 6) for _ in range(L)]
        time_fn, _ = per_layer_cost(times)
        got = brute_force_partition(L, P, [1.0] * P, time_fn)
        obj, cut = partition_oracle(times, P)
        assert got.objective == obj and list(got.boundaries) == cut


def test_large_instance_is_fast():
    rng = random.Random(2)
    times = [rng.uniform(0.5, 2.0) for _ in range(80)]
    t0 = time.perf_counter()
    _plan(times, 8)
    assert time.perf_counter() - t0 < 1.0


def test_diff_assignments():
    a = LayerAssignment.from_counts([2, 2])
    assert diff_assignments(a, a) == []
    assert diff_assignments(a, LayerAssignment.from_counts([1, 3])) == [LayerMove(2, 1, 2)]
    with pytest.raises(IncompatibleL):
        diff_assignments(a, LayerAssignment.from_counts([2, 3]))


@given(st.lists(st.integers(1, 6), min_size=2, max_size=10), st.lists(st.integers(1, 6), min_size=2, max_size=10))
def test_diff_is_minimal_and_ordered(c1, c2):
    c1, c2 = c1[:len(c2)], c2[:len(c1)]
    # rebalance so both cover the same layer count
    diff = sum(c1) - sum(c2)
    c2[-1] += diff
    if c2[-1] < 1:
        return
    old, new = LayerAssignment.from_counts(c1), LayerAssignment.from_counts(c2)
    moves = diff_assignments(old, new)
    assert [m.layer for m in moves] == sorted(m.layer for m in moves)
    changed = [l for l in range(1, old.num_layers + 1) if old.stage_of(l) != new.stage_of(l)]
    assert [m.layer for m in moves] == changed
