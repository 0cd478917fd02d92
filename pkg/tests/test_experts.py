from __future__ import annotations

import itertools
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disagg_moe.experts import (ActivationStats, InfeasiblePlacementError, Placement, ReplicaAllocation,
                                allocate_replicas, brute_force_place, coactivation_load, load_stats,
                                max_coactivation_load, place_replicas, record_step, replica_map_from_dict,
                                replica_map_to_dict, roundrobin_place, uniform_allocation)
from disagg_moe.scheduler import InstanceTooLargeError, ReplicaMap

import instances

A, B, C, D = range(4)
X, Y, Z = range(3)  # alphabetical IDs drive the swap tie-break


def _sym(n, pairs):
    a = np.zeros((n, n))
    for (i, j), v in pairs.items():
        a[i, j] = a[j, i] = v
    return a


# -- statistics -----------------------------------------------------------------

def test_record_hand_count():
    s = ActivationStats(4)
    record_step(s, {1, 2})
    record_step(s, {1, 3})
    assert s.counts.tolist() == [0, 2, 1, 1]
    assert (s.coactivation[1, 2], s.coactivation[1, 3], s.coactivation[2, 3]) == (1, 1, 0)
    assert s.window_len == 2


def test_record_empty_and_single():
    s = ActivationStats(3)
    s.record(set())
    assert s.window_len == 1 and s.counts.sum() == 0
    s.record({2})
    assert s.coactivation.sum() == 0 and s.counts[2] == 1


def test_window_retires_old_steps():
    s = ActivationStats(3, window=2)
    s.record({0, 1}).record({1, 2}).record({0, 2})
    assert s.window_len == 2
    assert s.counts.tolist() == [1, 1, 2]
    assert s.coactivation[0, 1] == 0 and s.coactivation[1, 2] == 1 and s.coactivation[0, 2] == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sets(st.integers(0, 5)), max_size=20), st.integers(1, 8))
def test_stats_symmetric_and_bounded(steps, window):
    s = ActivationStats(6, window)
    for step in steps:
        s.record(step)
    a = s.coactivation
    assert np.array_equal(a, a.T)
    assert (a >= 0).all() and (np.diag(a) == 0).all()
    recent = steps[-window:]
    occ = [sum(e in st_ for st_ in recent) for e in range(6)]
    for i, j in itertools.combinations(range(6), 2):
        assert a[i, j] <= min(occ[i], occ[j])
    assert s.counts.tolist() == occ


def test_snapshot_is_independent():
    s = ActivationStats(3).record({0, 1})
    snap = s.snapshot()
    s.record({0, 2})
    assert snap.counts.tolist() == [1, 1, 0]


def test_stats_json_round_trip(tmp_path):
    s = ActivationStats(4).record({0, 1, 3}).record({1, 3})
    path = tmp_path / "stats.json"
    path.write_text(json.dumps(s.to_dict()))
    counts, a = load_stats(path)
    assert counts.tolist() == s.counts.tolist()
    assert np.array_equal(a, s.coactivation)


# -- allocation -----------------------------------------------------------------

def test_allocation_hand_trace():
    # loads (9,3,1) -> e1; (4.5,3,1) -> e1; (3,3,1) tie -> e1
    assert allocate_replicas([9, 3, 1], 3, 6).replicas == (4, 1, 1)


def test_allocation_no_spare_slots():
    assert allocate_replicas([5, 5, 5], 3, 3).replicas == (1, 1, 1)


def test_allocation_zero_counts_lowest_id():
    assert allocate_replicas([0, 0], 2, 4).replicas == (3, 1)


def test_allocation_rejects_too_few_slots():
    with pytest.raises(InfeasiblePlacementError):
        allocate_replicas([1, 2, 3], 3, 2)


def test_allocation_cap():
    alloc = allocate_replicas([100, 1, 1], 3, 7, max_replicas=2)
    assert alloc.replicas == (2, 2, 2)
    assert allocate_replicas([100, 1], 2, 9, max_replicas=3).replicas == (3, 3)


def _compositions(total, parts):
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield tuple(b - a for a, b in zip(bounds, bounds[1:]))


def _exhaustive_min_max(c, S):
    return min(max(ci / ri for ci, ri in zip(c, r)) for r in _compositions(S, len(c)))


def test_allocation_optimal_exhaustive():
    rng = np.random.default_rng(4)
    checked = 0
    for E in range(1, 6):
        for S in range(E, 11):
            vectors = [rng.integers(0, 20, E) for _ in range(6)] + [rng.random(E) * 10,
                                                                     np.full(E, 3), np.arange(E)]
            for c in vectors:
                r = allocate_replicas(c, E, S).replicas
                assert sum(r) == S and min(r) >= 1
                got = max(ci / ri for ci, ri in zip(c, r))
                assert got == pytest.approx(_exhaustive_min_max(list(c), S))
                checked += 1
    assert checked == 9 * sum(11 - E for E in range(1, 6))


def test_uniform_allocation():
    assert uniform_allocation(3, 8).replicas == (3, 3, 2)
    assert uniform_allocation(3, 8, max_replicas=2).replicas == (2, 2, 2)


# -- co-activation load ---------------------------------------------------------

def test_coactivation_load_examples():
    a = _sym(4, {(A, C): 1, (A, B): 5})
    assert coactivation_load([{A}, {B, C, D}], a, 0) == 0
    assert coactivation_load([{A, C}], a, 0) == 1
    assert coactivation_load([{A, B, C}], np.zeros((4, 4)), 0) == 0
    assert coactivation_load([{A, B, C}], a, 0) == 6


# -- placement -------------------------------------------------------------------

def test_place_abcd_fixture():
    a = _sym(4, {(A, B): 10, (C, D): 8, (A, C): 1})
    alloc = ReplicaAllocation((1, 1, 1, 1))
    p = place_replicas(alloc, a, [10, 9, 8, 7], 2, 2)
    assert p.instances == (frozenset({A, D}), frozenset({B, C}))
    assert max_coactivation_load(p, a) == 0
    assert max_coactivation_load(brute_force_place(alloc, a, 2, 2), a) == 0


def test_place_zero_affinity():
    alloc = ReplicaAllocation((2, 1, 1, 2))
    p = place_replicas(alloc, np.zeros((4, 4)), [4, 3, 2, 1], 3, 2)
    p.validate(alloc)
    assert max_coactivation_load(p, np.zeros((4, 4))) == 0


def test_place_swap_path_fixture(caplog):
    a = _sym(3, {(Z, X): 0, (X, Y): 2, (Z, Y): 7})
    alloc = ReplicaAllocation((1, 2, 1))
    with caplog.at_level(logging.DEBUG, logger="disagg_moe.experts"):
        p = place_replicas(alloc, a, [9, 16, 10], 2, 2)
    assert any("swap" in r.message for r in caplog.records)
    assert p.instances == (frozenset({Z, Y}), frozenset({Y, X}))
    assert max_coactivation_load(p, a) == 7
    p.validate(alloc)


def test_place_infeasible_replica_count():
    with pytest.raises(InfeasiblePlacementError, match=r"r_i <= N"):
        place_replicas(ReplicaAllocation((3, 1)), np.zeros((2, 2)), [1, 1], 2, 4)
    with pytest.raises(InfeasiblePlacementError, match=r"N\*C"):
        place_replicas(ReplicaAllocation((2, 2)), np.zeros((2, 2)), [1, 1], 2, 1)


def test_brute_force_single_instance():
    a = _sym(3, {(0, 1): 2, (1, 2): 3, (0, 2): 4})
    p = brute_force_place(ReplicaAllocation((1, 1, 1)), a, 1, 3)
    assert max_coactivation_load(p, a) == 9


def test_brute_force_guard():
    with pytest.raises(InstanceTooLargeError):
        brute_force_place(ReplicaAllocation((1,) * 13), np.zeros((13, 13)), 4, 4)
    with pytest.raises(InstanceTooLargeError):
        brute_force_place(ReplicaAllocation((1, 1)), np.zeros((2, 2)), 5, 1)


def _oracle_place_objective(r, a, n, cap):
    """Independent exhaustive search over host sets, no pruning."""
    options = [list(itertools.combinations(range(n), ri)) for ri in r]
    best = None
    for pick in itertools.product(*options):
        members = [[] for _ in range(n)]
        for e, gs in enumerate(pick):
            for g in gs:
                members[g].append(e)
        if any(len(m) > cap for m in members):
            continue
        val = max(sum(a[i, j] for i, j in itertools.combinations(m, 2)) for m in members)
        best = val if best is None else min(best, val)
    return best


def test_brute_force_place_matches_unpruned_oracle():
    checked = 0
    for seed in range(300):
        alloc, a, counts, n, cap = instances.placement_instance(seed)
        space = np.prod([len(list(itertools.combinations(range(n), ri))) for ri in alloc.replicas])
        if space > 20000:
            continue
        p = brute_force_place(alloc, a, n, cap)
        p.validate(alloc)
        assert max_coactivation_load(p, a) == _oracle_place_objective(alloc.replicas, a, n, cap)
        checked += 1
    assert checked >= 100


def test_roundrobin_place_valid():
    alloc = uniform_allocation(10, 12, max_replicas=3)
    p = roundrobin_place(alloc, 3, 4)
    p.validate(alloc)


def test_placement_round_trips():
    alloc = ReplicaAllocation((2, 1, 1))
    p = place_replicas(alloc, np.zeros((3, 3)), [3, 2, 1], 2, 2)
    assert Placement.from_dict(p.to_dict()) == p
    rmap = p.to_replica_map(3)
    assert replica_map_from_dict(replica_map_to_dict(rmap)) == rmap
    assert isinstance(rmap, ReplicaMap) and rmap.replica_count(0) == 2
