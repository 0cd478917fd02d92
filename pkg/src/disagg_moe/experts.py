"""Activation statistics, replica allocation and co-activation-aware placement.

Replica counts come from water-filling on per-replica load ``c_i / r_i``;
placement then processes replicas hottest first and puts each one where it
adds the least co-activation to the instance's already placed experts,
falling back to a single swap when every instance with room already holds
the expert.
"""
from __future__ import annotations

import heapq
import itertools
import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .scheduler import InstanceTooLargeError, ReplicaMap

log = logging.getLogger(__name__)


class PlacementError(ValueError):
    pass


class InfeasiblePlacementError(PlacementError):
    def __init__(self, constraint: str, message: str):
        super().__init__(f"infeasible ({constraint}): {message}")
        self.constraint = constraint


class PlacementDeadlockError(PlacementError):
    pass


class ActivationStats:
    """Sliding window of per-step activated expert sets.

    ``counts[i]`` accumulates activations of expert ``i`` (one per step
    unless token weights are supplied) and ``coactivation[i, j]`` counts the
    steps in which both ``i`` and ``j`` were active.  Steps older than
    ``window`` are retired.  Single writer; hand ``snapshot()`` to readers.
    """

    def __init__(self, num_experts: int, window: int = 256):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.num_experts = num_experts
        self.window = window
        self.window_len = 0
        self.counts = np.zeros(num_experts, dtype=np.float64)
        self.coactivation = np.zeros((num_experts, num_experts), dtype=np.int64)
        self._steps: deque = deque()

    def record(self, activated: Iterable[int], weights: Sequence[float] | None = None) -> "ActivationStats":
        idx = np.unique(np.fromiter(activated, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.num_experts):
            raise ValueError("expert ID out of range")
        w = np.ones(idx.size) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != idx.shape:
            raise ValueError("weights must align with the sorted activated set")
        self._apply(idx, w, +1)
        self._steps.append((idx, w))
        self.window_len += 1
        while len(self._steps) > self.window:
            old_idx, old_w = self._steps.popleft()
            self._apply(old_idx, old_w, -1)
            self.window_len -= 1
        return self

    def _apply(self, idx, w, sign):
        if not idx.size:
            return
        self.counts[idx] += sign * w
        if idx.size > 1:
            block = np.ix_(idx, idx)
            self.coactivation[block] += sign
            self.coactivation[idx, idx] -= sign

    def snapshot(self) -> "ActivationStats":
        other = ActivationStats(self.num_experts, self.window)
        other.window_len = self.window_len
        other.counts = self.counts.copy()
        other.coactivation = self.coactivation.copy()
        other._steps = deque(self._steps)
        return other

    def to_dict(self) -> dict:
        ii, jj = np.nonzero(np.triu(self.coactivation, 1))
        return {
            "num_experts": self.num_experts,
            "window_len": self.window_len,
            "counts": self.counts.tolist(),
            "coactivation": [[int(i), int(j), int(self.coactivation[i, j])] for i, j in zip(ii, jj)],
        }


def record_step(stats: ActivationStats, activated: Iterable[int],
                weights: Sequence[float] | None = None) -> ActivationStats:
    return stats.record(activated, weights)


def load_stats(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``counts`` and a dense symmetric co-activation matrix from JSON."""
    raw = json.loads(Path(path).read_text())
    counts = np.asarray(raw["counts"], dtype=np.float64)
    n = int(raw.get("num_experts", counts.size))
    if counts.size != n:
        raise ValueError("counts length does not match num_experts")
    a = np.zeros((n, n), dtype=np.float64)
    for i, j, v in raw.get("coactivation", []):
        a[i, j] = a[j, i] = v
    return counts, a


# ---------------------------------------------------------------------------
# replication

@dataclass(frozen=True)
class ReplicaAllocation:
    replicas: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.replicas)

    def to_dict(self) -> dict:
        return {"replicas": {str(e): r for e, r in enumerate(self.replicas)}}


def allocate_replicas(counts: Sequence[float], num_experts: int, total_slots: int,
                      max_replicas: int | None = None) -> ReplicaAllocation:
    """Water-filling: give each spare slot to the expert with the largest c_i/r_i.

    With ``max_replicas`` set, experts at the cap stop competing and slots
    that nobody can take are left unused.
    """
    c = [float(x) for x in counts]
    if len(c) != num_experts:
        raise ValueError("counts length must equal num_experts")
    if total_slots < num_experts:
        raise InfeasiblePlacementError("S >= E", f"{total_slots} slots for {num_experts} experts")
    if any(x < 0 for x in c):
        raise ValueError("counts must be non-negative")
    r = [1] * num_experts
    heap = [(-c[i], i) for i in range(num_experts)]
    heapq.heapify(heap)
    for _ in range(total_slots - num_experts):
        while heap:
            _, i = heapq.heappop(heap)
            if max_replicas is None or r[i] < max_replicas:
                break
        else:
            break
        r[i] += 1
        if max_replicas is None or r[i] < max_replicas:
            heapq.heappush(heap, (-c[i] / r[i], i))
    return ReplicaAllocation(tuple(r))


def uniform_allocation(num_experts: int, total_slots: int, max_replicas: int | None = None) -> ReplicaAllocation:
    """Spread spare slots over experts cyclically in ID order (baseline)."""
    r = [1] * num_experts
    cap = max_replicas or total_slots
    spare = total_slots - num_experts
    e = 0
    while spare > 0 and any(x < cap for x in r):
        if r[e] < cap:
            r[e] += 1
            spare -= 1
        e = (e + 1) % num_experts
    return ReplicaAllocation(tuple(r))


# ---------------------------------------------------------------------------
# placement

@dataclass(frozen=True)
class Placement:
    instances: tuple[frozenset, ...]
    capacity: int

    @property
    def num_instances(self) -> int:
        return len(self.instances)

    def x(self, expert: int, g: int) -> int:
        return int(expert in self.instances[g])

    def replica_counts(self, num_experts: int) -> list[int]:
        r = [0] * num_experts
        for p in self.instances:
            for e in p:
                r[e] += 1
        return r

    def to_replica_map(self, num_experts: int) -> ReplicaMap:
        hosts = [[] for _ in range(num_experts)]
        for g, p in enumerate(self.instances):
            for e in p:
                hosts[e].append(g)
        return ReplicaMap(self.num_instances, self.capacity, tuple(tuple(h) for h in hosts))

    def to_dict(self) -> dict:
        hosts: dict[int, list[int]] = {}
        for g, p in enumerate(self.instances):
            for e in sorted(p):
                hosts.setdefault(e, []).append(g)
        return {
            "num_instances": self.num_instances,
            "slots_per_instance": self.capacity,
            "hosts": {str(e): hosts[e] for e in sorted(hosts)},
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Placement":
        n = int(raw["num_instances"])
        sets = [set() for _ in range(n)]
        for e, gs in raw["hosts"].items():
            for g in gs:
                sets[int(g)].add(int(e))
        return cls(tuple(frozenset(s) for s in sets), int(raw["slots_per_instance"]))

    def validate(self, alloc: ReplicaAllocation | None = None) -> None:
        for g, p in enumerate(self.instances):
            if len(p) > self.capacity:
                raise PlacementError(f"instance {g} over capacity")
        if alloc is not None:
            got = self.replica_counts(len(alloc.replicas))
            if tuple(got) != tuple(alloc.replicas):
                raise PlacementError("replica counts differ from the allocation")


def replica_map_to_dict(rmap: ReplicaMap) -> dict:
    return {
        "num_instances": rmap.num_instances,
        "slots_per_instance": rmap.slots_per_instance,
        "hosts": {str(e): list(h) for e, h in enumerate(rmap.hosts)},
    }


def replica_map_from_dict(raw: Mapping) -> ReplicaMap:
    hosts = {int(e): tuple(int(g) for g in gs) for e, gs in raw["hosts"].items()}
    n = max(hosts) + 1 if hosts else 0
    missing = [e for e in range(n) if e not in hosts]
    if missing:
        raise ValueError(f"expert {missing[0]} missing from replica map")
    return ReplicaMap.from_hosts([hosts[e] for e in range(n)], int(raw["num_instances"]),
                                 raw.get("slots_per_instance"))


def coactivation_load(placement: Placement | Sequence[Iterable[int]], a: np.ndarray, g: int) -> float:
    sets = placement.instances if isinstance(placement, Placement) else placement
    members = sorted(sets[g])
    if len(members) < 2:
        return 0
    sub = np.asarray(a)[np.ix_(members, members)]
    return sub[np.triu_indices(len(members), 1)].sum().item()


def max_coactivation_load(placement: Placement, a: np.ndarray) -> float:
    return max((coactivation_load(placement, a, g) for g in range(placement.num_instances)), default=0)


def _check_feasible(r: Sequence[int], n: int, cap: int) -> None:
    for e, ri in enumerate(r):
        if ri > n:
            raise InfeasiblePlacementError("r_i <= N", f"expert {e} needs {ri} replicas on {n} instances")
        if ri < 0:
            raise ValueError("negative replica count")
    if sum(r) > n * cap:
        raise InfeasiblePlacementError("sum r_i <= N*C", f"{sum(r)} replicas exceed {n * cap} slots")


def place_replicas(alloc: ReplicaAllocation, a: np.ndarray, counts: Sequence[float],
                   num_instances: int, capacity: int) -> Placement:
    r = list(alloc.replicas)
    _check_feasible(r, num_instances, capacity)
    a = np.asarray(a, dtype=np.float64)
    order = sorted(
        ((counts[e] / r[e], e, k) for e in range(len(r)) for k in range(r[e])),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    placed = [set() for _ in range(num_instances)]
    # running sum over placed members of a[e, :], per instance
    affinity = np.zeros((num_instances, len(r)))
    inst_load = [0.0] * num_instances

    def load_with(members):
        m = sorted(members)
        if len(m) < 2:
            return 0.0
        sub = a[np.ix_(m, m)]
        return float(sub[np.triu_indices(len(m), 1)].sum())

    for _, e, _k in order:
        feasible = [g for g in range(num_instances) if len(placed[g]) < capacity and e not in placed[g]]
        if feasible:
            g = min(feasible, key=lambda g: (affinity[g, e], g))
            inst_load[g] += affinity[g, e]
            placed[g].add(e)
            affinity[g] += a[e]
            continue
        best = None
        for g in range(num_instances):
            if e in placed[g]:
                continue
            for j in sorted(placed[g]):
                for h in range(num_instances):
                    if h == g or len(placed[h]) >= capacity or j in placed[h]:
                        continue
                    new_g = load_with((placed[g] - {j}) | {e})
                    new_h = load_with(placed[h] | {j})
                    delta = max(new_g, new_h) - max(inst_load[g], inst_load[h])
                    key = (delta, g, j, h)
                    if best is None or key < best[0]:
                        best = (key, new_g, new_h)
        if best is None:
            raise PlacementDeadlockError(f"no swap frees a slot for expert {e}")
        (_, g, j, h), new_g, new_h = best
        log.debug("swap: expert %d onto instance %d, moving %d to %d", e, g, j, h)
        placed[g].discard(j)
        placed[g].add(e)
        placed[h].add(j)
        affinity[g] += a[e] - a[j]
        affinity[h] += a[j]
        inst_load[g], inst_load[h] = new_g, new_h
    return Placement(tuple(frozenset(p) for p in placed), capacity)


def roundrobin_place(alloc: ReplicaAllocation, num_instances: int, capacity: int) -> Placement:
    """Baseline: deal replicas out cyclically in expert-ID order."""
    r = list(alloc.replicas)
    _check_feasible(r, num_instances, capacity)
    placed = [set() for _ in range(num_instances)]
    g = 0
    for e, ri in enumerate(r):
        for _ in range(ri):
            for step in range(num_instances):
                h = (g + step) % num_instances
                if len(placed[h]) < capacity and e not in placed[h]:
                    break
            else:
                raise PlacementDeadlockError(f"round-robin cannot place expert {e}")
            placed[h].add(e)
            g = (h + 1) % num_instances
    return Placement(tuple(frozenset(p) for p in placed), capacity)


def brute_force_place(alloc: ReplicaAllocation, a: np.ndarray, num_instances: int, capacity: int,
                      max_replicas: int = 12, max_instances: int = 4) -> Placement:
    """Exact minimum of max_g I(g) by branch and bound.

    Experts are placed in ID order; empty instances are interchangeable, so
    only the lowest-numbered empty instances are tried.
    """
    r = list(alloc.replicas)
    if sum(r) > max_replicas or num_instances > max_instances:
        raise InstanceTooLargeError(
            f"instance-too-large: {sum(r)} replicas on {num_instances} instances "
            f"(limit {max_replicas}, {max_instances})")
    _check_feasible(r, num_instances, capacity)
    a = np.asarray(a, dtype=np.float64)
    n_exp = len(r)
    placed = [[] for _ in range(num_instances)]
    loads = [0.0] * num_instances
    best = [float("inf"), None]

    def rec(e):
        cur = max(loads)
        if cur >= best[0]:
            return
        if e == n_exp:
            best[0], best[1] = cur, [list(p) for p in placed]
            return
        empties = [g for g in range(num_instances) if not placed[g]]
        for combo in itertools.combinations(range(num_instances), r[e]):
            used_empty = [g for g in combo if not placed[g]]
            if used_empty != empties[: len(used_empty)]:
                continue
            if any(len(placed[g]) >= capacity for g in combo):
                continue
            added = [float(sum(a[e, j] for j in placed[g])) for g in combo]
            for g, add in zip(combo, added):
                placed[g].append(e)
                loads[g] += add
            rec(e + 1)
            for g, add in zip(combo, added):
                placed[g].pop()
                loads[g] -= add

    rec(0)
    if best[1] is None:
        raise InfeasiblePlacementError("capacity", "no placement satisfies the constraints")
    return Placement(tuple(frozenset(p) for p in best[1]), capacity)
