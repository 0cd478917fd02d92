"""Activated-expert-balanced scheduling (AEBS) of top-k routings onto replicas.

The load of an MoE instance is the number of *distinct* replicas it has to
run in a layer step, not the number of tokens routed to it.  ``schedule``
picks one replica per activated logical expert: experts with a single
replica go to their only host, every other expert goes to the least-loaded
host among its replicas.  Ties are broken by ascending expert ID and then
ascending instance ID, so every caller that sees the same inputs computes
the same assignment without coordinating.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class SchedulingError(ValueError):
    pass


class UnknownExpertError(SchedulingError):
    def __init__(self, expert: int):
        super().__init__(f"unknown-expert: {expert} has no replica in the map")
        self.expert = expert


class InstanceTooLargeError(SchedulingError):
    pass


@dataclass(frozen=True)
class ReplicaMap:
    """Logical expert -> hosting instances, with physical replica IDs.

    ``hosts[e]`` is the ascending tuple of instances holding expert ``e``.
    Physical IDs are ``g * slots_per_instance + slot`` where ``slot`` is the
    expert's position on instance ``g`` in ascending-expert order, so they
    are unique cluster-wide.
    """

    num_instances: int
    slots_per_instance: int
    hosts: tuple[tuple[int, ...], ...]
    _phys: dict = field(init=False, repr=False, compare=False)
    _table: np.ndarray = field(init=False, repr=False, compare=False)
    _single: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        per_instance: list[list[int]] = [[] for _ in range(self.num_instances)]
        hosts = tuple(tuple(sorted(h)) for h in self.hosts)
        object.__setattr__(self, "hosts", hosts)
        for e, hs in enumerate(hosts):
            if not hs:
                raise SchedulingError(f"expert {e} has no replica")
            if len(set(hs)) != len(hs):
                raise SchedulingError(f"expert {e} has two replicas on one instance")
            for g in hs:
                if not 0 <= g < self.num_instances:
                    raise SchedulingError(f"expert {e} placed on unknown instance {g}")
                per_instance[g].append(e)
        phys = {}
        for g, experts in enumerate(per_instance):
            if len(experts) > self.slots_per_instance:
                raise SchedulingError(f"instance {g} holds {len(experts)} > {self.slots_per_instance} replicas")
            for slot, e in enumerate(sorted(experts)):
                phys[(e, g)] = g * self.slots_per_instance + slot
        object.__setattr__(self, "_phys", phys)
        # dense (expert, host-rank) -> physical table, -1 padded, for vector lookups
        width = max(len(h) for h in hosts)
        table = np.full((len(hosts), width), -1, dtype=np.int64)
        for e, hs in enumerate(hosts):
            table[e, : len(hs)] = [phys[(e, g)] for g in hs]
        object.__setattr__(self, "_table", table)
        # forced host of single-replica experts (-1 otherwise), for the fast path
        single = np.array([hs[0] if len(hs) == 1 else -1 for hs in hosts], dtype=np.int64)
        object.__setattr__(self, "_single", single)

    @classmethod
    def from_hosts(cls, hosts: Mapping[int, Iterable[int]] | Sequence[Iterable[int]],
                   num_instances: int, slots_per_instance: int | None = None) -> "ReplicaMap":
        if isinstance(hosts, Mapping):
            n = max(hosts) + 1
            seq = [tuple(hosts.get(e, ())) for e in range(n)]
        else:
            seq = [tuple(h) for h in hosts]
        if slots_per_instance is None:
            counts = [0] * num_instances
            for hs in seq:
                for g in hs:
                    counts[g] += 1
            slots_per_instance = max(max(counts), 1)
        return cls(num_instances, slots_per_instance, tuple(seq))

    @property
    def num_experts(self) -> int:
        return len(self.hosts)

    def replica_count(self, e: int) -> int:
        return len(self.hosts[e])

    def physical_id(self, e: int, g: int) -> int:
        return self._phys[(e, g)]

    def instance_of(self, physical: int) -> int:
        return int(physical) // self.slots_per_instance

    def experts_on(self, g: int) -> list[int]:
        return sorted(e for e, hs in enumerate(self.hosts) if g in hs)


@dataclass(frozen=True)
class ActivationBatch:
    """Top-k logical expert IDs per token, shape (T, k)."""

    topk: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.topk, dtype=np.int64)
        if arr.ndim != 2:
            if arr.size == 0:
                arr = arr.reshape(0, max(arr.shape[-1] if arr.ndim else 0, 0))
            else:
                raise ValueError("topk must be a (T, k) array")
        if arr.size and arr.min() < 0:
            raise ValueError("expert IDs must be non-negative")
        if arr.shape[0] and arr.shape[1] > 1:
            s = np.sort(arr, axis=1)
            if (s[:, 1:] == s[:, :-1]).any():
                raise ValueError("a token's top-k experts must be distinct")
        arr.setflags(write=False)
        object.__setattr__(self, "topk", arr)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], k: int | None = None) -> "ActivationBatch":
        if not rows:
            return cls(np.zeros((0, k or 0), dtype=np.int64))
        return cls(np.array(rows, dtype=np.int64))

    @property
    def num_tokens(self) -> int:
        return self.topk.shape[0]

    @property
    def k(self) -> int:
        return self.topk.shape[1]


@dataclass(frozen=True)
class Assignment:
    out: np.ndarray                 # (T, k) physical replica IDs
    per_instance_load: np.ndarray   # distinct activated replicas per instance
    expert_instance: dict           # activated logical expert -> chosen instance

    @property
    def max_load(self) -> int:
        return int(self.per_instance_load.max()) if self.per_instance_load.size else 0

    @property
    def imbalance(self) -> int:
        if not self.per_instance_load.size:
            return 0
        return int(self.per_instance_load.max() - self.per_instance_load.min())


def collect_activated(batch: ActivationBatch) -> list[int]:
    """Sorted distinct logical experts referenced by the batch."""
    return np.unique(batch.topk).tolist()


def _check_known(experts: Sequence[int], rmap: ReplicaMap) -> None:
    if experts and experts[-1] >= rmap.num_experts:
        bad = next(e for e in experts if e >= rmap.num_experts)
        raise UnknownExpertError(bad)


def _remap(batch: ActivationBatch, rmap: ReplicaMap, choice: dict) -> np.ndarray:
    if batch.num_tokens == 0:
        return np.zeros_like(batch.topk)
    lut = np.full(rmap.num_experts, -1, dtype=np.int64)
    for e, g in choice.items():
        lut[e] = rmap.physical_id(e, g)
    return lut[batch.topk]


def _assignment(batch, rmap, choice) -> Assignment:
    load = np.zeros(rmap.num_instances, dtype=np.int64)
    for g in choice.values():
        load[g] += 1
    return Assignment(_remap(batch, rmap, choice), load, dict(choice))


def schedule(batch: ActivationBatch, rmap: ReplicaMap) -> Assignment:
    flat = batch.topk.ravel()
    if flat.size and flat.max() >= rmap.num_experts:
        raise UnknownExpertError(int(flat[flat >= rmap.num_experts][0]))
    hit = np.bincount(flat, minlength=rmap.num_experts) > 0
    experts = np.flatnonzero(hit)
    forced = rmap._single[experts]
    is_single = forced >= 0
    # single-replica experts first; their order only affects bookkeeping
    load = np.bincount(forced[is_single], minlength=rmap.num_instances).tolist()
    inst = forced.copy()
    rank = np.zeros(experts.size, dtype=np.int64)  # position of the chosen host in hosts[e]
    hosts = rmap.hosts
    multi_pos = np.flatnonzero(~is_single).tolist()
    multi_ids = experts[~is_single].tolist()
    for pos, e in zip(multi_pos, multi_ids):
        best = best_load = None
        for i, g in enumerate(hosts[e]):  # ascending, so strict < keeps the lowest ID on ties
            if best_load is None or load[g] < best_load:
                best, best_load = i, load[g]
        g = hosts[e][best]
        inst[pos] = g
        rank[pos] = best
        load[g] += 1
    lut = np.full(rmap.num_experts, -1, dtype=np.int64)
    lut[experts] = rmap._table[experts, rank]
    out = lut[batch.topk] if batch.num_tokens else np.zeros_like(batch.topk)
    choice = dict(zip(experts.tolist(), inst.tolist()))
    return Assignment(out, np.array(load, dtype=np.int64), choice)


def random_schedule(batch: ActivationBatch, rmap: ReplicaMap, rng: np.random.Generator) -> Assignment:
    """Baseline: every token slot picks a uniformly random replica of its expert.

    Distinct tokens hitting the same multi-replica expert may land on
    different replicas, which is what token-level random dispatch does.
    """
    experts = collect_activated(batch)
    _check_known(experts, rmap)
    if batch.num_tokens == 0:
        return Assignment(np.zeros_like(batch.topk), np.zeros(rmap.num_instances, dtype=np.int64), {})
    counts = np.array([len(h) for h in rmap.hosts], dtype=np.int64)
    flat = batch.topk.ravel()
    rank = (rng.random(flat.size) * counts[flat]).astype(np.int64)
    out = rmap._table[flat, rank].reshape(batch.topk.shape)
    used = np.unique(out)
    load = np.bincount(used // rmap.slots_per_instance, minlength=rmap.num_instances)
    uniq, first = np.unique(flat, return_index=True)
    inst = out.ravel()[first] // rmap.slots_per_instance
    choice = dict(zip(uniq.tolist(), inst.tolist()))
    return Assignment(out, load.astype(np.int64), choice)


def recount_load(a: Assignment, rmap: ReplicaMap) -> np.ndarray:
    """Distinct replicas per instance, recomputed from the token mapping."""
    used = np.unique(a.out) if a.out.size else np.zeros(0, dtype=np.int64)
    return np.bincount(used // rmap.slots_per_instance, minlength=rmap.num_instances).astype(np.int64)


def routed_tokens(a: Assignment, rmap: ReplicaMap) -> np.ndarray:
    """Token-expert activations landing on each instance."""
    if not a.out.size:
        return np.zeros(rmap.num_instances, dtype=np.int64)
    return np.bincount(a.out.ravel() // rmap.slots_per_instance, minlength=rmap.num_instances)


def max_activated_load(a: Assignment) -> int:
    return a.max_load


def brute_force_schedule(batch: ActivationBatch, rmap: ReplicaMap,
                         max_experts: int = 20, max_choices: int = 10**6) -> Assignment:
    """Exhaustive minimum of the max per-instance activated load.

    Ties go to the lexicographically smallest choice vector (experts in
    ascending ID, candidate instances in ascending ID).
    """
    experts = collect_activated(batch)
    _check_known(experts, rmap)
    if len(experts) > max_experts:
        raise InstanceTooLargeError(f"instance-too-large: {len(experts)} activated experts > {max_experts}")
    options = [rmap.hosts[e] for e in experts]
    total = 1
    for opt in options:
        total *= len(opt)
    if total > max_choices:
        raise InstanceTooLargeError(f"instance-too-large: {total} choice vectors > {max_choices}")
    best_vec, best_val = None, None
    n = rmap.num_instances
    for vec in itertools.product(*options):
        load = [0] * n
        for g in vec:
            load[g] += 1
        val = max(load) if load else 0
        if best_val is None or val < best_val:
            best_vec, best_val = vec, val
    choice = dict(zip(experts, best_vec or ()))
    return _assignment(batch, rmap, choice)


def load_batch(path) -> ActivationBatch:
    """One token per line, its top-k logical expert IDs separated by spaces."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].split()
            if not body:
                continue
            try:
                row = [int(x) for x in body]
            except ValueError:
                raise ValueError(f"line {lineno}: expert IDs must be integers") from None
            if rows and len(row) != len(rows[0]):
                raise ValueError(f"line {lineno}: expected {len(rows[0])} experts, got {len(row)}")
            if len(set(row)) != len(row):
                raise ValueError(f"line {lineno}: repeated expert in one token")
            rows.append(row)
    return ActivationBatch.from_rows(rows)


def save_batch(batch: ActivationBatch, path) -> None:
    with open(path, "w") as fh:
        for row in batch.topk.tolist():
            fh.write(" ".join(map(str, row)) + "\n")


def assignment_to_dict(a: Assignment, rmap: ReplicaMap) -> dict:
    return {
        "expert_instance": {str(e): g for e, g in sorted(a.expert_instance.items())},
        "physical": a.out.tolist(),
        "per_instance_load": a.per_instance_load.tolist(),
        "routed_tokens": routed_tokens(a, rmap).tolist(),
        "max_load": a.max_load,
        "imbalance": a.imbalance,
    }
