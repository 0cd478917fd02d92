"""Cost model for attention <-> MoE activation exchange.

Three plan shapes are built for one layer step:

* ``strawman`` -- every attention instance sends its token shard straight to
  every MoE instance (m*n small messages);
* ``two-phase-case1`` -- attention nodes all-gather over NVLink, then one
  aggregator per attention node sends a bulk transfer to each MoE node;
* ``two-phase-case2`` -- after the all-gather each attention instance sends a
  slice of its node's batch to one designated MoE instance, and every MoE
  node multicasts what it received over NVLink.

The reverse direction mirrors each shape with intra-node all-reduce on the
MoE side.  Gating runs on the MoE side, so every plan ships whole activation
batches regardless of routing.

Latency: phases run back to back.  Inside a phase, transfers sharing an
endpoint serialize and disjoint pairs overlap, so a phase lasts as long as
its busiest endpoint (the optimal preemptive schedule of a bipartite
transfer set).  Collectives run concurrently on different nodes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache

from .config import HardwareSpec

STRAWMAN = "strawman"
CASE1 = "two-phase-case1"
CASE2 = "two-phase-case2"
SELECTION_ORDER = (CASE1, CASE2, STRAWMAN)


@dataclass(frozen=True)
class StepTraffic:
    m: int
    m_nodes: int
    n: int
    n_nodes: int
    tokens: int
    token_bytes: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if not (1 <= self.m_nodes <= self.m and 1 <= self.n_nodes <= self.n):
            raise ValueError("node counts must lie in [1, instances]")
        if self.tokens < 0 or self.token_bytes < 1:
            raise ValueError("tokens must be >= 0 and token_bytes >= 1")

    @property
    def batch_bytes(self) -> int:
        return self.tokens * self.token_bytes


@dataclass(frozen=True)
class CollectiveOp:
    kind: str            # all-gather | multicast | all-reduce
    side: str            # attn | moe
    node: int
    participants: int
    bytes: int


@dataclass(frozen=True)
class Transfer:
    src: tuple           # (side, instance) or (side + "-node", node)
    dst: tuple
    bytes: int


@dataclass(frozen=True)
class CommPlan:
    scheme: str
    reverse: bool
    phase1_ops: tuple = ()
    phase2_transfers: tuple = ()
    phase3_ops: tuple = ()

    @property
    def inter_node_transfers(self) -> int:
        return len(self.phase2_transfers)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _split(total: int, parts: int) -> list[int]:
    q, r = divmod(total, parts)
    return [q + (i < r) for i in range(parts)]


def _node_members(count: int, nodes: int) -> list[list[int]]:
    sizes = _split(count, nodes)
    out, start = [], 0
    for s in sizes:
        out.append(list(range(start, start + s)))
        start += s
    return out


def _shares(t: StepTraffic):
    """Tokens per attention instance and per attention node."""
    per_inst = _split(t.tokens, t.m)
    nodes = _node_members(t.m, t.m_nodes)
    per_node = [sum(per_inst[i] for i in members) for members in nodes]
    return per_inst, nodes, per_node


def strawman_plan(t: StepTraffic, reverse: bool = False) -> CommPlan:
    per_inst, _, _ = _shares(t)
    transfers = []
    for a in range(t.m):
        nbytes = per_inst[a] * t.token_bytes
        for e in range(t.n):
            src, dst = ("attn", a), ("moe", e)
            transfers.append(Transfer(*(dst, src) if reverse else (src, dst), nbytes))
    return CommPlan(STRAWMAN, reverse, (), tuple(transfers), ())


def case2_feasible(t: StepTraffic) -> bool:
    """Every attention node has enough instances to reach each MoE node once."""
    return min(len(m) for m in _node_members(t.m, t.m_nodes)) >= t.n_nodes


def _case1(t: StepTraffic, reverse: bool) -> CommPlan:
    _, a_nodes, a_tokens = _shares(t)
    m_nodes = _node_members(t.n, t.n_nodes)
    if not reverse:
        p1 = tuple(CollectiveOp("all-gather", "attn", a, len(mem), a_tokens[a] * t.token_bytes)
                   for a, mem in enumerate(a_nodes))
    else:
        p1 = tuple(CollectiveOp("all-reduce", "moe", d, len(mem), t.batch_bytes)
                   for d, mem in enumerate(m_nodes))
    transfers = []
    for a in range(t.m_nodes):
        for d in range(t.n_nodes):
            src, dst = ("attn-node", a), ("moe-node", d)
            transfers.append(Transfer(*(dst, src) if reverse else (src, dst), a_tokens[a] * t.token_bytes))
    return CommPlan(CASE1, reverse, p1, tuple(transfers), ())


def _case2(t: StepTraffic, reverse: bool) -> CommPlan:
    per_inst, a_nodes, a_tokens = _shares(t)
    m_nodes = _node_members(t.n, t.n_nodes)
    transfers = []
    for a, members in enumerate(a_nodes):
        # instance j of this node serves MoE node j mod n_nodes; senders that
        # share a destination split the node batch between them
        groups: dict[int, list[int]] = {}
        for j, inst in enumerate(members):
            groups.setdefault(j % t.n_nodes, []).append(inst)
        for d, senders in groups.items():
            slices = _split(a_tokens[a], len(senders))
            receivers = m_nodes[d]
            for s, (inst, ntok) in enumerate(zip(senders, slices)):
                peer = ("moe", receivers[(a * len(senders) + s) % len(receivers)])
                src = ("attn", inst)
                transfers.append(Transfer(*(peer, src) if reverse else (src, peer), ntok * t.token_bytes))
    if not reverse:
        p1 = tuple(CollectiveOp("all-gather", "attn", a, len(mem), a_tokens[a] * t.token_bytes)
                   for a, mem in enumerate(a_nodes))
        p3 = tuple(CollectiveOp("multicast", "moe", d, len(mem), t.batch_bytes)
                   for d, mem in enumerate(m_nodes))
    else:
        p1 = tuple(CollectiveOp("all-reduce", "moe", d, len(mem), t.batch_bytes)
                   for d, mem in enumerate(m_nodes))
        p3 = tuple(CollectiveOp("all-reduce", "attn", a, len(mem), a_tokens[a] * t.token_bytes)
                   for a, mem in enumerate(a_nodes))
    return CommPlan(CASE2, reverse, p1, tuple(transfers), p3)


def two_phase_plan(t: StepTraffic, threshold: int = 2, reverse: bool = False,
                   case: int | None = None) -> CommPlan:
    """Case-1 when the MoE side spans at most ``threshold`` nodes (always for one), else case-2.

    Case-2 needs at least ``n_nodes`` attention instances per attention node;
    layouts without them get case-1.  ``case`` forces a regime.
    """
    if case is None:
        case = 1 if t.n_nodes <= max(threshold, 1) else 2
    if case == 2 and case2_feasible(t):
        return _case2(t, reverse)
    return _case1(t, reverse)


def _collective_time(op: CollectiveOp, hw: HardwareSpec) -> float:
    if op.participants <= 1 or op.bytes == 0:
        return 0.0
    ring = (op.participants - 1) / op.participants
    return hw.msg_fixed_latency + ring * op.bytes / hw.intra_node_bw


def _transfer_phase_time(transfers, hw: HardwareSpec) -> float:
    busy: dict[tuple, float] = {}
    for tr in transfers:
        if tr.bytes <= 0:
            continue
        cost = hw.msg_fixed_latency + tr.bytes / hw.inter_node_bw
        busy[tr.src] = busy.get(tr.src, 0.0) + cost
        busy[tr.dst] = busy.get(tr.dst, 0.0) + cost
    return max(busy.values(), default=0.0)


def plan_latency(plan: CommPlan, hw: HardwareSpec) -> float:
    t = 0.0
    if plan.phase1_ops:
        t += max(_collective_time(op, hw) for op in plan.phase1_ops)
    t += _transfer_phase_time(plan.phase2_transfers, hw)
    if plan.phase3_ops:
        t += max(_collective_time(op, hw) for op in plan.phase3_ops)
    return t


def candidate_plans(t: StepTraffic, reverse: bool = False) -> list[CommPlan]:
    plans = [_case1(t, reverse)]
    if case2_feasible(t):
        plans.append(_case2(t, reverse))
    plans.append(strawman_plan(t, reverse))
    return plans


def select_scheme(t: StepTraffic, hw: HardwareSpec, reverse: bool = False) -> CommPlan:
    """Cheapest plan; ties prefer case-1, then case-2, then the strawman."""
    plans = candidate_plans(t, reverse)
    return min(plans, key=lambda p: (plan_latency(p, hw), SELECTION_ORDER.index(p.scheme)))


@lru_cache(maxsize=65536)
def step_comm_latency(t: StepTraffic, hw: HardwareSpec, scheme: str, threshold: int = 2) -> tuple[float, float]:
    """(forward, reverse) latency of one layer step under ``scheme``.

    ``scheme`` is ``"strawman"``, ``"two-phase"`` (adaptive selection) or
    one of the forced plan names.
    """
    def pick(rev):
        if scheme == STRAWMAN:
            return strawman_plan(t, rev)
        if scheme == "two-phase":
            return select_scheme(t, hw, rev)
        if scheme == CASE1:
            return two_phase_plan(t, threshold, rev, case=1)
        if scheme == CASE2:
            return two_phase_plan(t, threshold, rev, case=2)
        raise ValueError(f"unknown scheme {scheme!r}")
    return plan_latency(pick(False), hw), plan_latency(pick(True), hw)
