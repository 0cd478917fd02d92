"""Discrete-event decode simulator and the per-module autoscaler.

All active requests advance one token per decode step.  A step costs, per
layer, the slowest attention shard, the forward exchange, the slowest MoE
instance and the reverse exchange; MoE time comes from scheduling a sampled
top-k routing onto the current replica map.  Only ``layer_samples`` layers
are routed per step and their mean stands in for every layer, which is
exact in expectation because layers share one routing distribution.

With ``latency_cache`` on, the MoE term for a given (replica map, batch)
pair is estimated once from a fixed number of seeded samples and reused,
which keeps multi-day traces tractable.  Request bookkeeping is O(1) per
step either way: a request admitted at step s finishes at step s + output.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import comm
from .config import ClusterLayout, Config, ConfigError, rng_for
from .experts import (ActivationStats, allocate_replicas, place_replicas, roundrobin_place,
                      uniform_allocation)
from .latency import AttnStepLoad, attn_instance_latency, moe_layer_latency_arrays
from .scheduler import ActivationBatch, ReplicaMap, random_schedule, routed_tokens, schedule
from .workload import RequestTrace, RoutingPattern, gen_batch

CSV_COLUMNS = ("time", "tpot_mean", "tpot_p99", "slo_attainment", "per_gpu_throughput",
               "attn_instances", "moe_instances", "imbalance_mean")

CACHE_SAMPLES = 8
WARMUP_STEPS = 64
WARMUP_BATCH = 64
COMPACT_STEPS = 1 << 16
STATS_EVERY = 512
CACHE_MAX_TOKENS = 4096


def quantize_batch(tokens: int) -> int:
    """Exact up to 64 tokens, then a geometric grid with ~3% spacing."""
    if tokens <= 64:
        return tokens
    i = round(math.log(tokens / 64) / math.log(1.03))
    return int(round(64 * 1.03 ** i))


def weighted_quantile(values: Sequence[float], counts: Sequence[int], q: float) -> float:
    if not len(values):
        return 0.0
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(counts, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(c[order])
    idx = int(np.searchsorted(cum, q * cum[-1], side="left"))
    return float(v[order][min(idx, v.size - 1)])


@dataclass
class MetricsAccumulator:
    """Per-token TPOT samples stored run-length encoded, one run per step."""

    tpot_values: list = field(default_factory=list)
    tpot_counts: list = field(default_factory=list)
    slo_violations: int = 0
    tokens_emitted: int = 0
    gpu_seconds: float = 0.0
    per_step_imbalance: list = field(default_factory=list)
    imbalance_sum: float = 0.0
    imbalance_n: int = 0

    def add_step(self, latency: float, tokens: int, target: float) -> None:
        self.tpot_values.append(latency)
        self.tpot_counts.append(tokens)
        self.tokens_emitted += tokens
        if latency > target:
            self.slo_violations += tokens

    def add_imbalance(self, gaps, keep: bool = True) -> None:
        for gap in gaps:
            if keep:
                self.per_step_imbalance.append(gap)
            self.imbalance_sum += gap
            self.imbalance_n += 1

    @property
    def tpot_samples(self) -> np.ndarray:
        return np.repeat(np.asarray(self.tpot_values), np.asarray(self.tpot_counts, dtype=np.int64))

    def tpot_mean(self) -> float:
        if not self.tokens_emitted:
            return 0.0
        return float(np.dot(self.tpot_values, self.tpot_counts) / self.tokens_emitted)

    def tpot_p99(self) -> float:
        return weighted_quantile(self.tpot_values, self.tpot_counts, 0.99)

    def attainment(self) -> float:
        if not self.tokens_emitted:
            return 1.0
        return 1.0 - self.slo_violations / self.tokens_emitted

    def imbalance_mean(self) -> float:
        return self.imbalance_sum / self.imbalance_n if self.imbalance_n else 0.0


@dataclass
class MetricsReport:
    policy: str
    label: str
    tpot_mean: float
    tpot_p99: float
    slo_attainment: float
    per_gpu_throughput: float
    tokens_emitted: int
    completed_requests: int
    slo_violations: int
    gpu_seconds: float
    imbalance_mean: float
    duration: float
    timeline: list = field(default_factory=list)

    @property
    def gpu_hours(self) -> float:
        return self.gpu_seconds / 3600.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gpu_hours"] = self.gpu_hours
        return d

    def write(self, out_dir: str | Path, name: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / f"{name}.json"
        cpath = out / f"{name}.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.timeline:
                w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        return jpath, cpath


def _fmt(x):
    return f"{x:.9g}" if isinstance(x, float) else x


@dataclass(frozen=True)
class ScalingAction:
    delta_attn: int = 0
    delta_moe: int = 0

    @property
    def is_zero(self) -> bool:
        return self.delta_attn == 0 and self.delta_moe == 0


@dataclass(frozen=True)
class LoadForecast:
    """Expected load over the next interval.

    With ``batch`` set the batch size is taken as given; otherwise it is the
    fixed point of Little's law ``B = arrival_rate * mean_output * TPOT(B)``.
    """

    arrival_rate: float = 0.0
    mean_output: float = 256.0
    mean_context: float = 144.0
    mean_input: float = 16.0
    batch: float | None = None
    backlog: float = 0.0


@dataclass(frozen=True)
class StepBreakdown:
    attn: float
    comm_fwd: float
    moe: float
    comm_rev: float
    prefill: float
    num_layers: int
    imbalance: tuple = ()

    @property
    def per_layer(self) -> float:
        return self.attn + self.comm_fwd + self.moe + self.comm_rev

    @property
    def total(self) -> float:
        return self.num_layers * self.per_layer + self.prefill


@dataclass
class SimState:
    """Mutable simulation state.

    Requests are not tracked individually: ``done_n[s]`` and ``done_ctx[s]``
    hold how many requests finish at decode step ``s`` and their final
    context lengths, which is all the step loop needs.
    """

    clock: float
    layout: ClusterLayout
    replica_maps: dict
    stats: dict
    metrics: MetricsAccumulator
    active: int = 0
    context_sum: float = 0.0
    step: int = 0
    base: int = 0
    done_n: np.ndarray = field(default_factory=lambda: np.zeros(1024, dtype=np.int64))
    done_ctx: np.ndarray = field(default_factory=lambda: np.zeros(1024))
    completed_requests: int = 0

    @property
    def mean_context(self) -> float:
        return self.context_sum / self.active if self.active else 0.0

    def reserve(self, last_step: int) -> None:
        size = self.done_n.size
        if last_step < size:
            return
        new = max(2 * size, last_step + 1)
        self.done_n = np.concatenate([self.done_n, np.zeros(new - size, dtype=np.int64)])
        self.done_ctx = np.concatenate([self.done_ctx, np.zeros(new - size)])


def _map_fingerprint(rmap: ReplicaMap) -> int:
    return zlib.crc32(repr((rmap.num_instances, rmap.slots_per_instance, rmap.hosts)).encode())


class Simulator:
    """Decode-phase simulator for one configuration.

    ``policy`` overrides ``cfg.scaling.policy``; ``sched``, ``comm_scheme``
    and ``place`` override the ablation toggles.
    """

    def __init__(self, cfg: Config, policy: str | None = None, sched: str | None = None,
                 comm_scheme: str | None = None, place: str | None = None,
                 warmup_batch: int = WARMUP_BATCH):
        self.cfg = cfg
        sc = cfg.scaling
        self.policy = policy or sc.policy
        self.sched = sched or sc.sched
        self.comm_scheme = comm_scheme or sc.comm
        self.place = place or sc.place
        self.model = cfg.model
        self.hw = cfg.hardware
        self.pattern = RoutingPattern.from_spec(cfg.workload, cfg.seed)
        L = self.model.num_layers
        s = min(cfg.workload.layer_samples, L)
        self.sampled_layers = tuple(sorted({(i * L) // s for i in range(s)}))
        self.map_keys = self.sampled_layers if sc.per_layer_maps else (0,)
        self._moe_cache: dict = {}
        self._next_stats_step = 0
        self._last_decode = 0.0
        self._next_tick = cfg.scaling.interval
        self.last_breakdown: StepBreakdown | None = None
        self.state = SimState(0.0, cfg.cluster, {}, {}, MetricsAccumulator())
        for key in self.map_keys:
            self.state.stats[key] = ActivationStats(self.model.num_experts, sc.stats_window)
        self._warm(warmup_batch)
        self.rebuild_maps()

    # -- replica management -------------------------------------------------

    def _map_key(self, layer: int):
        return layer if self.cfg.scaling.per_layer_maps else 0

    def _warm(self, batch: int) -> None:
        E, k = self.model.num_experts, self.model.top_k
        for key in self.map_keys:
            stats = self.state.stats[key]
            for i in range(WARMUP_STEPS):
                b = gen_batch(self.pattern, batch, E, k, "warmup", key, i)
                ids, cnt = np.unique(b.topk, return_counts=True)
                stats.record(ids, cnt)

    def build_map(self, layout: ClusterLayout, stats: ActivationStats) -> ReplicaMap:
        E = self.model.num_experts
        n, c = layout.num_moe, layout.slots_per_instance
        if self.place == "activation-aware":
            snap = stats.snapshot()
            alloc = allocate_replicas(snap.counts, E, n * c, max_replicas=n)
            placement = place_replicas(alloc, snap.coactivation, snap.counts, n, c)
        else:
            placement = roundrobin_place(uniform_allocation(E, n * c, max_replicas=n), n, c)
        return placement.to_replica_map(E)

    def rebuild_maps(self) -> None:
        self._fingerprints = {}
        for key in self.map_keys:
            self.state.replica_maps[key] = self.build_map(self.state.layout, self.state.stats[key])

    def apply_layout(self, layout: ClusterLayout) -> None:
        moe_changed = (layout.num_moe, layout.moe_nodes) != (self.state.layout.num_moe, self.state.layout.moe_nodes)
        self.state.layout = layout
        if moe_changed:
            self.rebuild_maps()

    # -- latency terms -----------------------------------------------------

    def traffic(self, layout: ClusterLayout, tokens: int) -> comm.StepTraffic:
        return comm.StepTraffic(layout.num_attn, layout.attn_nodes, layout.num_moe, layout.moe_nodes,
                                tokens, self.model.token_bytes)

    def comm_latency(self, layout: ClusterLayout, tokens: int) -> tuple[float, float]:
        return comm.step_comm_latency(self.traffic(layout, tokens), self.hw, self.comm_scheme,
                                      self.cfg.scaling.case1_threshold)

    def attn_latency(self, layout: ClusterLayout, batch: int, context: float) -> float:
        shard = math.ceil(batch / layout.num_attn)
        return attn_instance_latency(AttnStepLoad(shard, max(context, 1.0)), self.model, self.hw)

    def prefill_latency(self, layout: ClusterLayout, admitted: int, mean_input: float) -> float:
        if admitted <= 0:
            return 0.0
        per_inst = math.ceil(admitted / layout.num_attn)
        one = attn_instance_latency(AttnStepLoad(1, max(mean_input, 1.0)), self.model, self.hw)
        return self.model.num_layers * per_inst * one

    def _assign(self, batch: ActivationBatch, rmap: ReplicaMap, *labels):
        if self.sched == "aebs":
            return schedule(batch, rmap)
        return random_schedule(batch, rmap, rng_for(self.cfg.seed, "random-sched", *labels))

    def moe_sample(self, batch: ActivationBatch, rmap: ReplicaMap, *labels) -> tuple[float, int]:
        a = self._assign(batch, rmap, *labels)
        lat = moe_layer_latency_arrays(a.per_instance_load, routed_tokens(a, rmap), self.model, self.hw)
        return lat, a.imbalance

    def cached_moe(self, rmap: ReplicaMap, tokens: int) -> tuple[float, float]:
        """Mean MoE latency and gap over seeded samples at a quantized batch.

        Batches above ``CACHE_MAX_TOKENS`` are sampled at that size with
        routed-token counts scaled up; by then every replica is active.
        """
        fp = self._fingerprints.get(id(rmap))
        if fp is None:
            fp = self._fingerprints[id(rmap)] = _map_fingerprint(rmap)
        tokens = quantize_batch(tokens)
        key = (fp, tokens, self.sched)
        hit = self._moe_cache.get(key)
        if hit is None:
            E, k = self.model.num_experts, self.model.top_k
            drawn = min(tokens, CACHE_MAX_TOKENS)
            lats, gaps = [], []
            for i in range(CACHE_SAMPLES):
                b = gen_batch(self.pattern, drawn, E, k, "cache", fp, drawn, i)
                a = self._assign(b, rmap, "cache", fp, drawn, i)
                routed = routed_tokens(a, rmap) * (tokens / drawn)
                lats.append(moe_layer_latency_arrays(a.per_instance_load, routed, self.model, self.hw))
                gaps.append(a.imbalance)
            hit = (float(np.mean(lats)), float(np.mean(gaps)))
            self._moe_cache[key] = hit
        return hit

    # -- one decode step -------------------------------------------------

    def step_breakdown(self, batches: dict | None = None, admitted: int = 0,
                       admitted_input: float = 0.0, record: bool = True) -> StepBreakdown:
        st = self.state
        B = st.active
        layout = st.layout
        E, k = self.model.num_experts, self.model.top_k
        attn = self.attn_latency(layout, B, st.mean_context)
        fwd, rev = self.comm_latency(layout, B)
        cached = self.cfg.workload.latency_cache and batches is None
        lats, gaps = [], []
        for layer in self.sampled_layers:
            rmap = st.replica_maps[self._map_key(layer)]
            if cached:
                lat, gap = self.cached_moe(rmap, B)
                lats.append(lat)
                gaps.append(gap)
                continue
            if batches is not None:
                b = batches[layer]
                if b.num_tokens != B:
                    raise ValueError(f"batch for layer {layer} has {b.num_tokens} tokens, expected {B}")
            else:
                b = gen_batch(self.pattern, B, E, k, "step", st.step, layer)
            lat, gap = self.moe_sample(b, rmap, "step", st.step, layer)
            lats.append(lat)
            gaps.append(gap)
            if record:
                ids, cnt = np.unique(b.topk, return_counts=True)
                st.stats[self._map_key(layer)].record(ids, cnt)
        if cached and record and st.step >= self._next_stats_step:
            # routing statistics still need fresh samples under the cache
            self._next_stats_step = st.step + STATS_EVERY
            b = gen_batch(self.pattern, min(B, 512), E, k, "stats", st.step)
            ids, cnt = np.unique(b.topk, return_counts=True)
            for stats in st.stats.values():
                stats.record(ids, cnt)
        pre = self.prefill_latency(layout, admitted, admitted_input)
        return StepBreakdown(attn, fwd, float(np.mean(lats)), rev, pre, self.model.num_layers, tuple(gaps))

    def decode_step(self, batches: dict | None = None, admitted: int = 0,
                    admitted_input: float = 0.0, max_steps: int = 1) -> tuple[float, SimState]:
        """Advance every active request by one token.

        ``batches`` optionally fixes the routing of each sampled layer.  With
        ``max_steps > 1`` up to that many steps run at the latency of the
        first (completions still land on their exact step).  With no active
        requests nothing happens and the clock stays put.
        """
        st = self.state
        if st.active == 0:
            return 0.0, st
        bd = self.step_breakdown(batches, admitted, admitted_input)
        self.last_breakdown = bd
        decode = bd.total - bd.prefill
        lo = st.step + 1 - st.base
        done_n = st.done_n[lo:lo + max_steps]
        left = st.active - np.cumsum(done_n)
        K = int(np.argmax(left == 0)) + 1 if (left == 0).any() else max_steps
        emitted = st.active * K - int(np.sum(np.cumsum(done_n[:K])[:-1]))
        target = self.cfg.slo.tpot_target
        st.metrics.add_step(bd.total, st.active, target)
        if K > 1:
            st.metrics.add_step(decode, emitted - st.active, target)
        st.metrics.add_imbalance(bd.imbalance, keep=not self.cfg.workload.latency_cache)
        st.context_sum += emitted - float(np.sum(st.done_ctx[lo:lo + K]))
        finished = int(np.sum(done_n[:K]))
        st.active -= finished
        st.completed_requests += finished
        st.step += K
        if st.active == 0:
            st.context_sum = 0.0
        lat = bd.total + (K - 1) * decode
        self._advance(st.clock + lat)
        return lat, st

    def admit(self, input_lens: np.ndarray, output_lens: np.ndarray) -> None:
        st = self.state
        if st.step - st.base > COMPACT_STEPS:
            shift = st.step - st.base
            st.done_n = st.done_n[shift:].copy()
            st.done_ctx = st.done_ctx[shift:].copy()
            st.base = st.step
        out = np.asarray(output_lens, dtype=np.int64)
        inp = np.asarray(input_lens, dtype=np.int64)
        idx = st.step + out - st.base
        st.reserve(int(idx.max()) + 1)
        np.add.at(st.done_n, idx, 1)
        np.add.at(st.done_ctx, idx, (inp + out).astype(np.float64))
        st.active += out.size
        st.context_sum += float(inp.sum())

    # -- clock, ticks and the event loop ---------------------------------

    def _advance(self, t: float) -> None:
        st = self.state
        t = float(t)
        while self._next_tick <= t:
            st.metrics.gpu_seconds += (self._next_tick - st.clock) * st.layout.num_gpus
            st.clock = self._next_tick
            self._tick()
            self._next_tick += self.cfg.scaling.interval
        st.metrics.gpu_seconds += (t - st.clock) * st.layout.num_gpus
        st.clock = t

    def _window_snapshot(self) -> dict:
        m = self.state.metrics
        return {"n_steps": len(m.tpot_values), "tokens": m.tokens_emitted,
                "violations": m.slo_violations, "gpu_seconds": m.gpu_seconds,
                "imb_sum": m.imbalance_sum, "imb_n": m.imbalance_n}

    def _tick(self, decide: bool = True) -> None:
        st = self.state
        m = st.metrics
        w0 = self._window_start
        vals = m.tpot_values[w0["n_steps"]:]
        cnts = m.tpot_counts[w0["n_steps"]:]
        tokens = m.tokens_emitted - w0["tokens"]
        viol = m.slo_violations - w0["violations"]
        gsec = m.gpu_seconds - w0["gpu_seconds"]
        imb_n = m.imbalance_n - w0["imb_n"]
        span = st.clock - self._window_time
        window = {
            "time": float(st.clock),
            "tpot_mean": float(np.dot(vals, cnts) / tokens) if tokens else 0.0,
            "tpot_p99": weighted_quantile(vals, cnts, 0.99),
            "slo_attainment": 1.0 - viol / tokens if tokens else 1.0,
            "per_gpu_throughput": tokens / gsec if gsec > 0 else 0.0,
            "attn_instances": st.layout.num_attn,
            "moe_instances": st.layout.num_moe,
            "imbalance_mean": (m.imbalance_sum - w0["imb_sum"]) / imb_n if imb_n else 0.0,
            "arrival_rate": self._window_arrivals() / span if span > 0 else 0.0,
            "gpus": st.layout.num_gpus,
            "active": st.active,
        }
        self.timeline.append(window)
        self._window_start = self._window_snapshot()
        self._window_time = st.clock
        if decide and self.policy in ("autoscale", "monolithic"):
            action = autoscale_tick(self, self.timeline)
            if not action.is_zero:
                self.apply_layout(layout_after(self, st.layout, action))

    def _window_arrivals(self) -> int:
        # arrivals by timestamp, independent of admission batching
        ts = self._trace.timestamps
        return int(np.searchsorted(ts, self.state.clock, side="right")
                   - np.searchsorted(ts, self._window_time, side="right"))

    def run(self, trace: RequestTrace, until: float | None = None) -> MetricsReport:
        st = self.state
        self.timeline: list[dict] = []
        self._trace = trace
        self._next_tick = st.clock + self.cfg.scaling.interval
        self._window_start = self._window_snapshot()
        self._window_time = st.clock
        delay = self.cfg.workload.max_admission_delay
        ts, inp, out = trace.timestamps, trace.input_lens, trace.output_lens
        n = len(trace)
        i = 0
        while i < n or st.active > 0:
            if st.active == 0:
                self._advance(max(st.clock, ts[i]))
            j = int(np.searchsorted(ts, st.clock, side="right"))
            admitted, mean_in = 0, 0.0
            if j > i:
                self.admit(inp[i:j], out[i:j])
                admitted, mean_in = j - i, float(inp[i:j].mean())
                i = j
            steps = 1
            if delay > 0 and self._last_decode > 0:
                # stop batching steps at the next tick so decisions see fresh state
                steps = max(1, min(int(delay / self._last_decode),
                                   math.ceil((self._next_tick - st.clock) / self._last_decode)))
            self.decode_step(admitted=admitted, admitted_input=mean_in, max_steps=steps)
            bd = self.last_breakdown
            self._last_decode = bd.total - bd.prefill
        end = st.clock if until is None else max(st.clock, until)
        self._advance(end)
        if not self.timeline or self.timeline[-1]["time"] < st.clock:
            self._tick(decide=False)
        m = st.metrics
        return MetricsReport(
            policy=self.policy,
            label=st.layout.label,
            tpot_mean=m.tpot_mean(),
            tpot_p99=m.tpot_p99(),
            slo_attainment=m.attainment(),
            per_gpu_throughput=m.tokens_emitted / m.gpu_seconds if m.gpu_seconds > 0 else 0.0,
            tokens_emitted=m.tokens_emitted,
            completed_requests=st.completed_requests,
            slo_violations=m.slo_violations,
            gpu_seconds=m.gpu_seconds,
            imbalance_mean=m.imbalance_mean(),
            duration=st.clock,
            timeline=self.timeline,
        )

    # -- fixed-batch measurement ------------------------------------------

    def measure_batch(self, batch: int, steps: int, context: float | None = None) -> dict:
        """Closed-loop decode at a constant batch; context length held fixed."""
        st = self.state
        wl = self.cfg.workload
        ctx = context if context is not None else wl.mean_input_len + wl.mean_output_len / 2
        lats, gaps, parts = [], [], []
        for _ in range(steps):
            st.active = batch
            st.context_sum = ctx * batch
            bd = self.step_breakdown()
            st.step += 1
            lats.append(bd.total)
            gaps.extend(bd.imbalance)
            parts.append((bd.attn, bd.comm_fwd + bd.comm_rev, bd.moe))
        tpot = float(np.mean(lats))
        p = np.mean(parts, axis=0) * self.model.num_layers
        return {
            "layout": st.layout.label,
            "batch": batch,
            "tpot": tpot,
            "per_gpu_throughput": batch / (tpot * st.layout.num_gpus),
            "meets_slo": tpot <= self.cfg.slo.tpot_target,
            "imbalance_mean": float(np.mean(gaps)) if gaps else 0.0,
            "attn_time": float(p[0]),
            "comm_time": float(p[1]),
            "moe_time": float(p[2]),
        }


# ---------------------------------------------------------------------------
# performance model and autoscaler

def expected_distinct(probs: np.ndarray, k: int, tokens: float) -> float:
    """Expected number of experts hit by ``tokens`` top-k draws."""
    q = np.minimum(1.0, k * probs)
    return float(np.sum(1.0 - np.power(1.0 - q, tokens)))


def _routing_probs(sim: Simulator) -> np.ndarray:
    counts = sum(s.counts for s in sim.state.stats.values())
    total = counts.sum()
    if total <= 0:
        return sim.pattern.probabilities(sim.model.num_experts)
    return counts / total


def predict_terms(sim: Simulator, layout: ClusterLayout, batch: float, context: float,
                  arrival_rate: float = 0.0, mean_input: float = 16.0) -> StepBreakdown:
    """Analytic per-layer terms of ``layout`` at ``batch``; no routing is sampled.

    The MoE term assumes AEBS spreads the expected distinct experts evenly,
    plus a two-sigma allowance for imbalance, capped by the slot count.
    Prefill is charged for the arrivals expected during one step.
    """
    model, hw = sim.model, sim.hw
    B = max(1, math.ceil(batch))
    attn = sim.attn_latency(layout, B, context)
    fwd, rev = sim.comm_latency(layout, B)
    n = layout.num_moe
    distinct = expected_distinct(_routing_probs(sim), model.top_k, B)
    per_inst = distinct / n
    active = min(layout.slots_per_instance, per_inst + 2.0 * math.sqrt(per_inst) + 1.0)
    routed = 1.25 * B * model.top_k / n
    moe = moe_layer_latency_arrays([active], [routed], model, hw)
    pre = 0.0
    if arrival_rate > 0:
        step = model.num_layers * (attn + fwd + moe + rev)
        pre = sim.prefill_latency(layout, math.ceil(arrival_rate * step), mean_input)
    return StepBreakdown(attn, fwd, moe, rev, pre, model.num_layers)


def predict_tpot(sim: Simulator, layout: ClusterLayout, batch: float, context: float,
                 arrival_rate: float = 0.0, mean_input: float = 16.0) -> float:
    return predict_terms(sim, layout, batch, context, arrival_rate, mean_input).total


def solve_batch(sim: Simulator, layout: ClusterLayout, fc: LoadForecast, cap: float = 1e5) -> tuple[float, float]:
    """(batch, tpot) for ``layout`` under ``fc``; tpot is inf when unstable.

    Past the attention saturation batch TPOT grows linearly in B, so the
    Little's-law fixed point B* can be metastable: a burst that lifts the
    batch over an unstable upper fixed point never drains.  The layout must
    keep the map contracting up to 2*B* + 3*sqrt(B*), which absorbs a
    doubling of the batch on top of Poisson noise.  The reported TPOT is
    taken at B* + 3*sqrt(B*) or the current backlog, whichever is larger.
    """
    if fc.batch is not None:
        return fc.batch, predict_tpot(sim, layout, fc.batch, fc.mean_context)
    if fc.arrival_rate <= 0:
        B = max(fc.backlog, 1.0)
        return B, predict_tpot(sim, layout, B, fc.mean_context)
    lam_out = fc.arrival_rate * fc.mean_output

    def tpot(b):
        return predict_tpot(sim, layout, b, fc.mean_context, fc.arrival_rate, fc.mean_input)

    B = 1.0
    for _ in range(200):
        nb = lam_out * tpot(B)
        if nb > cap:
            return nb, math.inf
        done = abs(nb - B) < 1e-3 * max(B, 1.0)
        B = nb
        if done:
            break
    noise = 3.0 * math.sqrt(B) + 1.0
    far = 2.0 * B + noise
    if lam_out * tpot(far) > far:
        return far, math.inf
    peak = max(B + noise, fc.backlog)
    return peak, tpot(peak)


def layout_after(sim: Simulator, layout: ClusterLayout, action: ScalingAction) -> ClusterLayout:
    sc = sim.cfg.scaling
    return ClusterLayout.from_counts(layout.num_attn + action.delta_attn, layout.num_moe + action.delta_moe,
                                     layout.slots_per_instance, sc.gpus_per_node, sim.model.num_experts)


class InvalidActionError(ValueError):
    pass


def evaluate_action(sim: Simulator, action: ScalingAction, predicted_load: LoadForecast,
                    layout: ClusterLayout | None = None) -> tuple[float, int]:
    base = layout or sim.state.layout
    try:
        new = layout_after(sim, base, action)
    except ConfigError as exc:
        raise InvalidActionError(f"invalid-action: {exc}") from exc
    _, tpot = solve_batch(sim, new, predicted_load)
    return tpot, new.num_gpus


def candidate_actions(sim: Simulator, layout: ClusterLayout) -> list[ScalingAction]:
    sc = sim.cfg.scaling
    if sim.policy == "monolithic":
        out = []
        for a, e in sc.monolithic_tiers:
            out.append(ScalingAction(a - layout.num_attn, e - layout.num_moe))
        return out
    R = sc.search_radius
    return [ScalingAction(da, dm) for da in range(-R, R + 1) for dm in range(-R, R + 1)]


def forecast_from_window(sim: Simulator, timeline: list[dict]) -> LoadForecast:
    wl = sim.cfg.workload
    last = timeline[-1]["arrival_rate"] if timeline else 0.0
    prev = timeline[-2]["arrival_rate"] if len(timeline) > 1 else last
    rate = max(last, last + (last - prev))
    return LoadForecast(arrival_rate=rate, mean_output=wl.mean_output_len,
                        mean_context=wl.mean_input_len + wl.mean_output_len / 2,
                        mean_input=wl.mean_input_len, backlog=float(sim.state.active))


def utilization(sim: Simulator, layout: ClusterLayout, fc: LoadForecast) -> float:
    """Forecast arrival rate over the largest rate the layout can absorb within target."""
    target = sim.cfg.scaling.headroom * sim.cfg.slo.tpot_target
    if fc.arrival_rate <= 0:
        return 0.0
    lo, hi = 0.0, fc.arrival_rate
    while solve_batch(sim, layout, LoadForecast(hi, fc.mean_output, fc.mean_context, fc.mean_input))[1] <= target:
        lo, hi = hi, hi * 2
        if hi > 1e6:
            return 0.0
    for _ in range(30):
        mid = (lo + hi) / 2
        ok = solve_batch(sim, layout, LoadForecast(mid, fc.mean_output, fc.mean_context, fc.mean_input))[1] <= target
        lo, hi = (mid, hi) if ok else (lo, mid)
    return fc.arrival_rate / lo if lo > 0 else math.inf


def autoscale_tick(sim: Simulator, window_metrics: list[dict]) -> ScalingAction:
    """Least-cost action predicted to meet the TPOT target.

    Scale up when the window missed the attainment target or the forecast
    breaks the target on the current layout; scale down (largest predicted
    safe reduction) only when utilization is below ``util_threshold``.
    """
    cfg = sim.cfg
    layout = sim.state.layout
    fc = forecast_from_window(sim, window_metrics)
    target = cfg.scaling.headroom * cfg.slo.tpot_target
    zero = ScalingAction()
    cur_tpot, cur_cost = evaluate_action(sim, zero, fc)
    attained = window_metrics[-1]["slo_attainment"] if window_metrics else 1.0
    scored = []
    for act in candidate_actions(sim, layout):
        try:
            tpot, cost = evaluate_action(sim, act, fc)
        except InvalidActionError:
            continue
        scored.append((act, tpot, cost))
    feasible = [s for s in scored if s[1] <= target]
    rank = lambda s: (s[2], s[1], abs(s[0].delta_attn) + abs(s[0].delta_moe), s[0].delta_attn, s[0].delta_moe)
    if cur_tpot > target or attained < cfg.slo.attainment_target:
        if feasible:
            return min(feasible, key=rank)[0]
        return min(scored, key=lambda s: (s[1], s[2]))[0] if scored else zero
    if utilization(sim, layout, fc) < cfg.scaling.util_threshold:
        cheaper = [s for s in feasible if s[2] < cur_cost]
        if cheaper:
            return min(cheaper, key=rank)[0]
    return zero


def run(trace: RequestTrace, cfg: Config, policy: str | None = None, **overrides) -> MetricsReport:
    return Simulator(cfg, policy=policy, **overrides).run(trace)
