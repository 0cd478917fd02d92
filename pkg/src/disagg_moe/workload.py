"""Synthetic routing batches and request arrival traces.

Routing: each token draws ``k`` distinct experts without replacement from a
categorical distribution (Gumbel top-k).  The ``gaussian`` pattern puts a
discretised normal over expert IDs, centred at E/2 with standard deviation
``sigma * E``; large ``sigma`` tends to the uniform pattern.

Trace files are plain text, one arrival per line::

    # timestamp_s input_tokens output_tokens
    0.000 16 256
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import WorkloadSpec, rng_for
from .scheduler import ActivationBatch

DAY = 86400.0


class TraceError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class RoutingPattern:
    kind: str = "uniform"
    sigma: float = 0.5
    cover_all: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError("kind must be 'uniform' or 'gaussian'")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    @classmethod
    def from_spec(cls, spec: WorkloadSpec, seed: int) -> "RoutingPattern":
        return cls(spec.pattern, spec.sigma, spec.cover_all, seed)

    def probabilities(self, num_experts: int) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(num_experts, 1.0 / num_experts)
        ids = np.arange(num_experts, dtype=np.float64)
        z = (ids - num_experts / 2) / (self.sigma * num_experts)
        w = np.exp(-0.5 * z * z)
        return w / w.sum()


def gen_batch(pattern: RoutingPattern, tokens: int, num_experts: int, k: int,
              *labels) -> ActivationBatch:
    """Sample a (tokens, k) routing; ``labels`` select an independent stream."""
    if not 1 <= k <= num_experts:
        raise ValueError("need 1 <= k <= num_experts")
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    if pattern.cover_all and tokens * k < num_experts:
        raise ValueError("cover_all needs tokens * k >= num_experts")
    rng = rng_for(pattern.seed, "routing", *labels)
    if tokens == 0:
        return ActivationBatch(np.zeros((0, k), dtype=np.int64))
    logp = np.log(pattern.probabilities(num_experts))
    keys = logp + rng.gumbel(size=(tokens, num_experts))
    if k == num_experts:
        top = np.argsort(-keys, axis=1)
    else:
        top = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    if pattern.cover_all:
        top = _cover(top, num_experts, rng)
    return ActivationBatch(top)


def _cover(top: np.ndarray, num_experts: int, rng: np.random.Generator) -> np.ndarray:
    top = top.copy()
    counts = np.bincount(top.ravel(), minlength=num_experts)
    missing = np.flatnonzero(counts == 0)
    if not missing.size:
        return top
    flat = top.ravel()
    order = rng.permutation(flat.size)
    pos = 0
    for e in missing:
        while counts[flat[order[pos]]] < 2:
            pos += 1
        slot = order[pos]
        pos += 1
        counts[flat[slot]] -= 1
        flat[slot] = e
        counts[e] = 1
    return flat.reshape(top.shape)


# ---------------------------------------------------------------------------
# request traces

@dataclass(frozen=True)
class RequestTrace:
    timestamps: np.ndarray
    input_lens: np.ndarray
    output_lens: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        inp = np.asarray(self.input_lens, dtype=np.int64)
        out = np.asarray(self.output_lens, dtype=np.int64)
        if not (ts.shape == inp.shape == out.shape and ts.ndim == 1):
            raise ValueError("trace columns must be equal-length vectors")
        if ts.size and (np.diff(ts) < 0).any():
            raise ValueError("timestamps must be non-decreasing")
        if ts.size and (inp.min() < 1 or out.min() < 1):
            raise ValueError("lengths must be >= 1")
        for name, arr in (("timestamps", ts), ("input_lens", inp), ("output_lens", out)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def arrivals(self) -> list[tuple[float, int, int]]:
        return list(zip(self.timestamps.tolist(), self.input_lens.tolist(), self.output_lens.tolist()))

    @classmethod
    def empty(cls) -> "RequestTrace":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


def load_trace(path: str | Path) -> RequestTrace:
    ts, inp, out = [], [], []
    last = -math.inf
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 3:
                raise TraceError(lineno, f"expected 3 columns, got {len(parts)}")
            try:
                t, i, o = float(parts[0]), int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise TraceError(lineno, str(exc)) from None
            if t < last:
                raise TraceError(lineno, f"timestamp {t} decreases (previous {last})")
            if i < 1 or o < 1:
                raise TraceError(lineno, "token counts must be >= 1")
            last = t
            ts.append(t)
            inp.append(i)
            out.append(o)
    return RequestTrace(np.array(ts), np.array(inp, dtype=np.int64), np.array(out, dtype=np.int64))


def save_trace(trace: RequestTrace, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp_s input_tokens output_tokens\n")
        for t, i, o in zip(trace.timestamps, trace.input_lens, trace.output_lens):
            fh.write(f"{t:.6f} {i} {o}\n")


def _lengths(rng, n, mean_input, mean_output):
    # geometric on {1, 2, ...} has mean exactly 1/p
    return rng.geometric(1.0 / mean_input, n), rng.geometric(1.0 / mean_output, n)


def gen_sharegpt_like(num_requests: int, rate: float, seed: int,
                      mean_input: int = 16, mean_output: int = 256) -> RequestTrace:
    """Poisson arrivals with geometric input/output lengths."""
    rng = rng_for(seed, "trace", "sharegpt")
    ts = np.cumsum(rng.exponential(1.0 / rate, num_requests))
    inp, out = _lengths(rng, num_requests, mean_input, mean_output)
    return RequestTrace(ts, inp, out)


def diurnal_rate(t, base_rate: float, peak_ratio: float):
    """Rate at time ``t``: ``base_rate`` at midnight, ``base_rate * peak_ratio`` at noon."""
    phase = (1.0 - np.cos(2.0 * np.pi * np.asarray(t) / DAY)) / 2.0
    return base_rate * (1.0 + (peak_ratio - 1.0) * phase)


def gen_diurnal_trace(days: int, base_rate: float, peak_ratio: float, seed: int,
                      mean_input: int = 16, mean_output: int = 256) -> RequestTrace:
    """Non-homogeneous Poisson arrivals over ``days`` (thinning)."""
    if days < 1 or base_rate <= 0 or peak_ratio < 1:
        raise ValueError("need days >= 1, base_rate > 0, peak_ratio >= 1")
    rng = rng_for(seed, "trace", "diurnal")
    horizon = days * DAY
    lam_max = base_rate * peak_ratio
    n = rng.poisson(lam_max * horizon)
    ts = np.sort(rng.uniform(0.0, horizon, n))
    keep = rng.random(n) * lam_max < diurnal_rate(ts, base_rate, peak_ratio)
    ts = ts[keep]
    inp, out = _lengths(rng, ts.size, mean_input, mean_output)
    return RequestTrace(ts, inp, out)
