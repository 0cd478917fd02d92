"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid input (parse or
validation error, unknown expert, infeasible placement request).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import comm
from .config import ConfigError, default_config, load_config, rng_for
from .experts import (InfeasiblePlacementError, PlacementError, allocate_replicas, load_stats,
                      max_coactivation_load, place_replicas, replica_map_from_dict, roundrobin_place,
                      uniform_allocation)
from .report import MissingFileError, format_table, render_report, write_table
from .scenarios import SCENARIOS, layout_sweep, run_scenario
from .scheduler import SchedulingError, assignment_to_dict, load_batch, random_schedule, schedule
from .sim import Simulator
from .workload import TraceError, gen_diurnal_trace, load_trace

log = logging.getLogger("disagg_moe")


class UsageError(Exception):
    pass


def _config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    overrides = {k: getattr(args, k) for k in ("comm", "sched", "place") if getattr(args, k, None)}
    if overrides:
        cfg = cfg.replace(scaling=dataclasses.replace(cfg.scaling, **overrides))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_schedule(args) -> int:
    cfg = _config(args)
    batch = load_batch(args.batch)
    rmap = replica_map_from_dict(json.loads(Path(args.replica_map).read_text()))
    if args.random:
        a = random_schedule(batch, rmap, rng_for(cfg.seed, "cli-schedule"))
    else:
        a = schedule(batch, rmap)
    _dump(assignment_to_dict(a, rmap), _out(args) / "assignment.json")
    loads = " ".join(str(x) for x in a.per_instance_load.tolist())
    print(f"tokens {batch.num_tokens}  max load {a.max_load}  gap {a.imbalance}  loads [{loads}]")
    return 0


def cmd_place(args) -> int:
    counts, a = load_stats(args.stats)
    E = counts.size
    N, C = args.instances, args.slots
    S = args.total_slots if args.total_slots is not None else N * C
    if S > N * C:
        raise InfeasiblePlacementError("sum r_i <= N*C", f"{S} replicas exceed {N * C} slots")
    if args.roundrobin:
        alloc = uniform_allocation(E, S, max_replicas=N)
        placement = roundrobin_place(alloc, N, C)
    else:
        alloc = allocate_replicas(counts, E, S, max_replicas=args.max_replicas)
        placement = place_replicas(alloc, a, counts, N, C)
    placement.validate(alloc)
    out = _out(args)
    _dump(alloc.to_dict(), out / "allocation.json")
    _dump(placement.to_dict(), out / "placement.json")
    obj = max_coactivation_load(placement, a)
    print(f"experts {E}  replicas {alloc.total}  instances {N}x{C}  objective {obj:g}")
    return 0


def cmd_plan(args) -> int:
    cfg = _config(args)
    t = comm.StepTraffic(args.m, args.m_nodes, args.n, args.n_nodes, args.tokens, cfg.model.token_bytes)
    if args.scheme == "auto":
        plan = comm.select_scheme(t, cfg.hardware, args.reverse)
    elif args.scheme == comm.STRAWMAN:
        plan = comm.strawman_plan(t, args.reverse)
    else:
        plan = comm.two_phase_plan(t, cfg.scaling.case1_threshold, args.reverse,
                                   case=None if args.scheme == "two-phase" else int(args.scheme[-1]))
    lat = comm.plan_latency(plan, cfg.hardware)
    _dump({**plan.to_dict(), "latency_s": lat}, _out(args) / "plan.json")
    print(f"scheme {plan.scheme}  inter-node transfers {plan.inter_node_transfers}  latency {lat * 1e6:.2f} us")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    if args.scenario:
        res = run_scenario(args.scenario, cfg, quick=args.quick)
        res.write(out)
        print(json.dumps({"scenario": res.name, **res.summary}, indent=1, sort_keys=True))
        return 0
    if args.trace:
        trace = load_trace(args.trace)
    else:
        wl = cfg.workload
        trace = gen_diurnal_trace(wl.days, wl.base_rate, wl.peak_ratio, cfg.seed,
                                  wl.mean_input_len, wl.mean_output_len)
    rep = Simulator(cfg, policy=args.policy).run(trace)
    rep.write(out, args.name or rep.policy)
    print(f"{rep.policy} {rep.label}: tokens {rep.tokens_emitted}  tpot mean {rep.tpot_mean * 1e3:.2f} ms"
          f"  p99 {rep.tpot_p99 * 1e3:.2f} ms  attainment {rep.slo_attainment:.4f}"
          f"  gpu-hours {rep.gpu_hours:.2f}  per-gpu {rep.per_gpu_throughput:.1f} tok/s")
    return 0


def _sweep_one(job):
    cfg, a, e, batches, steps = job
    return layout_sweep(cfg, batches, (a,), (e,), steps)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    jobs = [(cfg, a, e, tuple(args.batches), args.steps) for a in args.attn for e in args.moe]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            parts = list(ex.map(_sweep_one, jobs))
    else:
        parts = [_sweep_one(j) for j in jobs]
    rows = [r for part in parts for r in part]
    if not rows:
        raise UsageError("no representable layout in the requested grid")
    write_table(rows, _out(args) / "sweep.grid.csv")
    cols = ("layout", "batch", "tpot", "per_gpu_throughput", "meets_slo", "imbalance_mean")
    print(format_table(sorted(rows, key=lambda r: (r["batch"], -r["per_gpu_throughput"])), cols))
    return 0


def cmd_report(args) -> int:
    print(render_report(args.metrics_dir))
    return 0


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None), help="TOML config (defaults to the built-in profile)")
    g.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    g.add_argument("--out", default=d("out"), help="output directory (default: out)")
    g.add_argument("--comm", choices=("strawman", "two-phase"), default=d(None))
    g.add_argument("--sched", choices=("random", "aebs"), default=d(None))
    g.add_argument("--place", choices=("roundrobin", "activation-aware"), default=d(None))
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disagg-moe", description=__doc__.splitlines()[0],
                                parents=[_global_flags(suppress=False)])
    # accepted after the subcommand too; SUPPRESS keeps them from resetting
    # values given before it
    common = _global_flags(suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("schedule", parents=[common], help="schedule one batch onto a replica map")
    s.add_argument("batch", help="batch file: one token per line, k expert IDs")
    s.add_argument("replica_map", help="replica map JSON (expert -> instance list)")
    s.add_argument("--random", action="store_true", help="random replica per token instead of AEBS")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("place", parents=[common], help="replicate and place experts from stats")
    s.add_argument("stats", help="activation stats JSON")
    s.add_argument("--instances", type=int, required=True)
    s.add_argument("--slots", type=int, required=True)
    s.add_argument("--total-slots", type=int, help="replica budget S (default instances*slots)")
    s.add_argument("--max-replicas", type=int)
    s.add_argument("--roundrobin", action="store_true")
    s.set_defaults(func=cmd_place)

    s = sub.add_parser("plan", parents=[common], help="build and cost a communication plan")
    s.add_argument("--m", type=int, required=True, help="attention instances")
    s.add_argument("--m-nodes", type=int, default=1)
    s.add_argument("--n", type=int, required=True, help="MoE instances")
    s.add_argument("--n-nodes", type=int, default=1)
    s.add_argument("--tokens", type=int, required=True)
    s.add_argument("--reverse", action="store_true")
    s.add_argument("--scheme", default="auto",
                   choices=("auto", "strawman", "two-phase", comm.CASE1, comm.CASE2))
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", parents=[common], help="run a trace or a named scenario")
    s.add_argument("--scenario", choices=sorted(SCENARIOS))
    s.add_argument("--trace", help="trace file; default generates the configured diurnal trace")
    s.add_argument("--policy", choices=("static", "autoscale", "monolithic"))
    s.add_argument("--name", help="output file stem")
    s.add_argument("--quick", action="store_true", help="reduced scenario size")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", parents=[common], help="fixed-batch sweep over layouts")
    s.add_argument("--batches", type=int, nargs="+", default=[4, 16, 64, 256, 512])
    s.add_argument("--attn", type=int, nargs="+", default=list(range(1, 9)))
    s.add_argument("--moe", type=int, nargs="+", default=[6, 7, 8, 10, 12, 14, 16])
    s.add_argument("--steps", type=int, default=4)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", parents=[common], help="tables from a metrics directory")
    s.add_argument("metrics_dir")
    s.set_defaults(func=cmd_report)
    return p


INPUT_ERRORS = (ConfigError, TraceError, SchedulingError, PlacementError, MissingFileError,
                UsageError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
