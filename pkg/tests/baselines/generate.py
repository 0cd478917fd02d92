"""Regenerate the committed regression baselines.

    python tests/baselines/generate.py

Only rerun after a deliberate algorithm change, and review the diff.
"""
from __future__ import annotations

import json
import sys
from collections import Counter
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import instances as inst  # noqa: E402
from disagg_moe.experts import brute_force_place, max_coactivation_load, place_replicas  # noqa: E402
from disagg_moe.scheduler import brute_force_schedule, schedule  # noqa: E402


def aebs_gaps() -> dict:
    gaps = []
    for seed in range(inst.AEBS_INSTANCES):
        batch, rmap = inst.aebs_instance(seed)
        gaps.append(schedule(batch, rmap).max_load - brute_force_schedule(batch, rmap).max_load)
    hist = Counter(gaps)
    return {"instances": len(gaps), "histogram": {str(g): hist[g] for g in sorted(hist)}, "gaps": gaps}


def placement_objectives() -> dict:
    rows = []
    for seed in range(inst.PLACEMENT_INSTANCES):
        alloc, a, counts, n, c = inst.placement_instance(seed)
        heur = max_coactivation_load(place_replicas(alloc, a, counts, n, c), a)
        opt = max_coactivation_load(brute_force_place(alloc, a, n, c), a)
        rows.append({"seed": seed, "heuristic": heur, "optimum": opt})
    return {"instances": len(rows), "rows": rows}


def main() -> None:
    (HERE / "aebs_gaps.json").write_text(json.dumps(aebs_gaps(), indent=1) + "\n")
    (HERE / "placement_objectives.json").write_text(json.dumps(placement_objectives(), indent=1) + "\n")


if __name__ == "__main__":
    main()
