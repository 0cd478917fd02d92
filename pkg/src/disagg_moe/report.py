"""Plain-text tables over metrics files and scenario outputs."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

REPORT_FIELDS = ("tpot_mean", "tpot_p99", "slo_attainment", "per_gpu_throughput", "gpu_hours",
                 "imbalance_mean", "tokens_emitted")


class MissingFileError(FileNotFoundError):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_table(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    cols = list(rows[0]) if rows else []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
    return path


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return "(no rows)"
    cols = list(columns) if columns else list(rows[0])
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    out = [line(cols), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out)


def load_metrics_dir(path: str | Path) -> dict[str, dict]:
    """Every MetricsReport JSON under ``path``, keyed by file stem."""
    root = Path(path)
    if not root.is_dir():
        raise MissingFileError(f"missing-file: {root} is not a directory")
    runs = {}
    for p in sorted(root.glob("*.json")):
        raw = json.loads(p.read_text())
        if "tpot_mean" in raw:
            runs[p.stem] = raw
    return runs


def load_scenario_tables(path: str | Path) -> dict[str, list[dict]]:
    """CSV tables written by scenarios (``<scenario>.<table>.csv``)."""
    tables = {}
    for p in sorted(Path(path).glob("*.*.csv")):
        with open(p, newline="") as fh:
            tables[p.stem] = list(csv.DictReader(fh))
    return tables


def comparison_table(runs: dict[str, dict], fields: Sequence[str] = REPORT_FIELDS) -> list[dict]:
    """One row per metric, one column per run; a ratio column when there are two runs."""
    names = list(runs)
    rows = []
    for f in fields:
        row = {"metric": f}
        for n in names:
            row[n] = runs[n].get(f, "")
        if len(names) == 2:
            a, b = runs[names[0]].get(f), runs[names[1]].get(f)
            row[f"{names[0]}/{names[1]}"] = a / b if isinstance(a, (int, float)) and b else ""
        rows.append(row)
    return rows


def run_table(runs: dict[str, dict], fields: Sequence[str] = REPORT_FIELDS) -> list[dict]:
    """One row per run."""
    return [{"run": n, "policy": r.get("policy", ""), "layout": r.get("label", ""),
             **{f: r.get(f, "") for f in fields}} for n, r in runs.items()]


def render_report(path: str | Path) -> str:
    runs = load_metrics_dir(path)
    tables = load_scenario_tables(path)
    if not runs and not tables:
        raise MissingFileError(f"missing-file: no metrics or scenario tables under {path}")
    parts = []
    if runs:
        parts.append(format_table(run_table(runs)))
    if len(runs) >= 2:
        parts.append(format_table(comparison_table(runs)))
    for name, rows in tables.items():
        if name.endswith(".grid") or name.endswith(".steps") or name.endswith(".timeline"):
            continue  # raw per-point data; the summary tables cover it
        parts.append(f"[{name}]\n" + format_table(rows))
    return "\n\n".join(parts)
