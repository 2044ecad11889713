"""Run summaries: worker independence, speedup against the barrier baseline,
communication totals, and the CSV/JSONL artifact writers.

Writers are atomic (temp file + rename) and deterministic: floats are
serialized with repr, so identical runs produce byte-identical files.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .strategies import RunResult


@dataclass(frozen=True)
class SummaryRow:
    strategy: str
    seed: int
    iterations: int
    sim_time_s: float
    wi_avg: float
    conv_acc: float
    api_calls_total: int
    speedup_vs_bsp: float | None


SUMMARY_COLUMNS = (
    "strategy",
    "seed",
    "iterations",
    "sim_time_s",
    "wi_avg",
    "conv_acc",
    "api_calls_total",
    "speedup_vs_bsp",
)


def worker_independence(iterations: int, model_requests: int) -> float:
    """Local iterations per global-model request, guarded against zero requests."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    return iterations / max(1, model_requests)


def wi_average(result: RunResult) -> float:
    """Mean worker independence over workers that completed an iteration."""
    values = [
        worker_independence(result.per_worker_iterations[w], result.per_worker_model_requests[w])
        for w in sorted(result.per_worker_iterations)
        if result.per_worker_iterations[w] > 0
    ]
    return sum(values) / len(values) if values else 0.0


def summarize(results: Sequence[RunResult]) -> list[SummaryRow]:
    """One row per run; speedup is measured against the bsp run of the same seed."""
    if not results:
        raise ValueError("summarize needs at least one result")
    bsp_times = {r.seed: r.wall_sim_time_s for r in results if r.strategy == "bsp"}
    rows = []
    for r in results:
        speedup = None
        if r.seed in bsp_times and r.wall_sim_time_s > 0:
            speedup = bsp_times[r.seed] / r.wall_sim_time_s
        rows.append(
            SummaryRow(
                strategy=r.strategy,
                seed=r.seed,
                iterations=r.total_iterations,
                sim_time_s=r.wall_sim_time_s,
                wi_avg=wi_average(r),
                conv_acc=r.final_accuracy,
                api_calls_total=r.api_calls_total,
                speedup_vs_bsp=speedup,
            )
        )
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return str(value)


def emit_csv(rows: Iterable[Mapping], path, columns: Sequence[str] | None = None) -> None:
    """Write dict rows with a stable column order; atomic replace on rerun."""
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("emit_csv needs explicit columns for empty row sets")
        columns = list(rows[0].keys())
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")
    os.replace(tmp, path)


def emit_summary_csv(rows: Sequence[SummaryRow], path) -> None:
    emit_csv([asdict(r) for r in rows], path, columns=SUMMARY_COLUMNS)


def emit_jsonl(records: Iterable[Mapping], path) -> None:
    """One JSON object per line; atomic replace on rerun."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)


def read_csv_rows(path) -> list[dict]:
    """Parse a CSV written by emit_csv back into string-valued dict rows."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        return [dict(zip(header, line.rstrip("\n").split(","))) for line in fh]
