"""Figure rendering for run reports: traffic over time, task gantt charts,
update-lane timelines. All output is written as PNG files."""

import os
from collections import defaultdict
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .runner import RunReport


def _save(fig, path: str) -> str:
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def _traffic_figure(report: RunReport, out: str) -> str:
    counts = defaultdict(int)
    series = {}
    for line in report.trace_lines:
        toks = line.split()
        if not toks or toks[0] not in ("NET", "FAB", "OTA", "RUN"):
            continue
        t = int(toks[1])
        counts[toks[0]] += 1
        series.setdefault(toks[0], ([], []))
        xs, ys = series[toks[0]]
        xs.append(t)
        ys.append(counts[toks[0]])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for kind in sorted(series):
        xs, ys = series[kind]
        ax.step(xs, ys, where="post", label=f"{kind} ({counts[kind]})")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("cumulative trace lines")
    ax.set_title(f"{report.scenario}: event volume (seed {report.seed})")
    if series:
        ax.legend(loc="upper left", fontsize=8)
    return _save(fig, out)


def _dag_figure(report: RunReport, run_id: str, out: str) -> str:
    trace = report.dag_runs[run_id]
    sites = sorted({p.site_id for p in trace.realized.values()})
    row = {s: i for i, s in enumerate(sites)}
    fig, ax = plt.subplots(figsize=(7, 1.0 + 0.6 * max(1, len(sites))))
    for tid in sorted(trace.realized):
        p = trace.realized[tid]
        color = "tab:red" if tid in trace.missed else "tab:blue"
        ax.barh(row[p.site_id], p.end_ms - p.start_ms, left=p.start_ms,
                height=0.5, color=color, edgecolor="black", linewidth=0.4)
        ax.text(p.start_ms + (p.end_ms - p.start_ms) / 2, row[p.site_id], tid,
                ha="center", va="center", fontsize=7, color="white")
    ax.set_yticks(range(len(sites)))
    ax.set_yticklabels(sites)
    ax.set_xlabel("time since submission (ms)")
    ax.set_title(f"{report.scenario}: {run_id} realized placements "
                 f"(makespan {trace.makespan_ms} ms, missed {len(trace.missed)})")
    return _save(fig, out)


def _ota_figure(report: RunReport, job_id: str, out: str) -> str:
    # rebuild per-lane state timelines from the OTA trace lines
    lanes = defaultdict(list)
    states: List[str] = []
    for line in report.trace_lines:
        toks = line.split()
        if len(toks) < 7 or toks[0] != "OTA" or toks[2] != job_id:
            continue
        t, lane, new = int(toks[1]), toks[3], toks[6]
        lanes[lane].append((t, new))
        if new not in states:
            states.append(new)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    level = {s: i for i, s in enumerate(states)}
    for lane in sorted(lanes):
        xs = [t for t, _ in lanes[lane]]
        ys = [level[s] for _, s in lanes[lane]]
        ax.step(xs, ys, where="post", marker="o", markersize=3, label=lane)
    ax.set_yticks(range(len(states)))
    ax.set_yticklabels(states, fontsize=7)
    ax.set_xlabel("time (ms)")
    ax.set_title(f"{report.scenario}: update job {job_id}")
    if lanes:
        ax.legend(fontsize=7)
    return _save(fig, out)


def render_figures(report: RunReport, out_dir: str) -> List[str]:
    """Render every figure the report supports; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    prefix = os.path.join(out_dir, report.scenario)
    paths = [_traffic_figure(report, f"{prefix}_traffic.png")]
    for run_id in sorted(report.dag_runs):
        paths.append(_dag_figure(report, run_id, f"{prefix}_dag_{run_id}.png"))
    jobs = sorted({name.split(".")[1] for name in report.metrics if name.startswith("ota.")})
    for job_id in jobs:
        paths.append(_ota_figure(report, job_id, f"{prefix}_ota_{job_id}.png"))
    return paths
