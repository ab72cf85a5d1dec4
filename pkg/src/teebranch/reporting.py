"""Figure rendering for profile, search, train, and attack artifacts.

All figures are written to files (Agg backend, no display) next to the
delimited outputs so a run directory is self-describing.  Rendering is
deterministic for identical inputs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .latency import ScheduleTrace

_RESOURCE_COLORS = {"GPU": "#4878cf", "LINK": "#ee854a", "CPU": "#6acc64"}


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_schedule_figure(trace: ScheduleTrace, path) -> None:
    """Gantt view of one schedule trace: one lane per resource."""
    lanes = ("GPU", "LINK", "CPU")
    fig, ax = plt.subplots(figsize=(8, 2.8))
    for lane_idx, resource in enumerate(lanes):
        for event in trace.by_resource(resource):
            ax.barh(lane_idx, event.end - event.start, left=event.start, height=0.6,
                    color=_RESOURCE_COLORS[resource], edgecolor="black", linewidth=0.4)
    ax.set_yticks(range(len(lanes)), lanes)
    ax.set_xlabel("time (ms)")
    ax.set_title(f"parallel schedule, makespan {trace.makespan:.3f} ms")
    ax.invert_yaxis()
    fig.tight_layout()
    _save(fig, path)


def render_front_figure(result, path) -> None:
    """All evaluated points, the non-dominated front, and the selected config."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    evaluated = [(r.objectives.latency_ms, r.objectives.accuracy)
                 for r in result.records if r.evaluated]
    if evaluated:
        xs, ys = zip(*evaluated)
        ax.scatter(xs, ys, s=18, color="#b0b0b0", label="evaluated")
    front = [(r.objectives.latency_ms, r.objectives.accuracy)
             for r in result.front.records]
    if front:
        fx, fy = zip(*sorted(front))
        ax.plot(fx, fy, "o-", color="#4878cf", label="front")
    if result.best is not None:
        ax.scatter([result.best.objectives.latency_ms],
                   [result.best.objectives.accuracy],
                   marker="*", s=220, color="#d65f5f", zorder=5, label="selected")
    ax.set_xlabel("parallel latency (ms)")
    ax.set_ylabel("validation accuracy")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_training_figure(control_curves, poison_curves, path) -> None:
    """Accuracy trajectories of the control and poisoned runs."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(control_curves.epochs, control_curves.combined_acc,
            color="#4878cf", label="combined (control)")
    ax.plot(control_curves.epochs, control_curves.backbone_acc,
            color="#4878cf", linestyle="--", label="backbone (control)")
    ax.plot(poison_curves.epochs, poison_curves.combined_acc,
            color="#d65f5f", label="combined (poisoned)")
    ax.plot(poison_curves.epochs, poison_curves.backbone_acc,
            color="#d65f5f", linestyle="--", label="backbone (poisoned)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_attack_figure(reports, path) -> None:
    """Median surrogate accuracy per (scenario, target) as bars."""
    groups: dict[str, list[float]] = {}
    for r in reports:
        groups.setdefault(f"{r.scenario}\n[{r.target}]", []).append(r.surrogate_accuracy)
    labels = sorted(groups)
    medians = [float(np.median(groups[k])) for k in labels]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.bar(range(len(labels)), medians, color="#6acc64", edgecolor="black", linewidth=0.5)
    ax.set_xticks(range(len(labels)), labels, fontsize=8)
    ax.set_ylabel("median surrogate accuracy")
    ax.set_ylim(0, 1.0)
    fig.tight_layout()
    _save(fig, path)


def render_overview_figure(out_dir, path) -> None:
    """2x2 overview assembled from the persisted stage CSVs (skips missing)."""
    out_dir = Path(out_dir)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))

    ax = axes[0][0]
    profile_csv = out_dir / "profile_report.csv"
    if profile_csv.exists():
        with open(profile_csv) as fh:
            rows = list(csv.DictReader(fh))
        par = [float(r["parallel_ms"]) for r in rows]
        seq = [float(r["sequential_baseline_ms"]) for r in rows]
        base = float(rows[0]["backbone_sum_ms"]) if rows else 0.0
        order = np.argsort(par)
        ax.plot(np.array(par)[order], label="parallel")
        ax.plot(np.array(seq)[order], label="sequential baseline")
        ax.axhline(base, color="black", linestyle=":", linewidth=1,
                   label="backbone floor")
        ax.set_title("latency over sampled configs")
        ax.set_ylabel("ms")
        ax.legend(fontsize=7)
    else:
        ax.set_axis_off()

    ax = axes[0][1]
    front_csv = out_dir / "front.csv"
    if front_csv.exists():
        with open(front_csv) as fh:
            rows = [r for r in csv.DictReader(fh) if r["accuracy"]]
        xs = [float(r["latency_ms"]) for r in rows]
        ys = [float(r["accuracy"]) for r in rows]
        on_front = [r["on_front"] == "1" for r in rows]
        ax.scatter([x for x, f in zip(xs, on_front) if not f],
                   [y for y, f in zip(ys, on_front) if not f], s=14, color="#b0b0b0")
        ax.scatter([x for x, f in zip(xs, on_front) if f],
                   [y for y, f in zip(ys, on_front) if f], s=30, color="#4878cf")
        ax.set_title("search objectives")
        ax.set_xlabel("latency (ms)")
        ax.set_ylabel("accuracy")
    else:
        ax.set_axis_off()

    ax = axes[1][0]
    curves_csv = out_dir / "curves_poisoned.csv"
    if curves_csv.exists():
        with open(curves_csv) as fh:
            rows = list(csv.DictReader(fh))
        epochs = [int(r["epoch"]) for r in rows]
        ax.plot(epochs, [float(r["combined_acc"]) for r in rows], label="combined")
        ax.plot(epochs, [float(r["backbone_acc"]) for r in rows], label="backbone")
        ax.set_title("poisoned training")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
    else:
        ax.set_axis_off()

    ax = axes[1][1]
    attack_csv = out_dir / "attack_report.csv"
    if attack_csv.exists():
        with open(attack_csv) as fh:
            rows = list(csv.DictReader(fh))
        groups: dict[str, list[float]] = {}
        for r in rows:
            groups.setdefault(f"{r['scenario']}\n[{r['target']}]", []).append(
                float(r["surrogate_acc"]))
        labels = sorted(groups)
        ax.bar(range(len(labels)), [float(np.median(groups[k])) for k in labels],
               color="#6acc64", edgecolor="black", linewidth=0.5)
        ax.set_xticks(range(len(labels)), labels, fontsize=7)
        ax.set_title("attack outcomes")
        ax.set_ylabel("median surrogate acc")
        ax.set_ylim(0, 1.0)
    else:
        ax.set_axis_off()

    fig.tight_layout()
    _save(fig, path)
