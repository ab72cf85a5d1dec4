"""Bi-objective bookkeeping: dominance, scoring, hypervolume, acquisition.

Objectives are (maximize validation accuracy, minimize parallel latency).
The acquisition is a Monte-Carlo noisy expected-hypervolume-improvement:
front observations are re-drawn from their posteriors each sample, so noisy
evaluations do not freeze a lucky point into the front.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gp import GPSurrogate, predict
from .space import Configuration, MemoryFootprint


@dataclass(frozen=True)
class ObjectivePoint:
    accuracy: float
    latency_ms: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0,1], got {self.accuracy}")
        if not self.latency_ms > 0:
            raise ValueError(f"latency must be positive, got {self.latency_ms}")


@dataclass(frozen=True)
class EvaluationRecord:
    """One evaluated candidate: configuration, encoding, objectives, footprint."""

    config: Configuration
    encoded: np.ndarray
    objectives: ObjectivePoint | None
    memory: MemoryFootprint
    feasible: bool
    epoch_seed: int
    failed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoded", np.asarray(self.encoded, dtype=float))
        if not self.feasible and self.objectives is not None:
            raise ValueError("infeasible records carry no objectives")

    @property
    def evaluated(self) -> bool:
        return self.feasible and not self.failed and self.objectives is not None


@dataclass(frozen=True)
class ParetoFront:
    """Non-dominated feasible records, in evaluation order."""

    records: tuple[EvaluationRecord, ...]
    reference_point: tuple[float, float] | None = None  # (accuracy floor, latency ceiling)

    def __len__(self) -> int:
        return len(self.records)

    def objective_array(self) -> np.ndarray:
        return np.array([(r.objectives.accuracy, r.objectives.latency_ms)
                         for r in self.records], dtype=float).reshape(len(self.records), 2)

    def encoded_array(self) -> np.ndarray:
        return np.vstack([r.encoded for r in self.records])


def dominates(a: ObjectivePoint, b: ObjectivePoint) -> bool:
    """a dominates b: no worse in both objectives, strictly better in one."""
    return (a.accuracy >= b.accuracy and a.latency_ms <= b.latency_ms
            and (a.accuracy > b.accuracy or a.latency_ms < b.latency_ms))


def pareto_front(records: Sequence[EvaluationRecord],
                 reference_point: tuple[float, float] | None = None) -> ParetoFront:
    """Exact non-dominated subset of the evaluated records.

    Exact objective-space duplicates keep the first record by evaluation
    order.  An empty result (no feasible evaluated record) is the
    empty-front verdict, not an error.
    """
    usable = [r for r in records if r.evaluated]
    members: list[EvaluationRecord] = []
    for rec in usable:
        obj = rec.objectives
        excluded = False
        for other in usable:
            if other is rec:
                continue
            if dominates(other.objectives, obj):
                excluded = True
                break
        if not excluded:
            # duplicate objectives: keep only the earliest
            if any(m.objectives.accuracy == obj.accuracy
                   and m.objectives.latency_ms == obj.latency_ms for m in members):
                continue
            members.append(rec)
    return ParetoFront(tuple(members), reference_point)


def score(front: ParetoFront, alpha: float) -> np.ndarray:
    """Weighted score over min-max-normalized front objectives.

    With a single member or degenerate spread the normalized accuracy is
    1.0 and the normalized latency 0.0, so a lone point scores 1.
    """
    if len(front) == 0:
        raise ValueError("cannot score an empty front")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0,1]")
    obj = front.objective_array()
    acc, lat = obj[:, 0], obj[:, 1]

    def minmax(v: np.ndarray, degenerate: float) -> np.ndarray:
        spread = v.max() - v.min()
        if spread <= 0:
            return np.full(v.shape, degenerate)
        return (v - v.min()) / spread

    f_norm = minmax(acc, 1.0)
    g_norm = minmax(lat, 0.0)
    return alpha * f_norm + (1.0 - alpha) * (1.0 - g_norm)


def select_optimal(front: ParetoFront, alpha: float) -> EvaluationRecord:
    """Argmax of the score; ties broken by accuracy, latency, then order."""
    if len(front) == 0:
        raise ValueError("cannot select from an empty front")
    scores = score(front, alpha)
    best_idx = 0
    for i in range(1, len(front)):
        a, b = front.records[i].objectives, front.records[best_idx].objectives
        key_i = (scores[i], a.accuracy, -a.latency_ms)
        key_b = (scores[best_idx], b.accuracy, -b.latency_ms)
        if key_i > key_b:
            best_idx = i
    return front.records[best_idx]


def hypervolume_points(points: np.ndarray, reference_point: tuple[float, float]) -> float:
    """Area dominated by a point set inside the reference box.

    Points outside the box contribute nothing; the set need not be
    non-dominated.  Sweep over accuracy-descending order.
    """
    rf, rl = reference_point
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        return 0.0
    keep = (pts[:, 0] > rf) & (pts[:, 1] < rl)
    pts = pts[keep]
    if pts.shape[0] == 0:
        return 0.0
    order = np.argsort(-pts[:, 0], kind="stable")
    hv = 0.0
    run_lat = rl
    for a, l in pts[order]:
        if l < run_lat:
            hv += (a - rf) * (run_lat - l)
            run_lat = l
    return hv


def hypervolume(front: ParetoFront | np.ndarray,
                reference_point: tuple[float, float]) -> float:
    """Dominated hypervolume of a front relative to the reference point.

    Every front point must dominate the reference point (accuracy at or
    above the floor, latency at or below the ceiling).
    """
    pts = front.objective_array() if isinstance(front, ParetoFront) else \
        np.atleast_2d(np.asarray(front, dtype=float))
    if pts.size == 0:
        return 0.0
    rf, rl = reference_point
    bad = (pts[:, 0] < rf) | (pts[:, 1] > rl)
    if np.any(bad):
        a, l = pts[np.argmax(bad)]
        raise ValueError(f"front point ({a}, {l}) does not dominate reference {reference_point}")
    return hypervolume_points(pts, reference_point)


def _staircase(points: np.ndarray, reference_point: tuple[float, float]
               ) -> tuple[np.ndarray, np.ndarray]:
    """Accuracy-descending staircase (acc_i, lat_i) with strictly falling lat."""
    rf, rl = reference_point
    keep = (points[:, 0] > rf) & (points[:, 1] < rl)
    pts = points[keep]
    if pts.shape[0] == 0:
        return np.empty(0), np.empty(0)
    order = np.argsort(-pts[:, 0], kind="stable")
    accs, lats = [], []
    run_lat = rl
    for a, l in pts[order]:
        if l < run_lat:
            accs.append(a)
            lats.append(l)
            run_lat = l
    return np.asarray(accs), np.asarray(lats)


def _hvi_batch(cand_acc: np.ndarray, cand_lat: np.ndarray,
               stair_acc: np.ndarray, stair_lat: np.ndarray,
               reference_point: tuple[float, float]) -> np.ndarray:
    """Hypervolume improvement of each candidate over a fixed staircase."""
    rf, rl = reference_point
    width = np.maximum(cand_acc - rf, 0.0)
    height = np.maximum(rl - cand_lat, 0.0)
    total = width * height
    overlap = np.zeros_like(total)
    prev_lat = rl
    for a_i, l_i in zip(stair_acc, stair_lat):
        w = np.maximum(np.minimum(a_i, cand_acc) - rf, 0.0)
        h = np.maximum(np.maximum(prev_lat, cand_lat) - np.maximum(l_i, cand_lat), 0.0)
        overlap += w * h
        prev_lat = l_i
    return np.maximum(total - overlap, 0.0)


def nehvi_acquisition(gp_f: GPSurrogate, gp_g: GPSurrogate, candidates: np.ndarray,
                      front_inputs: np.ndarray, reference_point: tuple[float, float],
                      mc_samples: int, seed: int) -> np.ndarray:
    """Per-candidate expected hypervolume improvement under posterior draws.

    Each Monte-Carlo sample re-draws the front members' objectives and the
    candidates' objectives from their (independent, marginal) posteriors,
    rebuilds the dominated region, and measures each candidate's added
    area.  Deterministic for a fixed seed; scores are >= 0.
    """
    if gp_f is None or gp_g is None:
        raise ValueError("both objective surrogates must be fitted")
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    if cands.shape[0] == 0:
        raise ValueError("candidate set is empty")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")

    front_x = np.atleast_2d(np.asarray(front_inputs, dtype=float)) \
        if front_inputs is not None and np.size(front_inputs) else None
    rng = np.random.default_rng(seed)
    n = cands.shape[0]

    cf_mean, cf_var = predict(gp_f, cands)
    cg_mean, cg_var = predict(gp_g, cands)
    cf_draws = cf_mean + np.sqrt(cf_var) * rng.standard_normal((mc_samples, n))
    cg_draws = cg_mean + np.sqrt(cg_var) * rng.standard_normal((mc_samples, n))

    if front_x is not None:
        m = front_x.shape[0]
        ff_mean, ff_var = predict(gp_f, front_x)
        fg_mean, fg_var = predict(gp_g, front_x)
        ff_draws = ff_mean + np.sqrt(ff_var) * rng.standard_normal((mc_samples, m))
        fg_draws = fg_mean + np.sqrt(fg_var) * rng.standard_normal((mc_samples, m))

    scores = np.zeros(n)
    for s in range(mc_samples):
        if front_x is not None:
            base = np.column_stack([ff_draws[s], fg_draws[s]])
            stair_acc, stair_lat = _staircase(base, reference_point)
        else:
            stair_acc = stair_lat = np.empty(0)
        scores += _hvi_batch(cf_draws[s], cg_draws[s], stair_acc, stair_lat, reference_point)
    return scores / mc_samples
