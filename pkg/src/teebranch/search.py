"""Constrained bi-objective search loop over side-branch configurations.

Feasibility (secure-memory footprint within budget) is checked before any
training, so the surrogates only ever see feasible points and the budget
constraint holds by construction.  Every random draw is derived from the
settings seed and the phase coordinates, which makes a run bit-reproducible
and lets a resumed run retrace the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .gp import GPSurrogate, fit_gp, predict
from .latency import CostProfile, parallel_latency, profile_to_dict, worst_case_latency_bound
from .moo import (
    EvaluationRecord,
    ObjectivePoint,
    ParetoFront,
    hypervolume,
    nehvi_acquisition,
    pareto_front,
    select_optimal,
)
from .space import (
    BackboneDims,
    BlockSpec,
    Configuration,
    FeatureDims,
    MemoryFootprint,
    OpType,
    SearchFactorRanges,
    configuration_from_dict,
    configuration_to_dict,
    encode,
    estimate_memory,
    sample_random,
)

CHECKPOINT_VERSION = 1

# seed-stream tags so each phase draws from its own deterministic stream
_SEED_INIT, _SEED_POOL, _SEED_ACQ, _SEED_FIT, _SEED_EVAL = 11, 13, 17, 19, 23


class PoolExhausted(RuntimeError):
    """No feasible, unevaluated candidate found within the retry budget."""


Trainer = Callable[[Configuration, int], float]


@dataclass(frozen=True)
class SearchSettings:
    alpha: float
    h_limit_bytes: int
    batch_size: int
    iterations: int
    init_samples: int
    mc_samples: int
    seed: int
    candidate_pool: int = 128
    gp_restarts: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0,1]")
        if self.h_limit_bytes <= 0:
            raise ValueError("h_limit_bytes must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0 or self.init_samples < 0:
            raise ValueError("iterations and init_samples must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class SearchState:
    ranges: SearchFactorRanges
    profile: CostProfile
    io_dims: BackboneDims
    settings: SearchSettings
    reference_point: tuple[float, float]
    records: list[EvaluationRecord] = field(default_factory=list)
    gp_f: GPSurrogate | None = None
    gp_g: GPSurrogate | None = None

    def evaluated_keys(self) -> set[tuple]:
        return {tuple(r.encoded.tolist()) for r in self.records}

    def front(self) -> ParetoFront:
        return pareto_front(self.records, self.reference_point)


@dataclass(frozen=True)
class SearchResult:
    front: ParetoFront
    best: EvaluationRecord | None
    records: tuple[EvaluationRecord, ...]
    reference_point: tuple[float, float]
    hypervolume_history: tuple[float, ...]

    @property
    def empty(self) -> bool:
        return len(self.front) == 0


def _derived_seed(base_seed: int, tag: int, *coords: int) -> int:
    ss = np.random.SeedSequence([base_seed, tag, *coords])
    return int(ss.generate_state(1)[0])


def minimum_footprint(ranges: SearchFactorRanges, io_dims: BackboneDims) -> MemoryFootprint:
    """Footprint of the cheapest valid configuration (all blocks inactive)."""
    block = BlockSpec(OpType.INACTIVE, ranges.sd_choices[0], ranges.cd_choices[0],
                      ranges.sh_choices[0], ranges.ch_choices[0])
    config = Configuration(ranges.su_choices[0], ranges.cu_choices[0],
                           (block,) * ranges.num_blocks)
    return estimate_memory(config, io_dims)


def _sample_feasible(state: SearchState, seed: int, exclude: set[tuple],
                     max_attempts: int = 5000) -> Configuration:
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        config = sample_random(state.ranges, rng)
        key = tuple(encode(config, state.ranges).tolist())
        if key in exclude:
            continue
        if estimate_memory(config, state.io_dims).total <= state.settings.h_limit_bytes:
            return config
    raise PoolExhausted(
        f"no feasible unevaluated configuration found in {max_attempts} draws")


def propose_batch(state: SearchState, batch_size: int, seed: int) -> list[Configuration]:
    """Pick the next candidates to evaluate.

    During the init phase (no fitted surrogates) this returns feasible
    random samples.  Afterwards it is sequential-greedy: argmax acquisition
    over a feasible random pool, then condition the surrogates on the
    posterior-mean fantasy of each pick before choosing the next.  Never
    returns an already-evaluated configuration.
    """
    exclude = state.evaluated_keys()
    picks: list[Configuration] = []

    if state.gp_f is None or state.gp_g is None:
        for i in range(batch_size):
            config = _sample_feasible(state, _derived_seed(seed, _SEED_INIT, i), exclude)
            exclude.add(tuple(encode(config, state.ranges).tolist()))
            picks.append(config)
        return picks

    gp_f, gp_g = state.gp_f, state.gp_g
    front_x = state.front().encoded_array() if len(state.front()) else None
    for i in range(batch_size):
        pool: list[Configuration] = []
        keys: list[tuple] = []
        pool_rng = np.random.default_rng(_derived_seed(seed, _SEED_POOL, i))
        attempts = 0
        while len(pool) < state.settings.candidate_pool:
            attempts += 1
            if attempts > 50 * state.settings.candidate_pool:
                if pool:
                    break
                raise PoolExhausted("candidate pool could not be filled with feasible configs")
            config = sample_random(state.ranges, pool_rng)
            key = tuple(encode(config, state.ranges).tolist())
            if key in exclude or key in keys:
                continue
            if estimate_memory(config, state.io_dims).total > state.settings.h_limit_bytes:
                continue
            pool.append(config)
            keys.append(key)
        encoded = np.vstack([np.asarray(k) for k in keys])
        scores = nehvi_acquisition(gp_f, gp_g, encoded, front_x, state.reference_point,
                                   state.settings.mc_samples,
                                   _derived_seed(seed, _SEED_ACQ, i))
        best = int(np.argmax(scores))
        picks.append(pool[best])
        exclude.add(keys[best])
        x_pick = encoded[best]
        mu_f, _ = predict(gp_f, x_pick)
        mu_g, _ = predict(gp_g, x_pick)
        gp_f = gp_f.with_observations(x_pick, mu_f)
        gp_g = gp_g.with_observations(x_pick, mu_g)
        front_x = x_pick[None, :] if front_x is None else np.vstack([front_x, x_pick])
    return picks


def _evaluate(state: SearchState, config: Configuration, trainer: Trainer,
              epoch_seed: int) -> EvaluationRecord:
    encoded = encode(config, state.ranges)
    memory = estimate_memory(config, state.io_dims)
    if memory.total > state.settings.h_limit_bytes:
        raise AssertionError("constraint violation: infeasible candidate reached evaluation")
    latency = parallel_latency(config, state.profile, state.io_dims)
    try:
        accuracy = float(trainer(config, epoch_seed))
    except Exception:
        return EvaluationRecord(config, encoded, None, memory, feasible=True,
                                epoch_seed=epoch_seed, failed=True)
    return EvaluationRecord(config, encoded, ObjectivePoint(accuracy, latency), memory,
                            feasible=True, epoch_seed=epoch_seed)


def _refit(state: SearchState) -> None:
    usable = [r for r in state.records if r.evaluated]
    if len(usable) < 2:
        state.gp_f = state.gp_g = None
        return
    fit_seed = _derived_seed(state.settings.seed, _SEED_FIT, len(usable))
    state.gp_f = fit_gp(usable, lambda r: r.objectives.accuracy, seed=fit_seed,
                        restarts=state.settings.gp_restarts)
    state.gp_g = fit_gp(usable, lambda r: r.objectives.latency_ms, seed=fit_seed + 1,
                        restarts=state.settings.gp_restarts)


# ---------------------------------------------------------------------------
# Checkpoint log: one JSON document per line, append-only

def _record_to_dict(record: EvaluationRecord, phase: str | int, index: int) -> dict:
    doc = {
        "type": "record",
        "phase": phase,
        "index": index,
        "config": configuration_to_dict(record.config),
        "encoded": record.encoded.tolist(),
        "parameter_bytes": record.memory.parameter_bytes,
        "peak_activation_bytes": record.memory.peak_activation_bytes,
        "feasible": record.feasible,
        "failed": record.failed,
        "epoch_seed": record.epoch_seed,
    }
    if record.objectives is not None:
        doc["accuracy"] = record.objectives.accuracy
        doc["latency_ms"] = record.objectives.latency_ms
    return doc


def _record_from_dict(doc: dict) -> EvaluationRecord:
    objectives = None
    if "accuracy" in doc:
        objectives = ObjectivePoint(doc["accuracy"], doc["latency_ms"])
    return EvaluationRecord(
        config=configuration_from_dict(doc["config"]),
        encoded=np.asarray(doc["encoded"], dtype=float),
        objectives=objectives,
        memory=MemoryFootprint(doc["parameter_bytes"], doc["peak_activation_bytes"]),
        feasible=doc["feasible"],
        epoch_seed=doc["epoch_seed"],
        failed=doc["failed"],
    )


def _io_dims_to_dict(io_dims: BackboneDims) -> dict:
    return {"blocks": [[d.channels, d.height, d.width] for d in io_dims.blocks],
            "num_classes": io_dims.num_classes}


def _io_dims_from_dict(doc: dict) -> BackboneDims:
    return BackboneDims(tuple(FeatureDims(*b) for b in doc["blocks"]), doc["num_classes"])


def _ranges_to_plain_dict(ranges: SearchFactorRanges) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ranges).items()}


def search_input_digest(ranges: SearchFactorRanges, profile: CostProfile,
                        io_dims: BackboneDims, settings: SearchSettings) -> str:
    payload = json.dumps({
        "ranges": _ranges_to_plain_dict(ranges),
        "profile": profile_to_dict(profile),
        "io_dims": _io_dims_to_dict(io_dims),
        "settings": asdict(settings),
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class CheckpointWriter:
    def __init__(self, path, header: dict | None = None):
        self.path = path
        if header is not None:
            with open(path, "w") as fh:
                fh.write(json.dumps(header, sort_keys=True) + "\n")

    def append(self, doc: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def _null_writer() -> CheckpointWriter:
    w = CheckpointWriter.__new__(CheckpointWriter)
    w.path = None
    return w


def run_search(ranges: SearchFactorRanges, profile: CostProfile, io_dims: BackboneDims,
               trainer: Trainer, settings: SearchSettings,
               checkpoint_path=None, stop_after_iterations: int | None = None) -> SearchResult:
    """Full search: seeded init design, then NEHVI-driven batches.

    Candidate accuracy comes from the trainer callable, latency from the
    closed-form model; infeasible configurations are rejected before any
    training.  The optional checkpoint is an append-only record log that
    ``resume_search`` can continue from.
    """
    reference_point = (0.0, worst_case_latency_bound(profile, ranges, io_dims))
    state = SearchState(ranges, profile, io_dims, settings, reference_point)

    writer = _null_writer()
    if checkpoint_path is not None:
        header = {
            "type": "header",
            "version": CHECKPOINT_VERSION,
            "settings": asdict(settings),
            "ranges": _ranges_to_plain_dict(ranges),
            "profile": profile_to_dict(profile),
            "io_dims": _io_dims_to_dict(io_dims),
            "reference_point": list(reference_point),
            "input_digest": search_input_digest(ranges, profile, io_dims, settings),
        }
        writer = CheckpointWriter(checkpoint_path, header)

    if minimum_footprint(ranges, io_dims).total > settings.h_limit_bytes:
        writer.append({"type": "verdict", "verdict": "empty-front",
                       "reason": "memory budget below minimum achievable footprint"})
        return SearchResult(ParetoFront((), reference_point), None, (), reference_point, ())

    return _search_loop(state, trainer, writer, completed_iterations=-1,
                        stop_after_iterations=stop_after_iterations)


def _search_loop(state: SearchState, trainer: Trainer, writer: CheckpointWriter,
                 completed_iterations: int,
                 stop_after_iterations: int | None) -> SearchResult:
    settings = state.settings
    hv_history: list[float] = []

    def hv_now() -> float:
        front = state.front()
        return hypervolume(front, state.reference_point) if len(front) else 0.0

    if completed_iterations < 0:
        configs = propose_batch(state, settings.init_samples,
                                _derived_seed(settings.seed, _SEED_INIT, 0))
        for i, config in enumerate(configs):
            record = _evaluate(state, config, trainer,
                               _derived_seed(settings.seed, _SEED_EVAL, 0, i))
            state.records.append(record)
            writer.append(_record_to_dict(record, "init", i))
        completed_iterations = 0
        writer.append({"type": "init-complete", "hypervolume": hv_now()})
    hv_history.append(hv_now())

    last = settings.iterations if stop_after_iterations is None \
        else min(stop_after_iterations, settings.iterations)
    for t in range(completed_iterations, last):
        _refit(state)
        if state.gp_f is None:
            configs = propose_batch(state, settings.batch_size,
                                    _derived_seed(settings.seed, _SEED_INIT, t + 1))
        else:
            configs = propose_batch(state, settings.batch_size,
                                    _derived_seed(settings.seed, _SEED_POOL, t + 1))
        for i, config in enumerate(configs):
            record = _evaluate(state, config, trainer,
                               _derived_seed(settings.seed, _SEED_EVAL, t + 1, i))
            state.records.append(record)
            writer.append(_record_to_dict(record, t, i))
        writer.append({"type": "iteration-complete", "iteration": t, "hypervolume": hv_now()})
        hv_history.append(hv_now())

    front = state.front()
    best = select_optimal(front, settings.alpha) if len(front) else None
    if best is not None:
        writer.append({"type": "selected", "config": configuration_to_dict(best.config),
                       "accuracy": best.objectives.accuracy,
                       "latency_ms": best.objectives.latency_ms})
    return SearchResult(front, best, tuple(state.records), state.reference_point,
                        tuple(hv_history))


def load_checkpoint(path) -> tuple[dict, list[EvaluationRecord], int]:
    """Read a checkpoint log: header, records, and completed iteration count.

    Returns completed_iterations = -1 if the init phase did not finish.
    """
    header = None
    records: list[EvaluationRecord] = []
    completed = -1
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            kind = doc.get("type")
            if kind == "header":
                header = doc
            elif kind == "record":
                records.append(_record_from_dict(doc))
            elif kind == "init-complete":
                completed = 0
            elif kind == "iteration-complete":
                completed = doc["iteration"] + 1
    if header is None:
        raise ValueError(f"{path}: missing checkpoint header")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    return header, records, completed


def resume_search(checkpoint_path, trainer: Trainer,
                  stop_after_iterations: int | None = None) -> SearchResult:
    """Continue a checkpointed search to its configured iteration budget.

    The header digest is recomputed and verified so a checkpoint cannot be
    silently resumed against different inputs.
    """
    header, records, completed = load_checkpoint(checkpoint_path)
    settings = SearchSettings(**header["settings"])
    ranges = SearchFactorRanges(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in header["ranges"].items()})
    profile_doc = dict(header["profile"])
    profile = CostProfile(
        gpu_block_ms=tuple(profile_doc["gpu_block_ms"]),
        adapter_ms=tuple(profile_doc["adapter_ms"]),
        transfer_base_ms=profile_doc["transfer_base_ms"],
        transfer_bandwidth_bytes_per_ms=profile_doc["transfer_bandwidth_bytes_per_ms"],
        tee_cost_coeffs=tuple(profile_doc["tee_cost_coeffs"]),
        classifier_ms=profile_doc["classifier_ms"],
    )
    io_dims = _io_dims_from_dict(header["io_dims"])
    digest = search_input_digest(ranges, profile, io_dims, settings)
    if digest != header["input_digest"]:
        raise ValueError("checkpoint digest mismatch: inputs changed since the run started")

    state = SearchState(ranges, profile, io_dims, settings,
                        tuple(header["reference_point"]), records=list(records))
    writer = CheckpointWriter(checkpoint_path, header=None)  # append mode
    return _search_loop(state, trainer, writer, completed_iterations=completed,
                        stop_after_iterations=stop_after_iterations)


def run_random_search(ranges: SearchFactorRanges, profile: CostProfile,
                      io_dims: BackboneDims, trainer: Trainer,
                      settings: SearchSettings) -> SearchResult:
    """Random-search baseline at the same evaluation budget as run_search."""
    reference_point = (0.0, worst_case_latency_bound(profile, ranges, io_dims))
    state = SearchState(ranges, profile, io_dims, settings, reference_point)
    if minimum_footprint(ranges, io_dims).total > settings.h_limit_bytes:
        return SearchResult(ParetoFront((), reference_point), None, (), reference_point, ())
    budget = settings.init_samples + settings.iterations * settings.batch_size
    exclude: set[tuple] = set()
    for i in range(budget):
        config = _sample_feasible(state, _derived_seed(settings.seed, _SEED_INIT, 7000 + i),
                                  exclude)
        exclude.add(tuple(encode(config, ranges).tolist()))
        record = _evaluate(state, config, trainer,
                           _derived_seed(settings.seed, _SEED_EVAL, 7000, i))
        state.records.append(record)
    front = state.front()
    best = select_optimal(front, settings.alpha) if len(front) else None
    hv = hypervolume(front, reference_point) if len(front) else 0.0
    return SearchResult(front, best, tuple(state.records), reference_point, (hv,))
