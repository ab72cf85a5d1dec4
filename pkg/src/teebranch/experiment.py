"""End-to-end experiment orchestration behind the CLI.

One versioned YAML spec file drives every stage; unknown keys are errors so
a spec that produced numbers can be trusted to mean what it says.  Every
stage persists its artifacts plus content digests into the run manifest,
runs standalone from upstream artifacts, and draws randomness only from
spec-declared seeds (the optional audit mode asserts the global RNGs were
never consulted).
"""

from __future__ import annotations

import csv
import hashlib
import json
import random
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attack import (
    AttackScenario,
    Exposure,
    VictimBundle,
    reports_to_csv,
    run_attack_suite,
)
from .datasets import SyntheticDataset, make_dataset
from .latency import (
    CostProfile,
    load_profile,
    parallel_latency,
    save_profile,
    sequential_baseline_latency,
    simulate_schedule,
    transfer_payload_bytes,
)
from .models import (
    ModelState,
    build_backbone,
    clone_params,
    load_model,
    save_model,
)
from .search import SearchResult, SearchSettings, resume_search, run_search
from .space import (
    Configuration,
    SearchFactorRanges,
    default_ranges,
    estimate_memory,
    load_configuration,
    load_ranges,
    sample_random,
    save_configuration,
    save_ranges,
)
from .training import TrainConfig, train_backbone, train_candidate, train_poisoned

SPEC_SCHEMA_VERSION = 1
MANIFEST_VERSION = 1
ORACLE_TOLERANCE_MS = 1e-9


class SpecError(ValueError):
    """Malformed or unresolvable experiment spec."""


class OracleMismatch(RuntimeError):
    """Closed-form latency and schedule oracle disagreed beyond tolerance."""


class MissingArtifact(RuntimeError):
    """A stage requires an artifact an earlier stage has not produced."""


class AuditError(RuntimeError):
    """A global entropy source was consumed during an audited run."""


# ---------------------------------------------------------------------------
# Spec schema

@dataclass(frozen=True)
class DataSpec:
    recipe: str = "textured-patches-v1"
    n_train: int = 1600
    n_val: int = 400
    n_test: int = 400
    pretrain_seed: int = 1001
    task_seed: int = 2002
    aux_seed: int = 3003


@dataclass(frozen=True)
class BackboneSpec:
    depth: int = 6
    width: int = 8
    num_classes: int = 8
    seed: int = 7
    pretrain_epochs: int = 8
    pretrain_lr: float = 0.25
    batch_size: int = 64


@dataclass(frozen=True)
class TeacherSpec:
    epochs: int = 25
    lr: float = 0.25
    seed: int = 8


@dataclass(frozen=True)
class CandidateSpec:
    lr: float = 0.5
    batch_size: int = 32
    epochs: int = 1
    subset_fraction: float = 1.0


@dataclass(frozen=True)
class TrainSpec:
    beta: float = 0.5
    lambda_: float = 0.1
    kd_temperature: float = 4.0
    lr: float = 0.3
    clip_threshold: float = 2.0
    epochs: int = 20
    batch_size: int = 64
    seed: int = 11
    control_lambda: float = 0.0


@dataclass(frozen=True)
class AttackSpec:
    scenarios: tuple[str, ...] = ("NoShield", "BlackBox", "PoisonedREE")
    query_fraction: float = 0.01
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ProfileEvalSpec:
    num_samples: int = 25
    seed: int = 3
    cpu_slowdown: float = 8.0
    configs: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentSpec:
    ranges_path: Path
    profile_path: Path
    data: DataSpec
    backbone: BackboneSpec
    teacher: TeacherSpec
    search: SearchSettings
    candidate: CandidateSpec
    train: TrainSpec
    attack: AttackSpec
    profile_eval: ProfileEvalSpec
    audit: bool = False
    spec_path: Path | None = None

    def load_ranges(self) -> SearchFactorRanges:
        try:
            return load_ranges(self.ranges_path)
        except (ValueError, KeyError, yaml.YAMLError) as exc:
            raise SpecError(f"ranges file: {exc}") from exc

    def load_profile(self) -> CostProfile:
        try:
            return load_profile(self.profile_path)
        except (ValueError, KeyError, yaml.YAMLError) as exc:
            raise SpecError(f"cost profile: {exc}") from exc


_SECTION_TYPES = {
    "data": DataSpec,
    "backbone": BackboneSpec,
    "teacher": TeacherSpec,
    "candidate": CandidateSpec,
    "attack": AttackSpec,
    "profile_eval": ProfileEvalSpec,
}

_FIELD_RENAMES = {"lambda": "lambda_"}


def _parse_section(name: str, cls, doc: dict):
    doc = dict(doc or {})
    renamed = {_FIELD_RENAMES.get(k, k): v for k, v in doc.items()}
    allowed = set(cls.__dataclass_fields__)
    unknown = set(renamed) - allowed
    if unknown:
        raise SpecError(f"{name}: unknown keys {sorted(unknown)}")
    for key in ("scenarios", "seeds", "configs"):
        if key in renamed and isinstance(renamed[key], list):
            renamed[key] = tuple(renamed[key])
    try:
        return cls(**renamed)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{name}: {exc}") from exc


def load_experiment_spec(path) -> ExperimentSpec:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: expected a mapping at top level")
    if doc.get("version") != SPEC_SCHEMA_VERSION:
        raise SpecError(f"{path}: unsupported spec version {doc.get('version')!r}")
    known_top = {"version", "ranges", "profile", "search", "train", "audit",
                 *_SECTION_TYPES}
    unknown = set(doc) - known_top
    if unknown:
        raise SpecError(f"{path}: unknown top-level keys {sorted(unknown)}")
    for req in ("ranges", "profile"):
        if req not in doc:
            raise SpecError(f"{path}: missing required key {req!r}")

    base = path.parent
    ranges_path = (base / doc["ranges"]).resolve()
    profile_path = (base / doc["profile"]).resolve()
    for p in (ranges_path, profile_path):
        if not p.exists():
            raise SpecError(f"{path}: referenced file not found: {p}")

    search_doc = dict(doc.get("search") or {})
    unknown = set(search_doc) - set(SearchSettings.__dataclass_fields__)
    if unknown:
        raise SpecError(f"search: unknown keys {sorted(unknown)}")
    defaults = dict(alpha=0.5, h_limit_bytes=2_000_000, batch_size=3, iterations=4,
                    init_samples=10, mc_samples=32, seed=0, candidate_pool=64)
    defaults.update(search_doc)
    try:
        search = SearchSettings(**defaults)
    except ValueError as exc:
        raise SpecError(f"search: {exc}") from exc

    sections = {name: _parse_section(name, cls, doc.get(name))
                for name, cls in _SECTION_TYPES.items()}
    train = _parse_section("train", TrainSpec, doc.get("train"))
    audit = bool(doc.get("audit", False))
    return ExperimentSpec(ranges_path=ranges_path, profile_path=profile_path,
                          search=search, train=train, audit=audit, spec_path=path,
                          **sections)


def write_default_spec(directory) -> Path:
    """Materialize a ready-to-run spec plus its ranges and profile files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ranges = default_ranges(num_blocks=6)
    save_ranges(ranges, directory / "ranges.yaml")
    profile = CostProfile(
        gpu_block_ms=(2.0, 3.0, 2.5, 4.0, 3.5, 3.0),
        adapter_ms=(0.2, 0.2, 0.3, 0.3, 0.4, 0.4),
        transfer_base_ms=0.5,
        transfer_bandwidth_bytes_per_ms=8192.0,
        tee_cost_coeffs=(2e-6, 0.1),
        classifier_ms=0.05,
    )
    save_profile(profile, directory / "profile.yaml")
    spec = {
        "version": SPEC_SCHEMA_VERSION,
        "ranges": "ranges.yaml",
        "profile": "profile.yaml",
        "data": {"recipe": "textured-patches-v1", "n_train": 1600, "n_val": 400,
                 "n_test": 400, "pretrain_seed": 1001, "task_seed": 2002,
                 "aux_seed": 3003},
        "backbone": {"depth": 6, "width": 8, "num_classes": 8, "seed": 7,
                     "pretrain_epochs": 8, "pretrain_lr": 0.25, "batch_size": 64},
        "teacher": {"epochs": 25, "lr": 0.25, "seed": 8},
        "search": {"alpha": 0.5, "h_limit_bytes": 2_000_000, "batch_size": 3,
                   "iterations": 4, "init_samples": 10, "mc_samples": 32, "seed": 0,
                   "candidate_pool": 64},
        "candidate": {"lr": 0.5, "batch_size": 32, "epochs": 1, "subset_fraction": 1.0},
        "train": {"beta": 0.5, "lambda": 0.1, "kd_temperature": 4.0, "lr": 0.3,
                  "clip_threshold": 2.0, "epochs": 20, "batch_size": 64, "seed": 11,
                  "control_lambda": 0.0},
        "attack": {"scenarios": ["NoShield", "BlackBox", "PoisonedREE"],
                   "query_fraction": 0.01, "seeds": [0, 1, 2, 3, 4]},
        "profile_eval": {"num_samples": 25, "seed": 3, "cpu_slowdown": 8.0},
        "audit": False,
    }
    spec_path = directory / "experiment.yaml"
    spec_path.write_text(yaml.safe_dump(spec, sort_keys=False))
    return spec_path


# ---------------------------------------------------------------------------
# Manifest

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(out_dir) -> Path:
    return Path(out_dir) / "manifest.json"


def load_manifest(out_dir) -> dict:
    path = _manifest_path(out_dir)
    if not path.exists():
        return {"version": MANIFEST_VERSION, "tool_version": __version__,
                "inputs": {}, "stages": {}}
    return json.loads(path.read_text())


def _record_stage(out_dir, spec: ExperimentSpec, stage: str,
                  artifacts: list[Path]) -> dict:
    manifest = load_manifest(out_dir)
    manifest["tool_version"] = __version__
    if spec.spec_path is not None:
        manifest["inputs"]["spec"] = file_digest(spec.spec_path)
    manifest["inputs"]["ranges"] = file_digest(spec.ranges_path)
    manifest["inputs"]["profile"] = file_digest(spec.profile_path)
    manifest["stages"][stage] = {
        "completed": True,
        "artifacts": {p.name: file_digest(p) for p in artifacts},
    }
    _manifest_path(out_dir).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


@contextmanager
def entropy_audit(enabled: bool = True):
    """Assert that nothing consumed the global RNG streams inside the block."""
    if not enabled:
        yield
        return
    py_state = random.getstate()
    np_state = np.random.get_state()
    yield
    if random.getstate() != py_state:
        raise AuditError("python global random state was consumed")
    after = np.random.get_state()
    same = (np_state[0] == after[0] and np.array_equal(np_state[1], after[1])
            and np_state[2:] == after[2:])
    if not same:
        raise AuditError("numpy global random state was consumed")


# ---------------------------------------------------------------------------
# Shared builders

def build_datasets(spec: ExperimentSpec) -> tuple[SyntheticDataset, SyntheticDataset,
                                                  SyntheticDataset]:
    d = spec.data
    pre = make_dataset(d.recipe, d.pretrain_seed, d.n_train, d.n_val, d.n_test)
    task = make_dataset(d.recipe, d.task_seed, d.n_train, d.n_val, d.n_test)
    aux = make_dataset(d.recipe, d.aux_seed, d.n_train, d.n_val, d.n_test)
    return pre, task, aux


def build_public_backbone(spec: ExperimentSpec, pretrain_ds: SyntheticDataset):
    b = spec.backbone
    arch, params = build_backbone(b.depth, b.width, b.num_classes, b.seed)
    train_backbone(arch, params, pretrain_ds, epochs=b.pretrain_epochs,
                   learning_rate=b.pretrain_lr, batch_size=b.batch_size, seed=b.seed)
    return arch, params


def _check_block_counts(spec: ExperimentSpec, ranges: SearchFactorRanges,
                        profile: CostProfile) -> None:
    if ranges.num_blocks != spec.backbone.depth:
        raise SpecError(
            f"ranges.num_blocks={ranges.num_blocks} != backbone.depth={spec.backbone.depth}")
    if profile.num_blocks != spec.backbone.depth:
        raise SpecError(
            f"profile has {profile.num_blocks} blocks, backbone.depth={spec.backbone.depth}")


# ---------------------------------------------------------------------------
# Stages

def cmd_profile(spec: ExperimentSpec, out_dir) -> Path:
    """Latency report over sampled (or user-given) configurations.

    Cross-checks the closed form against the schedule oracle for every row
    and fails loudly on any mismatch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranges = spec.load_ranges()
    profile = spec.load_profile()
    _check_block_counts(spec, ranges, profile)
    arch, _ = build_backbone(spec.backbone.depth, spec.backbone.width,
                             spec.backbone.num_classes, spec.backbone.seed)
    io_dims = arch.io_dims()

    configs: list[Configuration] = [load_configuration(Path(spec.spec_path).parent / p)
                                    for p in spec.profile_eval.configs]
    rng = np.random.default_rng(np.random.SeedSequence([spec.profile_eval.seed, 606]))
    while len(configs) < spec.profile_eval.num_samples:
        configs.append(sample_random(ranges, rng))

    report_path = out_dir / "profile_report.csv"
    artifacts = [report_path]
    backbone_sum = profile.backbone_total_ms
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "active_blocks", "parameter_bytes", "total_bytes",
                         "backbone_sum_ms", "parallel_ms", "oracle_makespan_ms",
                         "oracle_diff_ms", "split_layer", "sequential_baseline_ms"])
        for i, config in enumerate(configs):
            memory = estimate_memory(config, io_dims)
            g = parallel_latency(config, profile, io_dims, ranges)
            trace = simulate_schedule(config, profile, io_dims)
            diff = abs(g - trace.makespan)
            if diff >= ORACLE_TOLERANCE_MS:
                raise OracleMismatch(
                    f"config {i}: closed form {g} vs oracle {trace.makespan} (diff {diff})")
            taps = config.transfer_indices()
            split = taps[0] - 1 if taps else profile.num_blocks
            payload = transfer_payload_bytes(config.blocks[taps[0] - 1], io_dims, taps[0]) \
                if taps else 0
            baseline = sequential_baseline_latency(
                split, profile, cpu_slowdown=spec.profile_eval.cpu_slowdown,
                transfer_payload=payload)
            writer.writerow([i, config.num_active, memory.parameter_bytes, memory.total,
                             f"{backbone_sum:.9f}", f"{g:.9f}", f"{trace.makespan:.9f}",
                             f"{diff:.3e}", split, f"{baseline:.9f}"])
            if i < 3:
                trace_path = out_dir / f"trace_{i}.csv"
                trace.to_csv(trace_path)
                artifacts.append(trace_path)

    from .reporting import render_schedule_figure
    fig_path = out_dir / "figures" / "schedule_trace.png"
    render_schedule_figure(simulate_schedule(configs[0], profile, io_dims), fig_path)
    artifacts.append(fig_path)
    _record_stage(out_dir, spec, "profile", artifacts)
    return report_path


def _candidate_trainer(spec: ExperimentSpec, arch, public, task_ds):
    c = spec.candidate

    def trainer(config: Configuration, epoch_seed: int) -> float:
        return train_candidate(config, (arch, public), task_ds, seed=epoch_seed,
                               learning_rate=c.lr, batch_size=c.batch_size,
                               epochs=c.epochs, subset_fraction=c.subset_fraction)

    return trainer


def _write_front_csv(path, result: SearchResult) -> None:
    front_ids = {id(r) for r in result.front.records}
    best_id = id(result.best) if result.best is not None else None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "accuracy", "latency_ms", "parameter_bytes",
                         "total_bytes", "failed", "on_front", "selected"])
        for i, rec in enumerate(result.records):
            acc = f"{rec.objectives.accuracy:.6f}" if rec.objectives else ""
            lat = f"{rec.objectives.latency_ms:.6f}" if rec.objectives else ""
            writer.writerow([i, acc, lat, rec.memory.parameter_bytes, rec.memory.total,
                             int(rec.failed), int(id(rec) in front_ids),
                             int(id(rec) == best_id)])


def cmd_search(spec: ExperimentSpec, out_dir, resume: bool = False,
               stop_after_iterations: int | None = None) -> SearchResult:
    """Run (or resume) the architecture search and persist its artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranges = spec.load_ranges()
    profile = spec.load_profile()
    _check_block_counts(spec, ranges, profile)
    pre_ds, task_ds, _ = build_datasets(spec)
    arch, public = build_public_backbone(spec, pre_ds)
    trainer = _candidate_trainer(spec, arch, public, task_ds)
    checkpoint = out_dir / "search_checkpoint.jsonl"

    with entropy_audit(spec.audit):
        if resume:
            if not checkpoint.exists():
                raise MissingArtifact(f"no checkpoint to resume at {checkpoint}")
            result = resume_search(checkpoint, trainer,
                                   stop_after_iterations=stop_after_iterations)
        else:
            result = run_search(ranges, profile, arch.io_dims(), trainer, spec.search,
                                checkpoint_path=checkpoint,
                                stop_after_iterations=stop_after_iterations)

    front_path = out_dir / "front.csv"
    _write_front_csv(front_path, result)
    artifacts = [checkpoint, front_path]
    if result.best is not None:
        selected_path = out_dir / "selected_config.yaml"
        save_configuration(result.best.config, selected_path)
        artifacts.append(selected_path)
        from .reporting import render_front_figure
        fig_path = out_dir / "figures" / "pareto_front.png"
        render_front_figure(result, fig_path)
        artifacts.append(fig_path)
    _record_stage(out_dir, spec, "search", artifacts)
    return result


def _curves_to_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "combined_acc", "backbone_acc",
                                                "ce", "kd", "adv_ce", "total"])
        writer.writeheader()
        for row in curves.rows():
            writer.writerow({k: (v if k == "epoch" else f"{v:.8f}")
                             for k, v in row.items()})


def cmd_train(spec: ExperimentSpec, out_dir, config_path=None,
              sweep_lambdas: tuple[float, ...] | None = None) -> dict:
    """Teacher training, the lambda=0 control run, and the poisoned run.

    The victim backbone starts from the teacher weights (the fully
    fine-tuned model the defender would otherwise deploy).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = Path(config_path) if config_path else out_dir / "selected_config.yaml"
    if not config_path.exists():
        raise MissingArtifact(f"selected configuration not found at {config_path}")
    config = load_configuration(config_path)

    pre_ds, task_ds, _ = build_datasets(spec)
    arch, public = build_public_backbone(spec, pre_ds)
    teacher = clone_params(public)
    with entropy_audit(spec.audit):
        train_backbone(arch, teacher, task_ds, epochs=spec.teacher.epochs,
                       learning_rate=spec.teacher.lr, batch_size=spec.backbone.batch_size,
                       seed=spec.teacher.seed)

        def run(lam: float, tag: str):
            model = ModelState(arch=arch, backbone=clone_params(teacher), config=config,
                               teacher=clone_params(teacher), frozen=frozenset({"teacher"}))
            tc = TrainConfig(beta=spec.train.beta, lambda_=lam,
                             kd_temperature=spec.train.kd_temperature,
                             learning_rate=spec.train.lr,
                             clip_threshold=spec.train.clip_threshold,
                             epochs=spec.train.epochs, batch_size=spec.train.batch_size,
                             seed=spec.train.seed)
            trained, curves = train_poisoned(config, model, task_ds, tc)
            ckpt = out_dir / f"victim_{tag}.ckpt"
            save_model(ckpt, trained, recipe=spec.data.recipe,
                       seeds={"train": spec.train.seed, "lambda": lam})
            curves_path = out_dir / f"curves_{tag}.csv"
            _curves_to_csv(curves_path, curves)
            return trained, curves, [ckpt, curves_path]

        _, control_curves, a1 = run(spec.train.control_lambda, "baseline")
        _, poison_curves, a2 = run(spec.train.lambda_, "poisoned")
        artifacts = a1 + a2

        sweep_rows = []
        if sweep_lambdas:
            sweep_path = out_dir / "lambda_sweep.csv"
            with open(sweep_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["lambda", "final_combined_acc", "final_backbone_acc"])
                for lam in sweep_lambdas:
                    _, curves, _ = run(lam, f"sweep_{lam}")
                    writer.writerow([lam, f"{curves.combined_acc[-1]:.6f}",
                                     f"{curves.backbone_acc[-1]:.6f}"])
                    sweep_rows.append((lam, curves.combined_acc[-1],
                                       curves.backbone_acc[-1]))
            artifacts.append(sweep_path)

    from .reporting import render_training_figure
    fig_path = out_dir / "figures" / "training_curves.png"
    render_training_figure(control_curves, poison_curves, fig_path)
    artifacts.append(fig_path)
    _record_stage(out_dir, spec, "train", artifacts)
    return {"control": control_curves, "poisoned": poison_curves, "sweep": sweep_rows}


def cmd_attack(spec: ExperimentSpec, out_dir) -> list:
    """Attack suite against the persisted victims; Table-shaped CSV output."""
    out_dir = Path(out_dir)
    baseline_path = out_dir / "victim_baseline.ckpt"
    poisoned_path = out_dir / "victim_poisoned.ckpt"
    for p in (baseline_path, poisoned_path):
        if not p.exists():
            raise MissingArtifact(f"victim checkpoint not found at {p}")
    baseline, _ = load_model(baseline_path)
    poisoned, header = load_model(poisoned_path)
    if poisoned.teacher is None:
        raise MissingArtifact("poisoned checkpoint is missing the teacher parameters")

    pre_ds, task_ds, aux_ds = build_datasets(spec)
    arch, public = build_public_backbone(spec, pre_ds)
    bundle = VictimBundle(arch=arch, public_backbone=public, teacher=poisoned.teacher,
                          baseline=baseline, poisoned=poisoned, task_data=task_ds,
                          aux_pool=(aux_ds.x_train, aux_ds.y_train))
    scenarios = [AttackScenario(Exposure(s), spec.attack.query_fraction)
                 for s in spec.attack.scenarios]
    with entropy_audit(spec.audit):
        reports = run_attack_suite(bundle, scenarios, list(spec.attack.seeds))
    csv_path = out_dir / "attack_report.csv"
    reports_to_csv(reports, csv_path)

    from .reporting import render_attack_figure
    fig_path = out_dir / "figures" / "attack_accuracy.png"
    render_attack_figure(reports, fig_path)
    _record_stage(out_dir, spec, "attack", [csv_path, fig_path])
    return reports


# ---------------------------------------------------------------------------
# Report

def _read_csv(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def build_summary(out_dir) -> dict:
    """Assemble the consolidated summary from persisted stage artifacts."""
    out_dir = Path(out_dir)
    manifest = load_manifest(out_dir)
    stages = manifest.get("stages", {})
    missing = [s for s in ("profile", "search", "train", "attack") if s not in stages]
    summary: dict = {
        "tool_version": manifest.get("tool_version", __version__),
        "inputs": manifest.get("inputs", {}),
        "stage_digests": {s: stages[s]["artifacts"] for s in stages},
        "missing_stages": missing,
    }

    if "profile" in stages:
        rows = _read_csv(out_dir / "profile_report.csv")
        diffs = [float(r["oracle_diff_ms"]) for r in rows]
        lower_ok = all(float(r["parallel_ms"]) >= float(r["backbone_sum_ms"]) - 1e-12
                       for r in rows)
        seq_ge = sum(float(r["sequential_baseline_ms"]) >= float(r["parallel_ms"])
                     for r in rows)
        summary["profile"] = {
            "rows": len(rows),
            "max_oracle_diff_ms": max(diffs) if diffs else 0.0,
            "lower_bound_ok": lower_ok,
            "sequential_baseline_wins": f"{seq_ge}/{len(rows)}",
        }

    if "search" in stages:
        rows = _read_csv(out_dir / "front.csv")
        front_rows = [r for r in rows if r["on_front"] == "1"]
        selected = [r for r in rows if r["selected"] == "1"]
        summary["search"] = {
            "evaluations": len(rows),
            "front_size": len(front_rows),
            "selected": ({"accuracy": float(selected[0]["accuracy"]),
                          "latency_ms": float(selected[0]["latency_ms"])}
                         if selected else None),
        }

    if "train" in stages:
        control = _read_csv(out_dir / "curves_baseline.csv")
        poisoned = _read_csv(out_dir / "curves_poisoned.csv")
        summary["train"] = {
            "control_combined_acc": float(control[-1]["combined_acc"]),
            "control_backbone_acc": float(control[-1]["backbone_acc"]),
            "poisoned_combined_acc": float(poisoned[-1]["combined_acc"]),
            "poisoned_backbone_acc": float(poisoned[-1]["backbone_acc"]),
        }

    if "attack" in stages:
        rows = _read_csv(out_dir / "attack_report.csv")
        groups: dict[tuple[str, str], list[float]] = {}
        for r in rows:
            groups.setdefault((r["scenario"], r["target"]), []).append(
                float(r["surrogate_acc"]))
        medians = {f"{s}[{t}]": float(np.median(v)) for (s, t), v in sorted(groups.items())}
        summary["attack"] = {"median_surrogate_acc": medians}

    checks: dict[str, bool | None] = {
        "latency_lower_bound": None, "combined_accuracy_within_3pp": None,
        "attack_ordering": None,
    }
    if "profile" in summary:
        checks["latency_lower_bound"] = bool(summary["profile"]["lower_bound_ok"])
    if "train" in summary:
        t = summary["train"]
        checks["combined_accuracy_within_3pp"] = bool(
            t["poisoned_combined_acc"] >= t["control_combined_acc"] - 0.03)
    if "attack" in summary:
        m = summary["attack"]["median_surrogate_acc"]
        try:
            ordering = (m["PoisonedREE[poisoned]"] < m["BlackBox[poisoned]"]
                        < m["NoShield[teacher]"])
            control_ok = m["PoisonedREE[baseline]"] >= m["BlackBox[poisoned]"]
            checks["attack_ordering"] = bool(ordering and control_ok)
        except KeyError:
            checks["attack_ordering"] = None
    summary["acceptance_checks"] = checks
    return summary


def _summary_text(summary: dict) -> str:
    lines = [f"experiment summary (tool {summary['tool_version']})"]
    for name, digest in sorted(summary.get("inputs", {}).items()):
        lines.append(f"input {name}: {digest}")
    if summary["missing_stages"]:
        lines.append("missing stages: " + ", ".join(summary["missing_stages"]))
    if "profile" in summary:
        p = summary["profile"]
        lines.append(f"[profile] rows={p['rows']} "
                     f"max_oracle_diff_ms={p['max_oracle_diff_ms']:.3e} "
                     f"lower_bound_ok={p['lower_bound_ok']} "
                     f"sequential_baseline_wins={p['sequential_baseline_wins']}")
    if "search" in summary:
        s = summary["search"]
        sel = s["selected"]
        sel_text = (f"accuracy={sel['accuracy']:.4f} latency_ms={sel['latency_ms']:.4f}"
                    if sel else "none")
        lines.append(f"[search] evaluations={s['evaluations']} "
                     f"front_size={s['front_size']} selected: {sel_text}")
    if "train" in summary:
        t = summary["train"]
        lines.append(f"[train] control_combined={t['control_combined_acc']:.4f} "
                     f"poisoned_combined={t['poisoned_combined_acc']:.4f} "
                     f"poisoned_backbone={t['poisoned_backbone_acc']:.4f}")
    if "attack" in summary:
        medians = summary["attack"]["median_surrogate_acc"]
        parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(medians.items()))
        lines.append(f"[attack] {parts}")
    lines.append("[acceptance]")
    for check, result in sorted(summary["acceptance_checks"].items()):
        status = "PASS" if result else ("FAIL" if result is not None else "SKIPPED")
        lines.append(f"  {check}: {status}")
    return "\n".join(lines) + "\n"


def cmd_report(out_dir) -> dict:
    """Merge stage outputs into summary.txt / summary.json (idempotent)."""
    out_dir = Path(out_dir)
    summary = build_summary(out_dir)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (out_dir / "summary.txt").write_text(_summary_text(summary))

    from .reporting import render_overview_figure
    fig_path = out_dir / "figures" / "summary_overview.png"
    render_overview_figure(out_dir, fig_path)
    return summary
