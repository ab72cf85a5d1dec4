"""Two-step model-stealing harness: shadow initialization, query, fine-tune.

Step 1 combines a public pre-trained model with whatever the victim exposes
in the open world; step 2 queries the victim's protected forward path for
hard labels (nothing else crosses the enclave boundary) and fine-tunes the
shadow on them.  Reference points: "no shield" clones the fully fine-tuned
victim outright, "black box" leaks nothing and leaves the attacker with the
public weights plus queries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import softmax_cross_entropy
from .datasets import SyntheticDataset
from .models import (
    BackboneArch,
    ModelState,
    ParamDict,
    clone_params,
    forward_backbone,
    forward_combined,
)
from .training import (
    TrainingDiverged,
    _apply_sgd,
    _collect_grads,
    _wrap,
    clip_gradients,
    evaluate_backbone_accuracy,
    evaluate_combined_accuracy,
)


class Exposure(str, Enum):
    NO_SHIELD = "NoShield"
    BLACK_BOX = "BlackBox"
    POISONED_REE = "PoisonedREE"


@dataclass(frozen=True)
class AttackScenario:
    exposure: Exposure
    query_fraction: float = 0.01
    seed: int = 0
    # which victim the scenario targets; "baseline" is the lambda=0 control
    target: str = "default"

    def __post_init__(self):
        if not 0.0 < self.query_fraction <= 1.0:
            raise ValueError("query_fraction must be in (0, 1]")

    def resolved_target(self) -> str:
        if self.target != "default":
            return self.target
        return {"NoShield": "teacher", "BlackBox": "poisoned",
                "PoisonedREE": "poisoned"}[self.exposure.value]


@dataclass(frozen=True)
class AttackReport:
    scenario: str
    target: str
    seed: int
    query_count: int
    surrogate_accuracy: float
    victim_accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.surrogate_accuracy <= 1.0:
            raise ValueError("surrogate accuracy out of [0,1]")
        if not 0.0 <= self.victim_accuracy <= 1.0:
            raise ValueError("victim accuracy out of [0,1]")


@dataclass(frozen=True)
class VictimBundle:
    """Everything the experiment exposes to the harness.

    ``teacher`` is the fully fine-tuned unprotected reference model,
    ``baseline`` the lambda=0-trained combined victim, ``poisoned`` the
    deployed combined victim.
    """

    arch: BackboneArch
    public_backbone: ParamDict
    teacher: ParamDict
    baseline: ModelState
    poisoned: ModelState
    task_data: SyntheticDataset
    aux_pool: tuple[np.ndarray, np.ndarray]

    def victim_model(self, target: str) -> ModelState:
        if target == "teacher":
            return ModelState(arch=self.arch, backbone=self.teacher)
        if target == "baseline":
            return self.baseline
        if target == "poisoned":
            return self.poisoned
        raise KeyError(f"unknown attack target {target!r}")


SURROGATE_EPOCHS = 20
SURROGATE_LR = 0.2
SURROGATE_BATCH = 16
SURROGATE_CLIP = 5.0


def exposed_ree_params(victim: ModelState) -> ParamDict:
    """Everything the adversary can read: the whole open-world backbone.

    The side branch and enclave classifier never leave the enclave.
    """
    return clone_params(victim.backbone)


def init_shadow(public_backbone: ParamDict, exposed: ParamDict | None,
                scenario: AttackScenario, arch: BackboneArch) -> ParamDict:
    """Step 1: build the shadow model for a scenario.

    NoShield copies the exposed parameters verbatim; BlackBox starts from
    the public weights only; PoisonedREE substitutes the victim's exposed
    open-world parameters into the public model.
    """
    if exposed is not None:
        for name, value in exposed.items():
            if name not in public_backbone or public_backbone[name].shape != value.shape:
                raise ValueError(f"architecture mismatch on exposed parameter {name!r}")
    if scenario.exposure == Exposure.BLACK_BOX:
        return clone_params(public_backbone)
    if exposed is None:
        raise ValueError(f"{scenario.exposure.value} requires exposed victim parameters")
    if scenario.exposure == Exposure.NO_SHIELD:
        return clone_params(exposed)
    shadow = clone_params(public_backbone)
    for name, value in exposed.items():
        shadow[name] = value.copy()
    return shadow


def query_victim(victim: ModelState, inputs: np.ndarray,
                 scenario: AttackScenario) -> tuple[np.ndarray, np.ndarray]:
    """Step 2a: label-only oracle access to the victim's protected path."""
    logits = forward_combined(victim.backbone, victim.subnet, victim.tee_classifier,
                              victim.arch, victim.config, inputs) \
        if victim.config is not None else forward_backbone(victim.backbone, victim.arch, inputs)
    labels = logits.data.argmax(axis=-1).astype(np.int64)
    return inputs, labels


def draw_query_set(bundle: VictimBundle, scenario: AttackScenario
                   ) -> tuple[np.ndarray, int]:
    pool_x, _ = bundle.aux_pool
    query_count = round(scenario.query_fraction * len(bundle.task_data.x_train))
    if query_count > len(pool_x):
        raise ValueError(
            f"query budget {query_count} exceeds auxiliary pool size {len(pool_x)}")
    rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 404]))
    pick = rng.permutation(len(pool_x))[:query_count]
    return pool_x[pick], query_count


def train_surrogate(shadow: ParamDict, queries: tuple[np.ndarray, np.ndarray],
                    arch: BackboneArch, seed: int,
                    epochs: int = SURROGATE_EPOCHS, learning_rate: float = SURROGATE_LR,
                    batch_size: int = SURROGATE_BATCH) -> ParamDict:
    """Step 2b: fine-tune all shadow parameters with CE on hard-labeled queries."""
    qx, qy = queries
    if len(qx) == 0:
        raise ValueError("empty query set")
    params = clone_params(shadow)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 505]))
    for _ in range(epochs):
        order = rng.permutation(len(qx))
        for i in range(0, len(qx), batch_size):
            idx = order[i:i + batch_size]
            tensors = _wrap(params, trainable=True)
            loss = softmax_cross_entropy(forward_backbone(tensors, arch, qx[idx]), qy[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged("non-finite loss in surrogate training")
            loss.backward()
            grads = clip_gradients(_collect_grads({"shadow": tensors}), SURROGATE_CLIP)
            _apply_sgd({"shadow": tensors}, grads, {"shadow": params}, learning_rate)
    return params


def run_attack(bundle: VictimBundle, scenario: AttackScenario) -> AttackReport:
    """One scenario end to end; returns the report row."""
    target = scenario.resolved_target()
    victim = bundle.victim_model(target)
    test_x, test_y = bundle.task_data.x_test, bundle.task_data.y_test
    if victim.config is not None:
        victim_acc = evaluate_combined_accuracy(victim, test_x, test_y)
    else:
        victim_acc = evaluate_backbone_accuracy(victim.backbone, bundle.arch, test_x, test_y)

    exposed = None
    if scenario.exposure != Exposure.BLACK_BOX:
        exposed = exposed_ree_params(victim)
    shadow = init_shadow(bundle.public_backbone, exposed, scenario, bundle.arch)
    _assert_no_enclave_leak(shadow, victim)

    qx, query_count = draw_query_set(bundle, scenario)
    if scenario.exposure == Exposure.NO_SHIELD:
        # all weights exposed: direct copy, no training needed
        surrogate = shadow
    else:
        _, qy = query_victim(victim, qx, scenario)
        surrogate = train_surrogate(shadow, (qx, qy), bundle.arch, scenario.seed)
    surrogate_acc = evaluate_backbone_accuracy(surrogate, bundle.arch, test_x, test_y)
    return AttackReport(scenario.exposure.value, target, scenario.seed, query_count,
                        surrogate_acc, victim_acc)


def _assert_no_enclave_leak(shadow: ParamDict, victim: ModelState) -> None:
    for group in (victim.subnet, victim.tee_classifier):
        if not group:
            continue
        for name, value in group.items():
            if any(value.shape == s.shape and np.array_equal(value, s)
                   for s in shadow.values()):
                raise AssertionError(f"enclave parameter {name!r} leaked into shadow")


def run_attack_suite(bundle: VictimBundle, scenarios: list[AttackScenario],
                     seeds: list[int], include_baseline_control: bool = True
                     ) -> list[AttackReport]:
    """Every scenario x seed, plus the lambda=0 exposed-trunk control."""
    reports = []
    for scenario in scenarios:
        for seed in seeds:
            reports.append(run_attack(
                bundle, AttackScenario(scenario.exposure, scenario.query_fraction,
                                       seed, scenario.target)))
    if include_baseline_control:
        for seed in seeds:
            reports.append(run_attack(bundle, AttackScenario(
                Exposure.POISONED_REE, scenarios[0].query_fraction if scenarios else 0.01,
                seed, target="baseline")))
    return reports


def reports_to_csv(reports: list[AttackReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "target", "seed", "query_count",
                         "surrogate_acc", "victim_acc"])
        for r in reports:
            writer.writerow([r.scenario, r.target, r.seed, r.query_count,
                             f"{r.surrogate_accuracy:.6f}", f"{r.victim_accuracy:.6f}"])


def median_by_scenario(reports: list[AttackReport]) -> dict[tuple[str, str], float]:
    groups: dict[tuple[str, str], list[float]] = {}
    for r in reports:
        groups.setdefault((r.scenario, r.target), []).append(r.surrogate_accuracy)
    return {k: float(np.median(v)) for k, v in groups.items()}
