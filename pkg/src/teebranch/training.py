"""Training loops: plain fine-tuning, candidate evaluation, poison training.

The optimizer is deliberately plain minibatch gradient descent with a fixed
learning rate and global-norm gradient clipping: the smallest surface that
the finite-difference gradient oracles can certify end to end.

The joint poisoning objective is

    total = beta * CE(combined(x), y)
          + (1 - beta) * KD(combined(x), teacher(x))
          - lambda * CE(backbone(x), y)

so the enclave-side branch and the backbone train toward combined-model
accuracy while the adversarial third term actively drives the standalone
backbone away from the task.  The teacher is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, distillation_loss, softmax_cross_entropy
from .datasets import SyntheticDataset
from .models import (
    BackboneArch,
    ModelState,
    ParamDict,
    forward_backbone,
    forward_combined,
    init_subnetwork,
)
from .space import Configuration


class TrainingDiverged(RuntimeError):
    """Loss was non-finite for several consecutive steps."""

    def __init__(self, message: str, curves: "TrainingCurves | None" = None):
        super().__init__(message)
        self.curves = curves


_DIVERGENCE_PATIENCE = 3


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.5
    lambda_: float = 0.5
    kd_temperature: float = 4.0
    learning_rate: float = 0.2
    clip_threshold: float = 2.0
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0,1]")
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be > 0")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")


@dataclass
class TrainingCurves:
    """Per-epoch history; the component identity kd/ce/adv -> total is exact."""

    epochs: list[int] = field(default_factory=list)
    combined_acc: list[float] = field(default_factory=list)
    backbone_acc: list[float] = field(default_factory=list)
    ce: list[float] = field(default_factory=list)
    kd: list[float] = field(default_factory=list)
    adv_ce: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {"epoch": e, "combined_acc": ca, "backbone_acc": ba,
             "ce": ce, "kd": kd, "adv_ce": adv, "total": tot}
            for e, ca, ba, ce, kd, adv, tot in zip(
                self.epochs, self.combined_acc, self.backbone_acc,
                self.ce, self.kd, self.adv_ce, self.total)
        ]


def clip_gradients(gradients: dict[str, np.ndarray], threshold: float
                   ) -> dict[str, np.ndarray]:
    """Scale the whole gradient set so its global L2 norm is <= threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    sq = sum(float(np.sum(g.astype(np.float64) ** 2)) for g in gradients.values())
    norm = np.sqrt(sq)
    if norm <= threshold:
        return gradients
    # shaved slightly so float32 rounding cannot push the post-norm over
    scale = (threshold / norm) * (1.0 - 4e-7)
    return {k: g * g.dtype.type(scale) for k, g in gradients.items()}


def _wrap(params: ParamDict, trainable: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}


def _collect_grads(groups: dict[str, dict[str, Tensor]]) -> dict[str, np.ndarray]:
    grads = {}
    for gname, tensors in groups.items():
        for pname, t in tensors.items():
            grads[f"{gname}/{pname}"] = t.grad if t.grad is not None \
                else np.zeros_like(t.data)
    return grads


def _apply_sgd(groups: dict[str, dict[str, Tensor]], grads: dict[str, np.ndarray],
               params_by_group: dict[str, ParamDict], lr: float) -> None:
    for gname, tensors in groups.items():
        for pname in tensors:
            params_by_group[gname][pname] -= lr * grads[f"{gname}/{pname}"]


def evaluate_backbone_accuracy(params: ParamDict, arch: BackboneArch,
                               x: np.ndarray, y: np.ndarray, batch: int = 512) -> float:
    correct = 0
    for i in range(0, len(x), batch):
        logits = forward_backbone(params, arch, x[i:i + batch])
        correct += int((logits.data.argmax(axis=-1) == y[i:i + batch]).sum())
    return correct / len(x)


def evaluate_combined_accuracy(model: ModelState, x: np.ndarray, y: np.ndarray,
                               batch: int = 512) -> float:
    correct = 0
    for i in range(0, len(x), batch):
        logits = forward_combined(model.backbone, model.subnet, model.tee_classifier,
                                  model.arch, model.config, x[i:i + batch])
        correct += int((logits.data.argmax(axis=-1) == y[i:i + batch]).sum())
    return correct / len(x)


def total_poison_loss(backbone_t: dict[str, Tensor], subnet_t: dict[str, Tensor] | None,
                      classifier_t: dict[str, Tensor] | None, teacher: ParamDict,
                      arch: BackboneArch, config: Configuration,
                      x: np.ndarray, y: np.ndarray, tc: TrainConfig
                      ) -> tuple[Tensor, float, float, float]:
    """Composite loss tensor plus its unweighted (ce, kd, adv_ce) components.

    Gradients flow into the side branch, the enclave classifier, and the
    backbone; the teacher contributes constants only.
    """
    combined_logits = forward_combined(backbone_t, subnet_t, classifier_t,
                                       arch, config, x)
    backbone_logits = forward_backbone(backbone_t, arch, x)
    teacher_logits = forward_backbone(teacher, arch, x).data

    ce = softmax_cross_entropy(combined_logits, y)
    kd = distillation_loss(combined_logits, teacher_logits, tc.kd_temperature)
    adv = softmax_cross_entropy(backbone_logits, y)
    total = (tc.beta * ce) + ((1.0 - tc.beta) * kd) + (-tc.lambda_ * adv)
    return total, float(ce.data), float(kd.data), float(adv.data)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_backbone(arch: BackboneArch, params: ParamDict, dataset: SyntheticDataset,
                   epochs: int, learning_rate: float, batch_size: int, seed: int,
                   clip_threshold: float = 5.0) -> ParamDict:
    """Plain CE fine-tuning of a full backbone (trunk + head), in place."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    x, y = dataset.x_train, dataset.y_train
    for _ in range(epochs):
        for idx in _epoch_batches(len(x), batch_size, rng):
            tensors = _wrap(params, trainable=True)
            loss = softmax_cross_entropy(forward_backbone(tensors, arch, x[idx]), y[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged("non-finite loss in backbone training")
            loss.backward()
            grads = clip_gradients(_collect_grads({"backbone": tensors}), clip_threshold)
            _apply_sgd({"backbone": tensors}, grads, {"backbone": params}, learning_rate)
    return params


def train_candidate(config: Configuration, frozen_backbone: tuple[BackboneArch, ParamDict],
                    dataset: SyntheticDataset, seed: int,
                    learning_rate: float = 0.3, batch_size: int = 64,
                    epochs: int = 1, subset_fraction: float = 1.0,
                    clip_threshold: float = 5.0) -> float:
    """Search-phase candidate evaluation: branch-only training, frozen trunk.

    Trains the side branch and enclave classifier with plain CE for a small
    epoch budget on (a subset of) the train split and returns validation
    accuracy.  With no active block there is nothing to train and the
    backbone head's validation accuracy is returned.
    """
    arch, backbone = frozen_backbone
    if not 0.0 < subset_fraction <= 1.0:
        raise ValueError("subset_fraction must be in (0, 1]")
    if config.num_active == 0:
        return evaluate_backbone_accuracy(backbone, arch,
                                          dataset.x_val, dataset.y_val)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    subnet, classifier = init_subnetwork(config, arch.io_dims(), arch.num_classes,
                                         seed=int(rng.integers(2 ** 31)))
    x, y = dataset.x_train, dataset.y_train
    if subset_fraction < 1.0:
        take = max(int(len(x) * subset_fraction), batch_size)
        pick = rng.permutation(len(x))[:take]
        x, y = x[pick], y[pick]
    backbone_snapshot = {k: v.copy() for k, v in backbone.items()}
    backbone_t = _wrap(backbone, trainable=False)
    for _ in range(epochs):
        for idx in _epoch_batches(len(x), batch_size, rng):
            subnet_t = _wrap(subnet, trainable=True)
            classifier_t = _wrap(classifier, trainable=True)
            logits = forward_combined(backbone_t, subnet_t, classifier_t,
                                      arch, config, x[idx])
            loss = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged("non-finite loss in candidate training")
            loss.backward()
            groups = {"subnet": subnet_t, "tee_classifier": classifier_t}
            grads = clip_gradients(_collect_grads(groups), clip_threshold)
            _apply_sgd(groups, grads,
                       {"subnet": subnet, "tee_classifier": classifier}, learning_rate)
    for k, v in backbone.items():  # frozen-group contract
        if not np.array_equal(v, backbone_snapshot[k]):
            raise AssertionError("frozen backbone changed during candidate training")
    model = ModelState(arch=arch, backbone=backbone, config=config, subnet=subnet,
                       tee_classifier=classifier)
    return evaluate_combined_accuracy(model, dataset.x_val, dataset.y_val)


def train_poisoned(config: Configuration, model: ModelState, dataset: SyntheticDataset,
                   tc: TrainConfig) -> tuple[ModelState, TrainingCurves]:
    """Joint poison training of the combined model against a frozen teacher.

    Requires the teacher parameters on the model state.  Records per-epoch
    validation accuracies and mean loss components; aborts with the partial
    curves if the loss is non-finite for 3 consecutive steps.
    """
    if model.teacher is None:
        raise ValueError("poison training requires a trained teacher on the model state")
    if model.config != config:
        model = replace(model, config=config)
    if config.num_active > 0 and model.subnet is None:
        subnet, classifier = init_subnetwork(config, model.arch.io_dims(),
                                             model.arch.num_classes, seed=tc.seed)
        model = replace(model, subnet=subnet, tee_classifier=classifier)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 303]))
    x, y = dataset.x_train, dataset.y_train
    curves = TrainingCurves()
    teacher_snapshot = {k: v.copy() for k, v in model.teacher.items()}

    trainable = {"backbone": "backbone" not in model.frozen,
                 "subnet": model.subnet is not None and "subnet" not in model.frozen,
                 "tee_classifier": model.tee_classifier is not None
                                   and "tee_classifier" not in model.frozen}
    bad_steps = 0
    for epoch in range(tc.epochs):
        sums = np.zeros(4)
        batches = 0
        for idx in _epoch_batches(len(x), tc.batch_size, rng):
            groups: dict[str, dict[str, Tensor]] = {}
            backbone_t = _wrap(model.backbone, trainable["backbone"])
            if trainable["backbone"]:
                groups["backbone"] = backbone_t
            subnet_t = classifier_t = None
            if model.subnet is not None:
                subnet_t = _wrap(model.subnet, trainable["subnet"])
                classifier_t = _wrap(model.tee_classifier, trainable["tee_classifier"])
                if trainable["subnet"]:
                    groups["subnet"] = subnet_t
                if trainable["tee_classifier"]:
                    groups["tee_classifier"] = classifier_t
            total, ce, kd, adv = total_poison_loss(
                backbone_t, subnet_t, classifier_t, model.teacher,
                model.arch, config, x[idx], y[idx], tc)
            if not np.isfinite(total.data):
                bad_steps += 1
                if bad_steps >= _DIVERGENCE_PATIENCE:
                    raise TrainingDiverged(
                        f"loss non-finite for {bad_steps} consecutive steps", curves)
                continue
            bad_steps = 0
            total.backward()
            grads = clip_gradients(_collect_grads(groups), tc.clip_threshold)
            params_by_group = {"backbone": model.backbone, "subnet": model.subnet,
                               "tee_classifier": model.tee_classifier}
            _apply_sgd(groups, grads, params_by_group, tc.learning_rate)
            # recombine in float64 so the curve identity is exact
            recorded_total = tc.beta * ce + (1.0 - tc.beta) * kd - tc.lambda_ * adv
            sums += (recorded_total, ce, kd, adv)
            batches += 1
        mean_total, mean_ce, mean_kd, mean_adv = sums / max(batches, 1)
        curves.epochs.append(epoch)
        curves.combined_acc.append(
            evaluate_combined_accuracy(model, dataset.x_val, dataset.y_val))
        curves.backbone_acc.append(
            evaluate_backbone_accuracy(model.backbone, model.arch,
                                       dataset.x_val, dataset.y_val))
        curves.ce.append(mean_ce)
        curves.kd.append(mean_kd)
        curves.adv_ce.append(mean_adv)
        curves.total.append(mean_total)

    for k, v in model.teacher.items():  # the teacher never moves
        if not np.array_equal(v, teacher_snapshot[k]):
            raise AssertionError("teacher parameters changed during poison training")
    return model, curves
