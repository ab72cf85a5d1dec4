from __future__ import annotations

import numpy as np
import pytest

from teebranch.attack import (
    AttackReport,
    AttackScenario,
    Exposure,
    VictimBundle,
    draw_query_set,
    exposed_ree_params,
    init_shadow,
    median_by_scenario,
    query_victim,
    reports_to_csv,
    run_attack,
    run_attack_suite,
    train_surrogate,
)
from teebranch.models import (
    ModelState,
    build_backbone,
    clone_params,
    forward_backbone,
    init_subnetwork,
    params_digest,
)
from teebranch.space import BlockSpec, Configuration, OpType
from teebranch.training import (
    TrainConfig,
    evaluate_backbone_accuracy,
    train_poisoned,
)

INACTIVE = BlockSpec(OpType.INACTIVE, 2, 2, 8, 8)


def branch_config() -> Configuration:
    blocks = [INACTIVE] * 6
    blocks[1] = BlockSpec(OpType.SPATIAL_MIXING, 8, 4, 32, 16)
    blocks[3] = BlockSpec(OpType.CHANNEL_MIXING, 4, 8, 16, 32)
    return Configuration(8, 32, tuple(blocks))


@pytest.fixture(scope="module")
def bundle(experiment) -> VictimBundle:
    config = branch_config()

    def victim(lam: float) -> ModelState:
        model = ModelState(arch=experiment.arch,
                           backbone=clone_params(experiment.teacher),
                           config=config,
                           teacher=clone_params(experiment.teacher))
        tc = TrainConfig(beta=0.5, lambda_=lam, kd_temperature=4.0, learning_rate=0.3,
                         clip_threshold=2.0, epochs=12, batch_size=64, seed=11)
        trained, _ = train_poisoned(config, model, experiment.task_ds, tc)
        return trained

    return VictimBundle(
        arch=experiment.arch,
        public_backbone=clone_params(experiment.public),
        teacher=clone_params(experiment.teacher),
        baseline=victim(0.0),
        poisoned=victim(0.1),
        task_data=experiment.task_ds,
        aux_pool=(experiment.aux_ds.x_train, experiment.aux_ds.y_train),
    )


class TestInitShadow:
    def test_no_shield_copies_verbatim(self, bundle):
        exposed = exposed_ree_params(bundle.victim_model("teacher"))
        shadow = init_shadow(bundle.public_backbone, exposed,
                             AttackScenario(Exposure.NO_SHIELD), bundle.arch)
        assert params_digest(shadow) == params_digest(bundle.teacher)
        x = np.random.default_rng(0).normal(size=(3, 3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(
            forward_backbone(shadow, bundle.arch, x).data,
            forward_backbone(bundle.teacher, bundle.arch, x).data)

    def test_black_box_contains_no_victim_parameters(self, bundle):
        shadow = init_shadow(bundle.public_backbone, None,
                             AttackScenario(Exposure.BLACK_BOX), bundle.arch)
        assert params_digest(shadow) == params_digest(bundle.public_backbone)
        victim = bundle.victim_model("poisoned")
        for name, value in victim.backbone.items():
            assert not np.array_equal(shadow[name], value)

    def test_poisoned_ree_substitutes_exposed_trunk(self, bundle):
        victim = bundle.victim_model("poisoned")
        exposed = exposed_ree_params(victim)
        shadow = init_shadow(bundle.public_backbone, exposed,
                             AttackScenario(Exposure.POISONED_REE), bundle.arch)
        for name in victim.backbone:
            if name.startswith("trunk."):
                np.testing.assert_array_equal(shadow[name], victim.backbone[name])

    def test_architecture_mismatch_rejected(self, bundle):
        exposed = exposed_ree_params(bundle.victim_model("poisoned"))
        exposed["trunk.0.w"] = np.zeros((5, 5), dtype=np.float32)
        with pytest.raises(ValueError, match="architecture mismatch"):
            init_shadow(bundle.public_backbone, exposed,
                        AttackScenario(Exposure.POISONED_REE), bundle.arch)


class TestQueryVictim:
    def test_labels_only_and_deterministic(self, bundle):
        victim = bundle.victim_model("poisoned")
        x = bundle.aux_pool[0][:8]
        _, labels1 = query_victim(victim, x, AttackScenario(Exposure.BLACK_BOX))
        _, labels2 = query_victim(victim, x, AttackScenario(Exposure.BLACK_BOX))
        assert labels1.dtype == np.int64
        np.testing.assert_array_equal(labels1, labels2)

    def test_constant_victim_constant_labels(self, bundle):
        victim = bundle.victim_model("poisoned")
        constant = ModelState(
            arch=victim.arch,
            backbone=victim.backbone,
            config=victim.config,
            subnet=victim.subnet,
            tee_classifier={"w": np.zeros_like(victim.tee_classifier["w"]),
                            "b": np.array([0, 9, 0, 0, 0, 0, 0, 0], dtype=np.float32)},
        )
        _, labels = query_victim(constant, bundle.aux_pool[0][:16],
                                 AttackScenario(Exposure.BLACK_BOX))
        assert np.all(labels == 1)

    def test_query_count_formula(self, bundle):
        scenario = AttackScenario(Exposure.BLACK_BOX, query_fraction=0.01, seed=0)
        _, count = draw_query_set(bundle, scenario)
        assert count == round(0.01 * len(bundle.task_data.x_train))

    def test_pool_exhaustion_rejected(self, bundle):
        small = VictimBundle(
            arch=bundle.arch, public_backbone=bundle.public_backbone,
            teacher=bundle.teacher, baseline=bundle.baseline, poisoned=bundle.poisoned,
            task_data=bundle.task_data,
            aux_pool=(bundle.aux_pool[0][:4], bundle.aux_pool[1][:4]))
        with pytest.raises(ValueError, match="pool"):
            draw_query_set(small, AttackScenario(Exposure.BLACK_BOX, query_fraction=1.0))


class TestTrainSurrogate:
    def test_empty_queries_rejected(self, bundle):
        with pytest.raises(ValueError, match="empty"):
            train_surrogate(bundle.public_backbone,
                            (np.zeros((0, 3, 16, 16), dtype=np.float32),
                             np.zeros(0, dtype=np.int64)),
                            bundle.arch, seed=0)

    def test_black_box_surrogate_above_chance(self, bundle):
        report = run_attack(bundle, AttackScenario(Exposure.BLACK_BOX, seed=0))
        assert report.surrogate_accuracy > 1.0 / 8.0


class TestRunAttack:
    def test_no_shield_equals_victim_backbone_accuracy(self, bundle):
        report = run_attack(bundle, AttackScenario(Exposure.NO_SHIELD, seed=0))
        teacher_acc = evaluate_backbone_accuracy(
            bundle.teacher, bundle.arch, bundle.task_data.x_test, bundle.task_data.y_test)
        assert report.surrogate_accuracy == pytest.approx(teacher_acc)
        assert report.victim_accuracy == pytest.approx(teacher_acc)

    def test_poisoned_below_black_box_median(self, bundle):
        seeds = [0, 1, 2]
        bb = np.median([run_attack(bundle, AttackScenario(Exposure.BLACK_BOX, seed=s))
                        .surrogate_accuracy for s in seeds])
        pr = np.median([run_attack(bundle, AttackScenario(Exposure.POISONED_REE, seed=s))
                        .surrogate_accuracy for s in seeds])
        assert pr < bb

    def test_exposed_baseline_trunk_at_least_black_box(self, bundle):
        seeds = [0, 1, 2]
        bb = np.median([run_attack(bundle, AttackScenario(Exposure.BLACK_BOX, seed=s))
                        .surrogate_accuracy for s in seeds])
        control = np.median([run_attack(
            bundle, AttackScenario(Exposure.POISONED_REE, seed=s, target="baseline"))
            .surrogate_accuracy for s in seeds])
        assert control >= bb


class TestSuite:
    def test_row_count_and_csv(self, bundle, tmp_path):
        scenarios = [AttackScenario(e) for e in
                     (Exposure.NO_SHIELD, Exposure.BLACK_BOX, Exposure.POISONED_REE)]
        reports = run_attack_suite(bundle, scenarios, seeds=[0, 1],
                                   include_baseline_control=True)
        assert len(reports) == 3 * 2 + 2
        path = tmp_path / "attack.csv"
        reports_to_csv(reports, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == len(reports) + 1
        assert lines[0].startswith("scenario,target,seed")
        medians = median_by_scenario(reports)
        assert ("PoisonedREE", "poisoned") in medians
        assert ("PoisonedREE", "baseline") in medians

    def test_enclave_parameters_never_in_shadow(self, bundle):
        victim = bundle.victim_model("poisoned")
        exposed = exposed_ree_params(victim)
        shadow = init_shadow(bundle.public_backbone, exposed,
                             AttackScenario(Exposure.POISONED_REE), bundle.arch)
        for group in (victim.subnet, victim.tee_classifier):
            for name, value in group.items():
                assert not any(value.shape == s.shape and np.array_equal(value, s)
                               for s in shadow.values()), name
