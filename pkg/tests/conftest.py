from __future__ import annotations

import numpy as np
import pytest

from teebranch.datasets import make_dataset
from teebranch.latency import CostProfile
from teebranch.models import build_backbone, clone_params
from teebranch.space import BackboneDims, FeatureDims, SearchFactorRanges, default_ranges
from teebranch.training import train_backbone


@pytest.fixture
def ranges6() -> SearchFactorRanges:
    return default_ranges(num_blocks=6)


@pytest.fixture
def io_dims6() -> BackboneDims:
    # mirrors the desk-scale backbone: 16x16 input, pooled twice
    return BackboneDims(
        blocks=(
            FeatureDims(8, 16, 16),
            FeatureDims(16, 8, 8),
            FeatureDims(16, 8, 8),
            FeatureDims(32, 4, 4),
            FeatureDims(32, 4, 4),
            FeatureDims(32, 4, 4),
        ),
        num_classes=8,
    )


@pytest.fixture
def profile6() -> CostProfile:
    return CostProfile(
        gpu_block_ms=(2.0, 3.0, 2.5, 4.0, 3.5, 3.0),
        adapter_ms=(0.2, 0.2, 0.3, 0.3, 0.4, 0.4),
        transfer_base_ms=0.5,
        transfer_bandwidth_bytes_per_ms=8192.0,
        tee_cost_coeffs=(2e-6, 0.1),
        classifier_ms=0.05,
    )


def random_profile(rng: np.random.Generator, num_blocks: int) -> CostProfile:
    return CostProfile(
        gpu_block_ms=tuple(rng.uniform(0.1, 5.0, num_blocks)),
        adapter_ms=tuple(rng.uniform(0.0, 1.0, num_blocks)),
        transfer_base_ms=float(rng.uniform(0.0, 1.0)),
        transfer_bandwidth_bytes_per_ms=float(rng.uniform(500.0, 50000.0)),
        tee_cost_coeffs=(float(rng.uniform(0.0, 1e-5)), float(rng.uniform(0.0, 0.5))),
        classifier_ms=float(rng.uniform(0.0, 0.5)),
    )


class ExperimentFixture:
    """Calibrated desk-scale experiment: data, public backbone, teacher."""

    def __init__(self):
        self.pretrain_ds = make_dataset("textured-patches-v1", seed=1001,
                                        n_train=1600, n_val=400, n_test=400)
        self.task_ds = make_dataset("textured-patches-v1", seed=2002,
                                    n_train=1600, n_val=400, n_test=400)
        self.aux_ds = make_dataset("textured-patches-v1", seed=3003,
                                   n_train=1600, n_val=400, n_test=400)
        self.arch, self.public = build_backbone(depth=6, width=8, num_classes=8, seed=7)
        train_backbone(self.arch, self.public, self.pretrain_ds,
                       epochs=8, learning_rate=0.25, batch_size=64, seed=7)
        self.teacher = clone_params(self.public)
        train_backbone(self.arch, self.teacher, self.task_ds,
                       epochs=25, learning_rate=0.25, batch_size=64, seed=8)


@pytest.fixture(scope="session")
def experiment():
    return ExperimentFixture()
