from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from teebranch.autodiff import Tensor, softmax
from teebranch.models import (
    BackboneArch,
    ModelState,
    adapter_forward,
    build_backbone,
    clone_params,
    forward_backbone,
    forward_combined,
    init_subnetwork,
    load_model,
    parameter_count,
    save_model,
)
from teebranch.space import (
    BlockSpec,
    Configuration,
    OpType,
    default_ranges,
    estimate_memory,
    sample_random,
)

INACTIVE = BlockSpec(OpType.INACTIVE, 2, 2, 8, 8)


@pytest.fixture(scope="module")
def backbone6():
    return build_backbone(depth=6, width=8, num_classes=8, seed=3)


def two_block_config() -> Configuration:
    blocks = [INACTIVE] * 6
    blocks[1] = BlockSpec(OpType.SPATIAL_MIXING, 8, 4, 32, 16)
    blocks[3] = BlockSpec(OpType.CHANNEL_MIXING, 4, 8, 16, 32)
    return Configuration(8, 32, tuple(blocks))


class TestBackbone:
    def test_same_seed_identical_parameters(self):
        _, p1 = build_backbone(4, 8, 8, seed=11)
        _, p2 = build_backbone(4, 8, 8, seed=11)
        assert p1.keys() == p2.keys()
        for k in p1:
            np.testing.assert_array_equal(p1[k], p2[k])

    def test_zero_input_zero_head_uniform_softmax(self, backbone6):
        arch, params = backbone6
        params = clone_params(params)
        params["head.w"] = np.zeros_like(params["head.w"])
        params["head.b"] = np.zeros_like(params["head.b"])
        logits = forward_backbone(params, arch, np.zeros((2, 3, 16, 16), dtype=np.float32))
        probs = softmax(logits.data)
        np.testing.assert_allclose(probs, 1.0 / 8.0, atol=1e-6)

    def test_io_dims_match_forward_shapes(self, backbone6):
        arch, params = backbone6
        x = np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32)
        _, feats = forward_backbone(params, arch, x, collect_features=True)
        for dims, feat in zip(arch.io_dims().blocks, feats):
            assert feat.shape == (2, dims.channels, dims.height, dims.width)

    def test_depth_validation(self):
        with pytest.raises(ValueError, match="depth"):
            build_backbone(0, 8, 8, seed=0)


class TestAdapter:
    def test_identity_when_target_equals_source(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 8, 8)).astype(np.float32))
        out = adapter_forward(x, 8)
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_map_stays_constant(self):
        x = Tensor(np.full((1, 2, 8, 8), 3.25, dtype=np.float32))
        out = adapter_forward(x, 4)
        np.testing.assert_allclose(out.data, 3.25, atol=1e-6)

    def test_ramp_4x4_to_2x2_hand_values(self):
        # separable ramp r[i, j] = j over a 4x4 grid; half-pixel-center bilinear
        # downsampling by 2 averages adjacent columns: [0,1,2,3] -> [0.5, 2.5]
        ramp = np.arange(4, dtype=np.float32)[None, :].repeat(4, axis=0)
        x = Tensor(ramp[None, None])
        out = adapter_forward(x, 2).data[0, 0]
        np.testing.assert_allclose(out, [[0.5, 2.5], [0.5, 2.5]], atol=1e-6)
        # transposed ramp moves along rows instead
        y = Tensor(ramp.T[None, None].copy())
        out_t = adapter_forward(y, 2).data[0, 0]
        np.testing.assert_allclose(out_t, [[0.5, 0.5], [2.5, 2.5]], atol=1e-6)

    def test_upsampling_supported(self):
        x = Tensor(np.random.default_rng(2).normal(size=(1, 2, 4, 4)).astype(np.float32))
        assert adapter_forward(x, 8).shape == (1, 2, 8, 8)

    def test_nonpositive_target_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="positive"):
            adapter_forward(x, 0)

    def test_no_learnable_parameters(self, backbone6):
        # a model's parameter count is independent of adapter resolutions
        arch, _ = backbone6
        config_small = two_block_config()
        blocks = list(config_small.blocks)
        blocks[1] = dataclasses.replace(blocks[1], spatial_down=2)
        config_large = dataclasses.replace(config_small, blocks=tuple(blocks))
        s1, c1 = init_subnetwork(config_small, arch.io_dims(), 8, seed=0)
        # spatial_down changes adapter resolution AND mixing input; compare
        # only the adapter-free classifier to show the adapter itself adds nothing
        s2, c2 = init_subnetwork(config_large, arch.io_dims(), 8, seed=0)
        assert parameter_count(c1) == parameter_count(c2)


class TestSubnetwork:
    def test_k_zero_classifier_only(self, backbone6):
        arch, params = backbone6
        config = Configuration(8, 32, (INACTIVE,) * 6)
        subnet, classifier = init_subnetwork(config, arch.io_dims(), 8, seed=0)
        assert subnet == {}
        assert parameter_count(classifier) == 32 * 8 + 8
        # victim output falls back to the backbone head
        x = np.random.default_rng(3).normal(size=(2, 3, 16, 16)).astype(np.float32)
        combined = forward_combined(params, None, None, arch, config, x)
        backbone_only = forward_backbone(params, arch, x)
        np.testing.assert_array_equal(combined.data, backbone_only.data)

    def test_single_block_output_shape_is_up_dims(self, backbone6):
        arch, params = backbone6
        blocks = [INACTIVE] * 6
        blocks[2] = BlockSpec(OpType.CHANNEL_MIXING, 4, 4, 16, 16)
        config = Configuration(4, 16, tuple(blocks))
        subnet, classifier = init_subnetwork(config, arch.io_dims(), 8, seed=1)
        up_w = subnet["block3.up.w"]
        assert up_w.shape[1] == 16 * 4 * 4  # (channel_up, spatial_up, spatial_up) flattened

    def test_parameter_count_matches_memory_model(self, backbone6):
        arch, _ = backbone6
        ranges = default_ranges(6)
        io = arch.io_dims()
        rng = np.random.default_rng(5)
        for _ in range(40):
            config = sample_random(ranges, rng)
            subnet, classifier = init_subnetwork(config, io, 8, seed=0)
            built = parameter_count(subnet) + parameter_count(classifier)
            assert built * 4 == estimate_memory(config, io).parameter_bytes

    def test_perturbation_probes(self, backbone6):
        arch, params = backbone6
        config = two_block_config()
        subnet, classifier = init_subnetwork(config, arch.io_dims(), 8, seed=2)
        x = np.random.default_rng(6).normal(size=(3, 3, 16, 16)).astype(np.float32)
        base = forward_combined(params, subnet, classifier, arch, config, x).data

        perturbed = {k: v.copy() for k, v in subnet.items()}
        perturbed["block2.mix.w"] = perturbed["block2.mix.w"] + 0.5
        changed = forward_combined(params, perturbed, classifier, arch, config, x).data
        assert not np.allclose(changed, base)

        # mutating an inactive block's ignored dims leaves the output unchanged
        blocks = list(config.blocks)
        blocks[0] = dataclasses.replace(blocks[0], spatial_hidden=64, channel_hidden=64)
        mutated = dataclasses.replace(config, blocks=tuple(blocks))
        same = forward_combined(params, subnet, classifier, arch, mutated, x).data
        np.testing.assert_array_equal(same, base)

    def test_zero_classifier_weights_zero_logits(self, backbone6):
        arch, params = backbone6
        config = two_block_config()
        subnet, classifier = init_subnetwork(config, arch.io_dims(), 8, seed=3)
        classifier = {"w": np.zeros_like(classifier["w"]),
                      "b": np.zeros_like(classifier["b"])}
        x = np.random.default_rng(7).normal(size=(2, 3, 16, 16)).astype(np.float32)
        logits = forward_combined(params, subnet, classifier, arch, config, x)
        np.testing.assert_array_equal(logits.data, 0.0)

    def test_batch_row_consistency(self, backbone6):
        arch, params = backbone6
        config = two_block_config()
        subnet, classifier = init_subnetwork(config, arch.io_dims(), 8, seed=4)
        x = np.random.default_rng(8).normal(size=(5, 3, 16, 16)).astype(np.float32)
        batch = forward_combined(params, subnet, classifier, arch, config, x).data
        for i in range(5):
            row = forward_combined(params, subnet, classifier, arch, config,
                                   x[i:i + 1]).data
            np.testing.assert_allclose(batch[i], row[0], atol=1e-5)

    def test_active_config_requires_subnet_params(self, backbone6):
        arch, params = backbone6
        with pytest.raises(ValueError, match="side-branch"):
            forward_combined(params, None, None, arch, two_block_config(),
                             np.zeros((1, 3, 16, 16), dtype=np.float32))


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path, backbone6):
        arch, params = backbone6
        config = two_block_config()
        subnet, classifier = init_subnetwork(config, arch.io_dims(), 8, seed=5)
        model = ModelState(arch=arch, backbone=clone_params(params), config=config,
                           subnet=subnet, tee_classifier=classifier,
                           teacher=clone_params(params), frozen=frozenset({"teacher"}))
        path = tmp_path / "model.ckpt"
        save_model(path, model, seeds={"train": 11}, recipe="textured-patches-v1")
        loaded, header = load_model(path)
        assert loaded.config == config
        assert loaded.frozen == frozenset({"teacher"})
        assert header["seeds"] == {"train": 11}
        for k in params:
            np.testing.assert_array_equal(loaded.backbone[k], params[k])
        for k in subnet:
            np.testing.assert_array_equal(loaded.subnet[k], subnet[k])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTCKPT!" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_forward_identical_after_round_trip(self, tmp_path, backbone6):
        arch, params = backbone6
        config = two_block_config()
        subnet, classifier = init_subnetwork(config, arch.io_dims(), 8, seed=6)
        model = ModelState(arch=arch, backbone=clone_params(params), config=config,
                           subnet=subnet, tee_classifier=classifier)
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        loaded, _ = load_model(path)
        x = np.random.default_rng(9).normal(size=(2, 3, 16, 16)).astype(np.float32)
        a = forward_combined(model.backbone, model.subnet, model.tee_classifier,
                             arch, config, x).data
        b = forward_combined(loaded.backbone, loaded.subnet, loaded.tee_classifier,
                             loaded.arch, loaded.config, x).data
        np.testing.assert_array_equal(a, b)
