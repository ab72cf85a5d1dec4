"""Search space for TEE-resident side-branch configurations.

A configuration is two global up-sampling dims (spatial side length and
channel count shared by every block so block outputs can be summed) plus
five per-block factors: an operation type and the down-projection / hidden
dims of the block's bottleneck.  This module owns validation, a [0,1]^D
encoding for surrogate models, seeded sampling, and the secure-memory
footprint used by the search constraint.  No weights live here.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np
import yaml

BYTES_PER_ELEMENT = 4  # single-precision deployment default

RANGES_SCHEMA_VERSION = 1
CONFIG_SCHEMA_VERSION = 1


class OpType(IntEnum):
    INACTIVE = 0
    SPATIAL_MIXING = 1
    CHANNEL_MIXING = 2


def _check_choices(name: str, values: Sequence[int]) -> tuple[int, ...]:
    vals = tuple(int(v) for v in values)
    if not vals:
        raise ValueError(f"{name}: choice list is empty")
    if any(v <= 0 for v in vals):
        raise ValueError(f"{name}: choices must be positive integers")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{name}: choices must be strictly increasing")
    return vals


@dataclass(frozen=True)
class SearchFactorRanges:
    """Admissible values for every searched factor, plus the block count."""

    su_choices: tuple[int, ...]
    cu_choices: tuple[int, ...]
    type_choices: tuple[int, ...]
    sd_choices: tuple[int, ...]
    cd_choices: tuple[int, ...]
    sh_choices: tuple[int, ...]
    ch_choices: tuple[int, ...]
    num_blocks: int

    def __post_init__(self):
        for name in ("su_choices", "cu_choices", "sd_choices", "cd_choices",
                     "sh_choices", "ch_choices"):
            object.__setattr__(self, name, _check_choices(name, getattr(self, name)))
        types = tuple(int(t) for t in self.type_choices)
        if not types or any(b <= a for a, b in zip(types, types[1:])):
            raise ValueError("type_choices must be non-empty and strictly increasing")
        if not set(types) <= {0, 1, 2}:
            raise ValueError("type_choices must be a subset of {0, 1, 2}")
        object.__setattr__(self, "type_choices", types)
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")

    @property
    def dimension(self) -> int:
        """Length of the [0,1]^D encoding: 2 globals + 5 factors per block."""
        return 2 + 5 * self.num_blocks

    def block_factor_lists(self) -> tuple[tuple[int, ...], ...]:
        """Per-block choice lists in encoding order."""
        return (self.type_choices, self.sd_choices, self.cd_choices,
                self.sh_choices, self.ch_choices)


def default_ranges(num_blocks: int = 6) -> SearchFactorRanges:
    """Desk-scale default ranges (> 10^6 configurations at 6 blocks)."""
    return SearchFactorRanges(
        su_choices=(4, 8, 16),
        cu_choices=(16, 32, 64),
        type_choices=(0, 1, 2),
        sd_choices=(2, 4, 8),
        cd_choices=(2, 4, 8),
        sh_choices=(8, 16, 32, 64),
        ch_choices=(8, 16, 32, 64),
        num_blocks=num_blocks,
    )


@dataclass(frozen=True)
class BlockSpec:
    """One side-branch block: an op type and its bottleneck dims.

    Dim fields of inactive blocks are ignored by every consumer (memory,
    latency, model building); they are still kept inside the choice lists so
    the encoding stays injective.
    """

    op_type: OpType
    spatial_down: int
    channel_down: int
    spatial_hidden: int
    channel_hidden: int

    @property
    def active(self) -> bool:
        return self.op_type != OpType.INACTIVE

    def factors(self) -> tuple[int, int, int, int, int]:
        return (int(self.op_type), self.spatial_down, self.channel_down,
                self.spatial_hidden, self.channel_hidden)


@dataclass(frozen=True)
class Configuration:
    """A full side-branch description: globals plus one BlockSpec per backbone block."""

    spatial_up: int
    channel_up: int
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def num_active(self) -> int:
        """K: number of active blocks (= number of transfer points)."""
        return sum(1 for b in self.blocks if b.active)

    def transfer_indices(self) -> tuple[int, ...]:
        """1-based backbone block indices p_1 < ... < p_K feeding active blocks."""
        return tuple(i + 1 for i, b in enumerate(self.blocks) if b.active)

    def active_blocks(self) -> tuple[tuple[int, BlockSpec], ...]:
        """(1-based backbone index, block) pairs for the active blocks."""
        return tuple((i + 1, b) for i, b in enumerate(self.blocks) if b.active)


@dataclass(frozen=True)
class MemoryFootprint:
    parameter_bytes: int
    peak_activation_bytes: int

    @property
    def total(self) -> int:
        return self.parameter_bytes + self.peak_activation_bytes


@dataclass(frozen=True)
class FeatureDims:
    """Shape of one backbone block's output feature map."""

    channels: int
    height: int
    width: int

    @property
    def elements(self) -> int:
        return self.channels * self.height * self.width


@dataclass(frozen=True)
class BackboneDims:
    """Per-block backbone feature dims plus the task's class count."""

    blocks: tuple[FeatureDims, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def __len__(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    violation: str | None = None

    def __bool__(self) -> bool:
        return self.ok


_OK = ValidationResult(True, None)


def validate(config: Configuration, ranges: SearchFactorRanges) -> ValidationResult:
    """Check a configuration against its factor ranges.

    Returns the first violated constraint's identity instead of raising.
    Dim fields are required to be list members for inactive blocks too:
    consumers ignore them, but the encoding must be able to index them.
    """
    if config.spatial_up not in ranges.su_choices:
        return ValidationResult(False, "spatial_up")
    if config.channel_up not in ranges.cu_choices:
        return ValidationResult(False, "channel_up")
    if len(config.blocks) != ranges.num_blocks:
        return ValidationResult(False, "block_count")
    names = ("op_type", "spatial_down", "channel_down", "spatial_hidden", "channel_hidden")
    lists = ranges.block_factor_lists()
    for k, block in enumerate(config.blocks):
        for name, choices, value in zip(names, lists, block.factors()):
            if value not in choices:
                return ValidationResult(False, f"blocks[{k}].{name}")
    return _OK


def require_valid(config: Configuration, ranges: SearchFactorRanges) -> None:
    verdict = validate(config, ranges)
    if not verdict:
        raise ValueError(f"invalid configuration: {verdict.violation}")


def _encode_factor(value: int, choices: tuple[int, ...]) -> float:
    if len(choices) == 1:
        return 0.0
    return choices.index(value) / (len(choices) - 1)


def _decode_factor(x: float, choices: tuple[int, ...]) -> int:
    if len(choices) == 1:
        return choices[0]
    # round half up, clamped to the list bounds
    idx = int(np.floor(x * (len(choices) - 1) + 0.5))
    return choices[min(max(idx, 0), len(choices) - 1)]


def encode(config: Configuration, ranges: SearchFactorRanges) -> np.ndarray:
    """Map a valid configuration to [0,1]^D, one coordinate per factor.

    Coordinate i is the factor's index within its choice list divided by
    (list length - 1); single-choice lists map to 0.0.  Injective over the
    valid domain.
    """
    require_valid(config, ranges)
    coords = [_encode_factor(config.spatial_up, ranges.su_choices),
              _encode_factor(config.channel_up, ranges.cu_choices)]
    lists = ranges.block_factor_lists()
    for block in config.blocks:
        coords.extend(_encode_factor(v, c) for v, c in zip(block.factors(), lists))
    return np.asarray(coords, dtype=float)


def decode(x: np.ndarray, ranges: SearchFactorRanges) -> Configuration:
    """Snap a real vector to the nearest valid configuration."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != ranges.dimension:
        raise ValueError(f"expected vector of length {ranges.dimension}, got {x.shape[0]}")
    spatial_up = _decode_factor(x[0], ranges.su_choices)
    channel_up = _decode_factor(x[1], ranges.cu_choices)
    lists = ranges.block_factor_lists()
    blocks = []
    for k in range(ranges.num_blocks):
        vals = [_decode_factor(x[2 + 5 * k + j], lists[j]) for j in range(5)]
        blocks.append(BlockSpec(OpType(vals[0]), *vals[1:]))
    return Configuration(spatial_up, channel_up, tuple(blocks))


def sample_random(ranges: SearchFactorRanges, seed) -> Configuration:
    """Draw each factor independently and uniformly from its choice list.

    ``seed`` may be an int, a SeedSequence, or a Generator; a fixed seed
    gives a fixed configuration.
    """
    rng = np.random.default_rng(seed)
    pick = lambda choices: choices[int(rng.integers(len(choices)))]
    blocks = []
    for _ in range(ranges.num_blocks):
        blocks.append(BlockSpec(
            OpType(pick(ranges.type_choices)),
            pick(ranges.sd_choices),
            pick(ranges.cd_choices),
            pick(ranges.sh_choices),
            pick(ranges.ch_choices),
        ))
    return Configuration(pick(ranges.su_choices), pick(ranges.cu_choices), tuple(blocks))


def block_weight_counts(block: BlockSpec, spatial_up: int, channel_up: int) -> int:
    """Parameter count of one active block (weights + biases).

    The bottleneck is: parameter-free average-pool down-projection, a mixing
    layer over the pooled grid, and one linear up-projection to the shared
    (channel_up, spatial_up, spatial_up) aggregate:

    * spatial mixing maps the S_d^2 pooled positions to spatial_hidden per
      channel (weights shared across channels);
    * channel mixing maps the channel_down channels to channel_hidden per
      position (weights shared across positions).
    """
    if not block.active:
        return 0
    p_down = block.spatial_down * block.spatial_down
    up_out = channel_up * spatial_up * spatial_up
    if block.op_type == OpType.SPATIAL_MIXING:
        mixing = p_down * block.spatial_hidden + block.spatial_hidden
        up_in = block.channel_down * block.spatial_hidden
    else:
        mixing = block.channel_down * block.channel_hidden + block.channel_hidden
        up_in = block.channel_hidden * p_down
    up = up_in * up_out + up_out
    return mixing + up


def classifier_weight_count(channel_up: int, num_classes: int) -> int:
    """TEE classifier over the pooled aggregate: linear channel_up -> classes."""
    return channel_up * num_classes + num_classes


def block_activation_elements(block: BlockSpec, spatial_up: int, channel_up: int,
                              input_channels: int) -> int:
    """Input + hidden + output element counts held while one block runs."""
    p_down = block.spatial_down * block.spatial_down
    received = input_channels * p_down
    if block.op_type == OpType.SPATIAL_MIXING:
        hidden = block.channel_down * block.spatial_hidden
    else:
        hidden = block.channel_hidden * p_down
    output = channel_up * spatial_up * spatial_up
    return received + hidden + output


def estimate_memory(config: Configuration, io_dims: BackboneDims) -> MemoryFootprint:
    """Secure-memory footprint of a configuration, in bytes.

    Parameters are the active blocks' mixing and up-projection weights plus
    the TEE classifier; peak activation is the largest per-block working set
    (received input + hidden + output elements).  4 bytes per element.
    """
    if len(io_dims) != len(config.blocks):
        raise ValueError(
            f"io_dims has {len(io_dims)} blocks, configuration has {len(config.blocks)}")
    params = classifier_weight_count(config.channel_up, io_dims.num_classes)
    peak = 0
    for idx, block in config.active_blocks():
        params += block_weight_counts(block, config.spatial_up, config.channel_up)
        peak = max(peak, block_activation_elements(
            block, config.spatial_up, config.channel_up, io_dims.blocks[idx - 1].channels))
    return MemoryFootprint(BYTES_PER_ELEMENT * params, BYTES_PER_ELEMENT * peak)


# ---------------------------------------------------------------------------
# Versioned text serialization (YAML key-value documents)

def _ranges_to_dict(ranges: SearchFactorRanges) -> dict:
    return {
        "version": RANGES_SCHEMA_VERSION,
        "kind": "search-factor-ranges",
        "su_choices": list(ranges.su_choices),
        "cu_choices": list(ranges.cu_choices),
        "type_choices": list(ranges.type_choices),
        "sd_choices": list(ranges.sd_choices),
        "cd_choices": list(ranges.cd_choices),
        "sh_choices": list(ranges.sh_choices),
        "ch_choices": list(ranges.ch_choices),
        "num_blocks": ranges.num_blocks,
    }


def save_ranges(ranges: SearchFactorRanges, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(_ranges_to_dict(ranges), fh, sort_keys=False)


def load_ranges(path) -> SearchFactorRanges:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or doc.get("version") != RANGES_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported ranges document version {doc.get('version')!r}")
    return SearchFactorRanges(
        su_choices=tuple(doc["su_choices"]),
        cu_choices=tuple(doc["cu_choices"]),
        type_choices=tuple(doc["type_choices"]),
        sd_choices=tuple(doc["sd_choices"]),
        cd_choices=tuple(doc["cd_choices"]),
        sh_choices=tuple(doc["sh_choices"]),
        ch_choices=tuple(doc["ch_choices"]),
        num_blocks=int(doc["num_blocks"]),
    )


def configuration_to_dict(config: Configuration) -> dict:
    return {
        "version": CONFIG_SCHEMA_VERSION,
        "kind": "side-branch-configuration",
        "spatial_up": config.spatial_up,
        "channel_up": config.channel_up,
        "blocks": [
            {
                "op_type": int(b.op_type),
                "spatial_down": b.spatial_down,
                "channel_down": b.channel_down,
                "spatial_hidden": b.spatial_hidden,
                "channel_hidden": b.channel_hidden,
            }
            for b in config.blocks
        ],
    }


def configuration_from_dict(doc: dict) -> Configuration:
    if doc.get("version") != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"unsupported configuration document version {doc.get('version')!r}")
    blocks = tuple(
        BlockSpec(OpType(b["op_type"]), b["spatial_down"], b["channel_down"],
                  b["spatial_hidden"], b["channel_hidden"])
        for b in doc["blocks"]
    )
    return Configuration(doc["spatial_up"], doc["channel_up"], blocks)


def save_configuration(config: Configuration, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(configuration_to_dict(config), fh, sort_keys=False)


def load_configuration(path) -> Configuration:
    with open(path) as fh:
        return configuration_from_dict(yaml.safe_load(fh))
