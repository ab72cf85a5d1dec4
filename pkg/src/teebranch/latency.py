"""Parallel TEE/REE inference latency: closed form, schedule oracle, baseline.

The REE GPU runs the backbone while the TEE CPU runs the side-branch.  At
each transfer point the GPU-side adapter output is shipped over the link and
consumed by one side-branch block; a handshake means the next transfer waits
for both the GPU to reach the next tap and the CPU to finish the previous
block.  The closed form sums the pre-transfer GPU prefix and one max term
per synchronization interval; ``simulate_schedule`` replays the same
semantics event by event and must agree to 1e-9 ms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
import yaml

from .space import (
    BackboneDims,
    BlockSpec,
    Configuration,
    OpType,
    SearchFactorRanges,
    require_valid,
    BYTES_PER_ELEMENT,
)

PROFILE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CostProfile:
    """Calibrated per-block cost parameters (synthetic or measured).

    ``tee_cost_coeffs`` is (milliseconds per multiply-accumulate, fixed
    per-block overhead in ms) for the side-branch block cost model.
    """

    gpu_block_ms: tuple[float, ...]
    adapter_ms: tuple[float, ...]
    transfer_base_ms: float
    transfer_bandwidth_bytes_per_ms: float
    tee_cost_coeffs: tuple[float, float]
    classifier_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gpu_block_ms", tuple(float(v) for v in self.gpu_block_ms))
        object.__setattr__(self, "adapter_ms", tuple(float(v) for v in self.adapter_ms))
        object.__setattr__(self, "tee_cost_coeffs",
                           (float(self.tee_cost_coeffs[0]), float(self.tee_cost_coeffs[1])))
        if len(self.adapter_ms) != len(self.gpu_block_ms):
            raise ValueError("adapter_ms and gpu_block_ms must have equal length")
        if any(v < 0 for v in self.gpu_block_ms + self.adapter_ms):
            raise ValueError("block and adapter durations must be >= 0")
        if self.transfer_base_ms < 0 or any(c < 0 for c in self.tee_cost_coeffs):
            raise ValueError("cost parameters must be >= 0")
        if self.classifier_ms < 0:
            raise ValueError("classifier_ms must be >= 0")
        if self.transfer_bandwidth_bytes_per_ms <= 0:
            raise ValueError("transfer bandwidth must be > 0")

    @property
    def num_blocks(self) -> int:
        return len(self.gpu_block_ms)

    @property
    def backbone_total_ms(self) -> float:
        return sum(self.gpu_block_ms)


@dataclass(frozen=True)
class ScheduleEvent:
    resource: str  # GPU | LINK | CPU
    label: str
    start: float
    end: float


@dataclass(frozen=True)
class ScheduleTrace:
    events: tuple[ScheduleEvent, ...]

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def by_resource(self, resource: str) -> tuple[ScheduleEvent, ...]:
        return tuple(e for e in self.events if e.resource == resource)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["resource", "label", "start_ms", "end_ms"])
            for e in self.events:
                writer.writerow([e.resource, e.label, f"{e.start:.9f}", f"{e.end:.9f}"])


def block_mac_count(block: BlockSpec, spatial_up: int, channel_up: int) -> int:
    """Dense multiply-accumulates of one active block; pooling is free.

    Mirrors the bottleneck weight layout: the mixing layer applied across
    the pooled grid plus the single linear up-projection.
    """
    if not block.active:
        raise ValueError("inactive block has no TEE cost")
    p_down = block.spatial_down * block.spatial_down
    up_out = channel_up * spatial_up * spatial_up
    if block.op_type == OpType.SPATIAL_MIXING:
        mixing = block.channel_down * p_down * block.spatial_hidden
        up_in = block.channel_down * block.spatial_hidden
    else:
        mixing = p_down * block.channel_down * block.channel_hidden
        up_in = block.channel_hidden * p_down
    return mixing + up_in * up_out


def tee_block_cost(block: BlockSpec, globals_: tuple[int, int], profile: CostProfile) -> float:
    """c_C: CPU time of one side-branch block, ms."""
    spatial_up, channel_up = globals_
    coeff_mac, overhead = profile.tee_cost_coeffs
    return coeff_mac * block_mac_count(block, spatial_up, channel_up) + overhead


def transfer_payload_bytes(block: BlockSpec, io_dims: BackboneDims, block_index: int) -> int:
    """Bytes shipped for one transfer: the adapter output at the tap point.

    The adapter interpolates the backbone feature down to the block's
    spatial_down resolution and preserves channels.
    """
    channels = io_dims.blocks[block_index - 1].channels
    return BYTES_PER_ELEMENT * channels * block.spatial_down * block.spatial_down


def transfer_cost(block_index: int, config: Configuration, io_dims: BackboneDims,
                  profile: CostProfile) -> float:
    """c_T: link time for the transfer feeding the block at 1-based block_index."""
    block = config.blocks[block_index - 1]
    if not block.active:
        raise ValueError(f"block {block_index} is inactive; no transfer occurs")
    payload = transfer_payload_bytes(block, io_dims, block_index)
    return profile.transfer_base_ms + payload / profile.transfer_bandwidth_bytes_per_ms


def _interval_terms(config: Configuration, profile: CostProfile,
                    io_dims: BackboneDims) -> tuple[float, list[tuple[float, float, float]]]:
    """Prefix GPU time and, per interval k, (c_T_k, c_C_k, gpu segment time)."""
    gpu = profile.gpu_block_ms
    taps = config.transfer_indices()
    globals_ = (config.spatial_up, config.channel_up)
    prefix = sum(gpu[:taps[0]]) + profile.adapter_ms[taps[0] - 1]
    terms = []
    for k, p_k in enumerate(taps):
        block = config.blocks[p_k - 1]
        c_t = transfer_cost(p_k, config, io_dims, profile)
        c_c = tee_block_cost(block, globals_, profile)
        if k + 1 < len(taps):
            p_next = taps[k + 1]
            seg = sum(gpu[p_k:p_next]) + profile.adapter_ms[p_next - 1]
        else:
            seg = sum(gpu[p_k:])
        terms.append((c_t, c_c, seg))
    return prefix, terms


def parallel_latency(config: Configuration, profile: CostProfile,
                     io_dims: BackboneDims, ranges: SearchFactorRanges | None = None) -> float:
    """Closed-form parallel latency g(a), ms.

    With no active block the model runs as the bare backbone and g(a) is
    exactly the GPU block sum.  Otherwise each synchronization interval
    contributes max(link + CPU block, GPU segment + next adapter), and the
    TEE classifier runs after the final handshake.
    """
    if ranges is not None:
        require_valid(config, ranges)
    if len(io_dims) != profile.num_blocks or len(config.blocks) != profile.num_blocks:
        raise ValueError("configuration, io_dims, and profile block counts disagree")
    if config.num_active == 0:
        return profile.backbone_total_ms
    prefix, terms = _interval_terms(config, profile, io_dims)
    total = prefix
    for c_t, c_c, seg in terms:
        total += max(c_t + c_c, seg)
    return total + profile.classifier_ms


def simulate_schedule(config: Configuration, profile: CostProfile,
                      io_dims: BackboneDims,
                      ranges: SearchFactorRanges | None = None) -> ScheduleTrace:
    """Discrete-event oracle for ``parallel_latency``.

    Three resources.  Execution is lock-step per handshake interval: at each
    boundary the GPU has produced the next adapter output and the CPU has
    drained the previous transfer, and only then do the next transfer and
    the next GPU segment begin.  Within an interval the transfer occupies
    LINK and then its side-branch block occupies CPU, while the GPU runs its
    segment (backbone blocks plus the next tap's adapter) in parallel.  The
    trailing classifier runs on the CPU after the final interval.
    """
    if ranges is not None:
        require_valid(config, ranges)
    if len(io_dims) != profile.num_blocks or len(config.blocks) != profile.num_blocks:
        raise ValueError("configuration, io_dims, and profile block counts disagree")
    gpu = profile.gpu_block_ms
    taps = config.transfer_indices()
    globals_ = (config.spatial_up, config.channel_up)
    events: list[ScheduleEvent] = []

    def run_gpu_span(start: float, first: int, last: int, adapter_at: int | None) -> float:
        """Emit GPU events for backbone blocks first..last plus an optional adapter."""
        t = start
        for l in range(first, last + 1):
            events.append(ScheduleEvent("GPU", f"backbone[{l}]", t, t + gpu[l - 1]))
            t += gpu[l - 1]
        if adapter_at is not None:
            a = profile.adapter_ms[adapter_at - 1]
            events.append(ScheduleEvent("GPU", f"adapter[{adapter_at}]", t, t + a))
            t += a
        return t

    if not taps:
        run_gpu_span(0.0, 1, profile.num_blocks, None)
        return ScheduleTrace(tuple(events))

    t = run_gpu_span(0.0, 1, taps[0], taps[0])
    for k, p_k in enumerate(taps, start=1):
        block = config.blocks[p_k - 1]
        c_t = transfer_cost(p_k, config, io_dims, profile)
        c_c = tee_block_cost(block, globals_, profile)
        events.append(ScheduleEvent("LINK", f"transfer[{k}]@{p_k}", t, t + c_t))
        events.append(ScheduleEvent("CPU", f"branch[{k}]@{p_k}", t + c_t, t + c_t + c_c))
        if k < len(taps):
            p_next = taps[k]
            gpu_end = run_gpu_span(t, p_k + 1, p_next, p_next)
        else:
            gpu_end = run_gpu_span(t, p_k + 1, profile.num_blocks, None)
        # handshake barrier: both sides must finish before the next interval
        t = max(t + c_t + c_c, gpu_end)
    if profile.classifier_ms > 0:
        events.append(ScheduleEvent("CPU", "classifier", t, t + profile.classifier_ms))
    return ScheduleTrace(tuple(events))


def sequential_baseline_latency(split_layer: int, profile: CostProfile,
                                cpu_slowdown: float = 8.0,
                                transfer_payload: int = 0) -> float:
    """Latency of a sequential split: GPU prefix, one transfer, TEE suffix.

    Blocks 1..split_layer run on the GPU, the rest in the TEE at
    ``cpu_slowdown`` times their GPU cost, strictly one after the other.
    The transfer is charged only for interior splits.
    """
    if not 0 <= split_layer <= profile.num_blocks:
        raise ValueError(f"split_layer must be in [0, {profile.num_blocks}]")
    if cpu_slowdown <= 0:
        raise ValueError("cpu_slowdown must be > 0")
    gpu_part = sum(profile.gpu_block_ms[:split_layer])
    tee_part = cpu_slowdown * sum(profile.gpu_block_ms[split_layer:])
    transfer = 0.0
    if 0 < split_layer < profile.num_blocks:
        transfer = (profile.transfer_base_ms
                    + transfer_payload / profile.transfer_bandwidth_bytes_per_ms)
    return gpu_part + transfer + tee_part


def worst_case_latency_bound(profile: CostProfile, ranges: SearchFactorRanges,
                             io_dims: BackboneDims) -> float:
    """A latency value no valid configuration can reach; hypervolume ceiling.

    Doubles the backbone time and adds every adapter plus a worst-case
    transfer + block cost at each tap, plus the classifier, so it strictly
    dominates any achievable g(a).
    """
    coeff_mac, overhead = profile.tee_cost_coeffs
    worst_block = BlockSpec(
        OpType.CHANNEL_MIXING, max(ranges.sd_choices), max(ranges.cd_choices),
        max(ranges.sh_choices), max(ranges.ch_choices))
    worst_spatial = BlockSpec(
        OpType.SPATIAL_MIXING, max(ranges.sd_choices), max(ranges.cd_choices),
        max(ranges.sh_choices), max(ranges.ch_choices))
    globals_ = (max(ranges.su_choices), max(ranges.cu_choices))
    worst_cc = max(tee_block_cost(worst_block, globals_, profile),
                   tee_block_cost(worst_spatial, globals_, profile))
    max_channels = max(d.channels for d in io_dims.blocks)
    worst_payload = BYTES_PER_ELEMENT * max_channels * max(ranges.sd_choices) ** 2
    worst_ct = profile.transfer_base_ms + worst_payload / profile.transfer_bandwidth_bytes_per_ms
    per_block = worst_ct + worst_cc
    return (2.0 * profile.backbone_total_ms + sum(profile.adapter_ms)
            + profile.num_blocks * per_block + profile.classifier_ms)


# ---------------------------------------------------------------------------
# Versioned text serialization

def profile_to_dict(profile: CostProfile) -> dict:
    return {
        "version": PROFILE_SCHEMA_VERSION,
        "kind": "cost-profile",
        "gpu_block_ms": list(profile.gpu_block_ms),
        "adapter_ms": list(profile.adapter_ms),
        "transfer_base_ms": profile.transfer_base_ms,
        "transfer_bandwidth_bytes_per_ms": profile.transfer_bandwidth_bytes_per_ms,
        "tee_cost_coeffs": list(profile.tee_cost_coeffs),
        "classifier_ms": profile.classifier_ms,
    }


def save_profile(profile: CostProfile, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(profile_to_dict(profile), fh, sort_keys=False)


def load_profile(path) -> CostProfile:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or doc.get("version") != PROFILE_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported cost-profile version {doc.get('version')!r}")
    try:
        coeffs = doc["tee_cost_coeffs"]
        return CostProfile(
            gpu_block_ms=tuple(doc["gpu_block_ms"]),
            adapter_ms=tuple(doc["adapter_ms"]),
            transfer_base_ms=float(doc["transfer_base_ms"]),
            transfer_bandwidth_bytes_per_ms=float(doc["transfer_bandwidth_bytes_per_ms"]),
            tee_cost_coeffs=(coeffs[0], coeffs[1]),
            classifier_ms=float(doc.get("classifier_ms", 0.0)),
        )
    except (KeyError, IndexError, TypeError) as exc:
        raise ValueError(f"{path}: malformed cost profile field: {exc}") from exc
