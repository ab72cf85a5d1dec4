"""Model substrate: backbone, parameter-free adapters, side-branch blocks.

The backbone is a stack of channel-mixing dense blocks (1x1-conv style)
with tanh and occasional 2x2 average pooling, plus a linear head in the
open world.  Side-branch blocks tap backbone features through bilinear
adapters, pool channels down, mix either spatial positions or channels
through a hidden dim, and up-project with a single linear layer to the
shared aggregate shape, where block outputs are summed and classified by
the enclave-resident linear head.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .space import (
    BackboneDims,
    Configuration,
    FeatureDims,
    OpType,
    block_weight_counts,
    classifier_weight_count,
    configuration_from_dict,
    configuration_to_dict,
)

CHECKPOINT_MAGIC = b"TBCKPT1\n"
CHECKPOINT_VERSION = 1

ParamDict = dict[str, np.ndarray]


@dataclass(frozen=True)
class BackboneArch:
    """Static architecture description of a backbone."""

    depth: int
    widths: tuple[int, ...]
    pool_after: tuple[bool, ...]
    in_channels: int
    image_size: int
    num_classes: int

    def io_dims(self) -> BackboneDims:
        dims = []
        size = self.image_size
        for l in range(self.depth):
            if self.pool_after[l]:
                size //= 2
            dims.append(FeatureDims(self.widths[l], size, size))
        return BackboneDims(tuple(dims), self.num_classes)

    def to_dict(self) -> dict:
        return {"depth": self.depth, "widths": list(self.widths),
                "pool_after": list(self.pool_after), "in_channels": self.in_channels,
                "image_size": self.image_size, "num_classes": self.num_classes}

    @staticmethod
    def from_dict(doc: dict) -> "BackboneArch":
        return BackboneArch(doc["depth"], tuple(doc["widths"]),
                            tuple(bool(p) for p in doc["pool_after"]),
                            doc["in_channels"], doc["image_size"], doc["num_classes"])


@dataclass
class ModelState:
    """Parameter store for one victim: backbone, side branch, enclave head.

    ``frozen`` names parameter groups that must not receive updates; the
    teacher is always treated as frozen regardless.
    """

    arch: BackboneArch
    backbone: ParamDict
    config: Configuration | None = None
    subnet: ParamDict | None = None
    tee_classifier: ParamDict | None = None
    teacher: ParamDict | None = None
    frozen: frozenset[str] = frozenset()

    def group(self, name: str) -> ParamDict:
        value = getattr(self, name)
        if value is None:
            raise KeyError(f"model has no {name!r} parameters")
        return value


def _dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    # fan-in scaling: the up-projections have huge fan-out and would vanish
    # under fan-average scaling
    scale = np.sqrt(1.0 / fan_in)
    return (scale * rng.standard_normal((fan_in, fan_out))).astype(np.float32)


def default_arch(depth: int = 6, width: int = 8, num_classes: int = 8,
                 image_size: int = 16, in_channels: int = 3) -> BackboneArch:
    """Channel widths step up as the resolution pools down (1,2,2,4,4,4 pattern)."""
    mults = [1, 2, 2, 4, 4, 4]
    widths = tuple(width * mults[min(l, len(mults) - 1)] for l in range(depth))
    pool_after = []
    size = image_size
    for l in range(depth):
        do_pool = l % 2 == 1 and size > 4
        if do_pool:
            size //= 2
        pool_after.append(do_pool)
    return BackboneArch(depth, widths, tuple(pool_after), in_channels, image_size, num_classes)


def build_backbone(depth: int, width: int, num_classes: int, seed: int,
                   image_size: int = 16, in_channels: int = 3
                   ) -> tuple[BackboneArch, ParamDict]:
    """Deterministically initialize a backbone (trunk plus its open head)."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    arch = default_arch(depth, width, num_classes, image_size, in_channels)
    rng = np.random.default_rng(seed)
    params: ParamDict = {}
    c_in = in_channels
    for l, c_out in enumerate(arch.widths):
        params[f"trunk.{l}.w"] = _dense_init(rng, c_in, c_out)
        params[f"trunk.{l}.b"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    params["head.w"] = _dense_init(rng, c_in, num_classes)
    params["head.b"] = np.zeros(num_classes, dtype=np.float32)
    return arch, params


# ---------------------------------------------------------------------------
# Parameter-free resampling operators (cached constant matrices)

_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}
_POOL_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _bilinear_1d(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel-center convention."""
    m = np.zeros((n_out, n_in), dtype=np.float32)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def bilinear_matrix(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """(dst_h*dst_w, src_h*src_w) matrix applying separable bilinear resampling."""
    key = (src_hw, dst_hw)
    if key not in _INTERP_CACHE:
        rows = _bilinear_1d(src_hw[0], dst_hw[0])
        cols = _bilinear_1d(src_hw[1], dst_hw[1])
        _INTERP_CACHE[key] = np.kron(rows, cols)
    return _INTERP_CACHE[key]


def channel_pool_matrix(c_in: int, c_out: int) -> np.ndarray:
    """(c_in, c_out) adaptive average-pool weights over the channel axis."""
    key = (c_in, c_out)
    if key not in _POOL_CACHE:
        m = np.zeros((c_in, c_out), dtype=np.float32)
        for i in range(c_out):
            lo = (i * c_in) // c_out
            hi = -(-((i + 1) * c_in) // c_out)  # ceil
            m[lo:hi, i] = 1.0 / (hi - lo)
        _POOL_CACHE[key] = m
    return _POOL_CACHE[key]


def adapter_forward(feature: Tensor, target_resolution: tuple[int, int] | int) -> Tensor:
    """Bilinear-resample a (B, C, H, W) feature map; no learnable parameters.

    Exact identity when the target equals the source resolution.
    """
    if isinstance(target_resolution, int):
        target_resolution = (target_resolution, target_resolution)
    th, tw = target_resolution
    if th <= 0 or tw <= 0:
        raise ValueError("target resolution must be positive")
    b, c, h, w = feature.shape
    if (th, tw) == (h, w):
        return feature
    m = bilinear_matrix((h, w), (th, tw))
    flat = feature.reshape(b, c, h * w)
    out = flat @ Tensor(m.T, dtype=feature.data.dtype)
    return out.reshape(b, c, th, tw)


# ---------------------------------------------------------------------------
# Forward passes

def _as_tensor_params(params: ParamDict, trainable: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}


def forward_backbone(params: dict[str, Tensor] | ParamDict, arch: BackboneArch,
                     x: np.ndarray | Tensor, collect_features: bool = False):
    """Backbone head logits; optionally the per-block feature maps too."""
    t = params[next(iter(params))]
    if not isinstance(t, Tensor):
        params = _as_tensor_params(params, trainable=False)
    h = x if isinstance(x, Tensor) else Tensor(x)
    features = []
    for l in range(arch.depth):
        b, c, hh, ww = h.shape
        flat = h.reshape(b, c, hh * ww).transpose((0, 2, 1))
        mixed = (flat @ params[f"trunk.{l}.w"]) + params[f"trunk.{l}.b"]
        h = mixed.tanh().transpose((0, 2, 1)).reshape(b, arch.widths[l], hh, ww)
        if arch.pool_after[l]:
            b2, c2, h2, w2 = h.shape
            h = h.reshape(b2, c2, h2 // 2, 2, w2 // 2, 2).mean(axis=(3, 5))
        if collect_features:
            features.append(h)
    pooled = h.mean(axis=(2, 3))
    logits = (pooled @ params["head.w"]) + params["head.b"]
    if collect_features:
        return logits, features
    return logits


def init_subnetwork(config: Configuration, io_dims: BackboneDims, num_classes: int,
                    seed: int) -> tuple[ParamDict, ParamDict]:
    """Initialize side-branch block parameters and the enclave classifier.

    The parameter count must agree exactly with the search-space memory
    model; a mismatch is a cross-module contract violation and raises.
    """
    if len(io_dims) != len(config.blocks):
        raise ValueError("io_dims and configuration block counts disagree")
    rng = np.random.default_rng(seed)
    subnet: ParamDict = {}
    up_out = config.channel_up * config.spatial_up * config.spatial_up
    for idx, block in config.active_blocks():
        p_down = block.spatial_down * block.spatial_down
        prefix = f"block{idx}"
        if block.op_type == OpType.SPATIAL_MIXING:
            subnet[f"{prefix}.mix.w"] = _dense_init(rng, p_down, block.spatial_hidden)
            subnet[f"{prefix}.mix.b"] = np.zeros(block.spatial_hidden, dtype=np.float32)
            up_in = block.channel_down * block.spatial_hidden
        else:
            subnet[f"{prefix}.mix.w"] = _dense_init(rng, block.channel_down,
                                                    block.channel_hidden)
            subnet[f"{prefix}.mix.b"] = np.zeros(block.channel_hidden, dtype=np.float32)
            up_in = block.channel_hidden * p_down
        subnet[f"{prefix}.up.w"] = _dense_init(rng, up_in, up_out)
        subnet[f"{prefix}.up.b"] = np.zeros(up_out, dtype=np.float32)
    classifier: ParamDict = {
        "w": _dense_init(rng, config.channel_up, num_classes),
        "b": np.zeros(num_classes, dtype=np.float32),
    }
    built = sum(v.size for v in subnet.values()) + sum(v.size for v in classifier.values())
    expected = classifier_weight_count(config.channel_up, num_classes) + sum(
        block_weight_counts(b, config.spatial_up, config.channel_up)
        for _, b in config.active_blocks())
    if built != expected:
        raise AssertionError(
            f"side-branch parameter count {built} != memory-model weight count {expected}")
    return subnet, classifier


def forward_combined(backbone: dict[str, Tensor] | ParamDict,
                     subnet: dict[str, Tensor] | ParamDict | None,
                     classifier: dict[str, Tensor] | ParamDict | None,
                     arch: BackboneArch, config: Configuration,
                     x: np.ndarray | Tensor) -> Tensor:
    """Full victim forward: backbone taps -> adapters -> blocks -> enclave head.

    With no active block the victim runs as the bare backbone and this
    returns the backbone head logits.
    """
    if config.num_active == 0:
        return forward_backbone(backbone, arch, x)
    if subnet is None or classifier is None:
        raise ValueError("active configuration requires side-branch parameters")
    probe = backbone[next(iter(backbone))]
    if not isinstance(probe, Tensor):
        backbone = _as_tensor_params(backbone, trainable=False)
        subnet = _as_tensor_params(subnet, trainable=False)
        classifier = _as_tensor_params(classifier, trainable=False)
    _, features = forward_backbone(backbone, arch, x, collect_features=True)
    io_dims = arch.io_dims()
    dtype = probe.data.dtype if isinstance(probe, Tensor) else np.float32
    aggregate = None
    up_shape = (config.channel_up, config.spatial_up, config.spatial_up)
    for idx, block in config.active_blocks():
        feat = features[idx - 1]
        s = block.spatial_down
        compressed = adapter_forward(feat, s)                      # (B, C_i, s, s)
        b = compressed.shape[0]
        c_in = io_dims.blocks[idx - 1].channels
        pool = Tensor(channel_pool_matrix(c_in, block.channel_down), dtype=dtype)
        grid = compressed.reshape(b, c_in, s * s).transpose((0, 2, 1))  # (B, P, C_in)
        pooled = grid @ pool                                       # (B, P, C_d)
        prefix = f"block{idx}"
        if block.op_type == OpType.SPATIAL_MIXING:
            by_channel = pooled.transpose((0, 2, 1))               # (B, C_d, P)
            hidden = ((by_channel @ subnet[f"{prefix}.mix.w"])
                      + subnet[f"{prefix}.mix.b"]).tanh()          # (B, C_d, S_h)
            flat = hidden.reshape(b, block.channel_down * block.spatial_hidden)
        else:
            hidden = ((pooled @ subnet[f"{prefix}.mix.w"])
                      + subnet[f"{prefix}.mix.b"]).tanh()          # (B, P, C_h)
            flat = hidden.reshape(b, s * s * block.channel_hidden)
        up = (flat @ subnet[f"{prefix}.up.w"]) + subnet[f"{prefix}.up.b"]
        up = up.reshape(b, *up_shape)
        aggregate = up if aggregate is None else aggregate + up
    pooled_agg = aggregate.mean(axis=(2, 3))                       # (B, C_u)
    return (pooled_agg @ classifier["w"]) + classifier["b"]


def parameter_count(params: ParamDict | None) -> int:
    return 0 if params is None else sum(int(v.size) for v in params.values())


def subnet_parameter_total(model: ModelState) -> int:
    return parameter_count(model.subnet) + parameter_count(model.tee_classifier)


def configuration_digest(config: Configuration) -> str:
    payload = json.dumps(configuration_to_dict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def params_digest(params: ParamDict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].astype("<f4").tobytes())
    return h.hexdigest()


def clone_params(params: ParamDict) -> ParamDict:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# Versioned binary checkpoint container

def save_model(path, model: ModelState, seeds: dict | None = None,
               recipe: str | None = None) -> None:
    """Write a model checkpoint: JSON header + named little-endian f32 arrays."""
    groups = {}
    payload = bytearray()
    for group_name in ("backbone", "subnet", "tee_classifier", "teacher"):
        params = getattr(model, group_name)
        if params is None:
            continue
        entries = []
        for name in sorted(params):
            arr = params[name].astype("<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
            payload.extend(arr.tobytes())
        groups[group_name] = entries
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "config": configuration_to_dict(model.config) if model.config else None,
        "config_digest": configuration_digest(model.config) if model.config else None,
        "recipe": recipe,
        "seeds": seeds or {},
        "frozen": sorted(model.frozen),
        "groups": groups,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_model(path) -> tuple[ModelState, dict]:
    """Read a model checkpoint; returns the state and its raw header."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version")
        payload = fh.read()
    arch = BackboneArch.from_dict(header["arch"])
    loaded: dict[str, ParamDict | None] = {}
    for group_name in ("backbone", "subnet", "tee_classifier", "teacher"):
        entries = header["groups"].get(group_name)
        if entries is None:
            loaded[group_name] = None
            continue
        params: ParamDict = {}
        for entry in entries:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
            params[entry["name"]] = arr.reshape(shape).astype(np.float32)
        loaded[group_name] = params
    config = configuration_from_dict(header["config"]) if header["config"] else None
    model = ModelState(arch=arch, backbone=loaded["backbone"], config=config,
                       subnet=loaded["subnet"], tee_classifier=loaded["tee_classifier"],
                       teacher=loaded["teacher"], frozen=frozenset(header["frozen"]))
    return model, header
