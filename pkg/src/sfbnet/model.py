"""The segmentation network: gated-skip U-Net with a bottleneck transformer.

Encoder levels hold two convolutional blocks each, decoder levels one;
a block is two rounds of 3x3 conv -> batch norm -> gelu. Three strided
convolutions take the map down to 1/8 resolution, where a conventional
transformer layer runs (or, for the "no_trans" variant, one extra conv
block). Decoder levels upsample with 2x2 transposed convolutions, gate
the same-resolution encoder map through a SwinFilterBlock (unless
"no_sfb"), concatenate, and reduce. Every decoder level feeds a 1x1 conv
head, so the forward pass returns logits at full, half and quarter
resolution.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import time

import numpy as np

from .attention import BottleneckTransformer
from .engine import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Module,
    ModuleList,
    Tensor,
    flops,
    no_grad,
    ops,
)
from .errors import ConfigError, DataError, DimensionError
from .sfb import SwinFilterBlock

CHECKPOINT_MAGIC = b"SFBN"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class ModelConfig:
    """Everything needed to build the network deterministically."""

    input_hw: tuple = (224, 224)
    classes: int = 4
    base_channels: int = 64
    max_channels: int = 512
    downsamples: int = 3
    window: int = 7
    sfb_heads: tuple = (2, 4, 8)
    bottleneck_heads: int = 16
    use_sfb: bool = True
    use_bottleneck_transformer: bool = True
    sw_self_attention: bool = False
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.sfb_heads = tuple(int(v) for v in self.sfb_heads)
        factor = 2 ** self.downsamples
        h, w = self.input_hw
        if h % factor or w % factor:
            raise ConfigError(
                f"input size {h}x{w} must be divisible by {factor} "
                f"({self.downsamples} downsamplings)"
            )
        if len(self.sfb_heads) != self.downsamples:
            raise ConfigError(
                f"need one head count per skip level "
                f"({self.downsamples}), got {self.sfb_heads}"
            )
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.base_channels < 1 or self.classes < 2:
            raise ConfigError("base_channels must be >= 1 and classes >= 2")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def level_channels(self, level: int) -> int:
        return min(self.base_channels * (2 ** level), self.max_channels)

    @property
    def bottleneck_hw(self) -> tuple:
        f = 2 ** self.downsamples
        return (self.input_hw[0] // f, self.input_hw[1] // f)

    def variant(self, name: str) -> "ModelConfig":
        """Named ablation: 'full', 'no_sfb' or 'no_trans'."""
        if name == "full":
            return dataclasses.replace(self)
        if name == "no_sfb":
            return dataclasses.replace(self, use_sfb=False)
        if name == "no_trans":
            return dataclasses.replace(self, use_bottleneck_transformer=False)
        raise ConfigError(f"unknown variant {name!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["sfb_heads"] = list(self.sfb_heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclasses.dataclass
class CostReport:
    variant: str
    parameters: int
    gflops: float
    images_per_s: float
    batch_size: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ConvBlock(Module):
    """Two rounds of 3x3 conv -> batch norm -> gelu."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1, dtype=dtype)
        self.norm1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1, dtype=dtype)
        self.norm2 = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x, training, update_stats=True):
        x = ops.gelu(self.norm1(self.conv1(x), training, update_stats))
        x = ops.gelu(self.norm2(self.conv2(x), training, update_stats))
        return x


class DownSample(Module):
    """Strided 3x3 conv halving the resolution (no pooling anywhere)."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1, dtype=dtype)
        self.norm = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x, training, update_stats=True):
        return ops.gelu(self.norm(self.conv(x), training, update_stats))


class SFBNet(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        levels = config.downsamples  # skip levels 0..levels-1, bottleneck below

        self.enc_levels = ModuleList()
        self.downs = ModuleList()
        c_prev = 1
        for lvl in range(levels + 1):
            c = config.level_channels(lvl)
            if lvl > 0:
                self.downs.append(DownSample(c_prev, c, rng, dtype))
                c_prev = c
            level = ModuleList([
                ConvBlock(c_prev, c, rng, dtype),
                ConvBlock(c, c, rng, dtype),
            ])
            self.enc_levels.append(level)
            c_prev = c

        c_bottom = config.level_channels(levels)
        th, tw = config.bottleneck_hw
        if config.use_bottleneck_transformer:
            self.bottleneck = BottleneckTransformer(
                c_bottom, th * tw, config.bottleneck_heads, rng, dtype=dtype)
        else:
            self.bottleneck = ConvBlock(c_bottom, c_bottom, rng, dtype)

        self.ups = ModuleList()
        self.sfbs = ModuleList()
        self.dec_blocks = ModuleList()
        self.heads = ModuleList()
        for lvl in reversed(range(levels)):
            c_skip = config.level_channels(lvl)
            c_in = config.level_channels(lvl + 1)
            self.ups.append(ConvTranspose2d(c_in, c_skip, 2, rng, stride=2, dtype=dtype))
            if config.use_sfb:
                self.sfbs.append(SwinFilterBlock(
                    c_skip, config.sfb_heads[lvl], config.window, rng,
                    dtype=dtype, sw_self_attention=config.sw_self_attention))
            self.dec_blocks.append(ConvBlock(2 * c_skip, c_skip, rng, dtype))
            self.heads.append(Conv2d(c_skip, config.classes, 1, rng, dtype=dtype))

        self.assign_parameter_names()

    def forward(self, image, training: bool = False, update_stats: bool | None = None,
                force_gate_one: bool = False):
        """Run the network; returns logits at full, half and quarter size."""
        if update_stats is None:
            update_stats = training
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.config.dtype))
        n, c, h, w = x.shape
        if c != 1 or (h, w) != self.config.input_hw:
            raise DimensionError(
                f"model built for 1x{self.config.input_hw[0]}x{self.config.input_hw[1]} "
                f"images, got {c}x{h}x{w}"
            )

        skips = []
        for lvl, level in enumerate(self.enc_levels):
            if lvl > 0:
                x = self.downs[lvl - 1](x, training, update_stats)
            for block in level:
                x = block(x, training, update_stats)
            if lvl < len(self.enc_levels) - 1:
                skips.append(x)

        if self.config.use_bottleneck_transformer:
            x = self.bottleneck(x)
        else:
            x = self.bottleneck(x, training, update_stats)

        outputs = []
        for i, up in enumerate(self.ups):
            lvl = self.config.downsamples - 1 - i
            x = up(x)
            skip = skips[lvl]
            if self.config.use_sfb and not force_gate_one:
                skip = self.sfbs[i](skip, x, training, update_stats)
            x = ops.concat([x, skip], axis=1)
            x = self.dec_blocks[i](x, training, update_stats)
            outputs.append(self.heads[i](x))

        outputs.reverse()  # full, half, quarter
        return tuple(outputs)

    __call__ = forward


def build_model(config: ModelConfig) -> SFBNet:
    return SFBNet(config)


def count_parameters(model: SFBNet) -> int:
    """Exact element count over the learnable parameter registry."""
    return sum(p.data.size for p in model.parameters())


def count_flops(model: SFBNet, batch: int = 1) -> float:
    """Analytic forward FLOPs (1 multiply-accumulate = 2 FLOPs).

    Runs one forward pass at the configured input size with the op-level
    tally active; batch statistics are used for normalization so a fresh
    model can be measured, and no state is mutated.
    """
    h, w = model.config.input_hw
    image = np.zeros((batch, 1, h, w), dtype=model.config.dtype)
    with no_grad(), flops.tally() as t:
        model.forward(image, training=True, update_stats=False)
    return float(t.flops)


def _estimate_bytes_per_image(model: SFBNet) -> int:
    h, w = model.config.input_hw
    image = np.zeros((1, 1, h, w), dtype=model.config.dtype)
    with no_grad(), flops.tally() as t:
        model.forward(image, training=True, update_stats=False)
    # bytes_moved tracks op outputs only; patch-gather buffers in the
    # convolutions are about 9x their input, so keep a generous margin.
    return max(1, 3 * t.bytes_moved)


def measure_throughput(model: SFBNet, repeats: int = 100,
                       memory_budget_bytes: int = 2 << 30,
                       batch: int | None = None, warmup: int = 1) -> tuple:
    """Mean images/s over warm forward passes at the largest batch that
    fits the memory budget (or an explicit ``batch``). Returns
    (images_per_s, batch)."""
    if batch is None:
        per_image = _estimate_bytes_per_image(model)
        batch = int(max(1, min(64, memory_budget_bytes // per_image)))
    h, w = model.config.input_hw
    images = np.zeros((batch, 1, h, w), dtype=model.config.dtype)
    with no_grad():
        for _ in range(warmup):
            model.forward(images, training=True, update_stats=False)
        start = time.perf_counter()
        for _ in range(repeats):
            model.forward(images, training=True, update_stats=False)
        elapsed = time.perf_counter() - start
    return (repeats * batch) / elapsed, batch


def cost_report(config: ModelConfig, variant: str, repeats: int = 100,
                throughput_batch: int | None = None) -> CostReport:
    model = build_model(config.variant(variant))
    params = count_parameters(model)
    gflops = count_flops(model, batch=1) / 1e9
    ips, batch = measure_throughput(model, repeats=repeats, batch=throughput_batch)
    return CostReport(variant, params, gflops, ips, batch)


# ---------------------------------------------------------------------------
# checkpoint format: magic "SFBN", version u32, manifest, float32 blobs
# ---------------------------------------------------------------------------


def _state_entries(model: SFBNet):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield name, b


def save_checkpoint(model: SFBNet, path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in _state_entries(model):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({
        "config": model.config.to_dict(),
        "tensors": entries,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple:
    """Returns (config_dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        manifest_len = struct.unpack("<I", fh.read(4))[0]
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        data = fh.read()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape)
    return manifest["config"], tensors


def load_checkpoint(model: SFBNet, path) -> None:
    """Load weights into ``model``; names and shapes must match exactly."""
    _, tensors = read_checkpoint(path)
    own = dict(_state_entries(model))
    if set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        raise ConfigError(
            f"checkpoint does not match model: missing={missing[:5]} extra={extra[:5]}"
        )
    for name, arr in tensors.items():
        target = own[name]
        if tuple(target.shape) != tuple(arr.shape):
            raise ConfigError(
                f"checkpoint tensor {name} has shape {arr.shape}, model expects "
                f"{tuple(target.shape)}"
            )
        target[...] = arr.astype(target.dtype)
