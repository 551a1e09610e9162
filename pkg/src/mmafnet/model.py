"""Two-branch encoder, fusion decoder, classifier head, and checkpoint I/O.

The network encodes RGB and depth separately through four residual stages,
then decodes deepest-first: at each level the two modality maps are projected
to a common width, fused (attention fusion, plain summation, or a single
modality), merged with the upsampled previous decoder output, refined by
chained residual pooling, and finally classified per pixel.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor, add
from .errors import ConfigError, ContractError, FormatError
from .fusion import PAIRINGS, AfbParams, afb
from .layers import Conv2d, Identity, Module, make_norm

FUSION_MODES = ("mmaf", "smf", "rgb_only", "depth_only")

CHECKPOINT_MAGIC = b"MMAF1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; everything a checkpoint needs to rebuild."""

    num_classes: int = 3
    widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    decoder_width: int = 8
    reduction: int = 16
    spatial_kernel: int = 7
    units_per_stage: int = 2
    fusion_mode: str = "mmaf"
    pairing: str = "aligned"
    use_batchnorm: bool = True
    mlp_bias: bool = True
    rgb_channels: int = 3
    depth_channels: int = 1
    void_label: int = 255

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be 4 positive integers, got {self.widths}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.pairing not in PAIRINGS:
            raise ConfigError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.decoder_width < 1 or self.units_per_stage < 1:
            raise ConfigError("decoder_width and units_per_stage must be positive")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd, got {self.spatial_kernel}")

    @property
    def uses_rgb(self) -> bool:
        return self.fusion_mode in ("mmaf", "smf", "rgb_only")

    @property
    def uses_depth(self) -> bool:
        return self.fusion_mode in ("mmaf", "smf", "depth_only")


class ResidualUnit(Module):
    """conv-norm-relu-conv-norm plus a skip path, relu on the sum."""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 use_batchnorm: bool, rng: np.random.Generator, dtype=np.float32):
        bias = not use_batchnorm
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1,
                            bias=bias, rng=rng, dtype=dtype)
        self.norm1 = make_norm(out_channels, use_batchnorm, dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, stride=1, padding=1,
                            bias=bias, rng=rng, dtype=dtype)
        self.norm2 = make_norm(out_channels, use_batchnorm, dtype)
        self.skip = None if (in_channels == out_channels and stride == 1) else \
            Conv2d(in_channels, out_channels, 1, stride=stride, bias=bias, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        s = x if self.skip is None else self.skip(x)
        return ops.relu(add(h, s))


class _UnitChain(Module):
    def __init__(self, units: list[Module]):
        self.units = units

    def forward(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


class EncoderBranch(Module):
    """Stem (stride-2 conv + stride-2 pool) and four residual stages.

    Emits one feature map per stage, at 1/4, 1/8, 1/16, 1/32 of the input.
    """

    def __init__(self, in_channels: int, widths: tuple[int, int, int, int],
                 units_per_stage: int, use_batchnorm: bool,
                 rng: np.random.Generator, dtype=np.float32):
        bias = not use_batchnorm
        self.stem_conv = Conv2d(in_channels, widths[0], 3, stride=2, padding=1,
                                bias=bias, rng=rng, dtype=dtype)
        self.stem_norm = make_norm(widths[0], use_batchnorm, dtype)
        stages = []
        prev = widths[0]
        for i, width in enumerate(widths):
            units = []
            for j in range(units_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                units.append(ResidualUnit(prev if j == 0 else width, width, stride,
                                          use_batchnorm, rng, dtype))
            stages.append(_UnitChain(units))
            prev = width
        self.stages = stages

    def forward(self, x: Tensor) -> list[Tensor]:
        x = ops.relu(self.stem_norm(self.stem_conv(x)))
        x = ops.pool2d(x, "max", 3, 2, 1)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class CrpBlock(Module):
    """Four chained (5x5 max pool stride 1, then 1x1 conv) units with a
    running residual sum; zero conv weights make it an exact identity."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32,
                 chain_length: int = 4):
        self.convs = [Conv2d(channels, channels, 1, bias=False, rng=rng, dtype=dtype)
                      for _ in range(chain_length)]

    def forward(self, x: Tensor) -> Tensor:
        acc = x
        h = x
        for conv in self.convs:
            h = conv(ops.pool2d(h, "max", 5, 1, 2))
            acc = add(acc, h)
        return acc


class MrfModule(Module):
    """One decoder level: project, fuse modalities, merge the upsampled
    previous level, refine with chained residual pooling."""

    def __init__(self, rgb_in: int | None, depth_in: int | None, config: ModelConfig,
                 has_prev: bool, rng: np.random.Generator, dtype=np.float32):
        d = config.decoder_width
        self.fusion_mode = config.fusion_mode
        self.pairing = config.pairing
        if rgb_in is not None:
            self.proj_rgb = Conv2d(rgb_in, d, 1, bias=True, rng=rng, dtype=dtype)
        if depth_in is not None:
            self.proj_depth = Conv2d(depth_in, d, 1, bias=True, rng=rng, dtype=dtype)
        if config.fusion_mode == "mmaf":
            self.afb_params = AfbParams(d, reduction=config.reduction,
                                        spatial_kernel=config.spatial_kernel,
                                        mlp_bias=config.mlp_bias, rng=rng, dtype=dtype)
        if has_prev:
            self.prev_conv = Conv2d(d, d, 1, bias=True, rng=rng, dtype=dtype)
        self.crp = CrpBlock(d, rng=rng, dtype=dtype)
        self.out_conv = Conv2d(d, d, 3, padding=1, bias=True, rng=rng, dtype=dtype)

    def forward(self, rgb_feat: Tensor | None, depth_feat: Tensor | None,
                prev: Tensor | None) -> Tensor:
        mode = self.fusion_mode
        if mode == "mmaf":
            fused = afb(self.proj_rgb(rgb_feat), self.proj_depth(depth_feat),
                        self.afb_params, pairing=self.pairing).f_fused
        elif mode == "smf":
            fused = add(self.proj_rgb(rgb_feat), self.proj_depth(depth_feat))
        elif mode == "rgb_only":
            fused = self.proj_rgb(rgb_feat)
        else:
            fused = self.proj_depth(depth_feat)
        if prev is not None:
            h, w = fused.shape[2], fused.shape[3]
            fused = add(fused, self.prev_conv(ops.upsample_bilinear(prev, h, w)))
        x = ops.relu(fused)
        x = self.crp(x)
        return ops.relu(self.out_conv(x))


class MmafNet(Module):
    """Full segmentation network over paired RGB and depth inputs."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.dtype = dtype
        widths = config.widths
        if config.uses_rgb:
            self.rgb_encoder = EncoderBranch(config.rgb_channels, widths,
                                             config.units_per_stage, config.use_batchnorm,
                                             rng, dtype)
        if config.uses_depth:
            self.depth_encoder = EncoderBranch(config.depth_channels, widths,
                                               config.units_per_stage, config.use_batchnorm,
                                               rng, dtype)
        mrf = []
        for i in range(4):
            level = 3 - i  # deepest first
            mrf.append(MrfModule(widths[level] if config.uses_rgb else None,
                                 widths[level] if config.uses_depth else None,
                                 config, has_prev=i > 0, rng=rng, dtype=dtype))
        self.mrf = mrf
        self.classifier = Conv2d(config.decoder_width, config.num_classes, 1,
                                 bias=True, rng=rng, dtype=dtype)

    def _check_input(self, t: Tensor | None, channels: int, name: str) -> None:
        if t is None:
            raise ContractError(f"forward: {name} input required for mode {self.config.fusion_mode!r}")
        n, c, h, w = t.shape
        if c != channels:
            raise ContractError(f"forward: {name} must have {channels} channels, got {c}")
        if h % 32 != 0 or w % 32 != 0 or h < 32 or w < 32:
            raise ContractError(f"forward: spatial size {h}x{w} must be a positive multiple of 32")

    def forward(self, rgb: Tensor | None, depth: Tensor | None) -> Tensor:
        cfg = self.config
        feats_rgb = feats_depth = None
        if cfg.uses_rgb:
            self._check_input(rgb, cfg.rgb_channels, "rgb")
            ref = rgb
        if cfg.uses_depth:
            self._check_input(depth, cfg.depth_channels, "depth")
            ref = depth
        if cfg.uses_rgb and cfg.uses_depth and rgb.shape[2:] != depth.shape[2:]:
            raise ContractError(f"forward: rgb {rgb.shape} and depth {depth.shape} disagree spatially")
        if cfg.uses_rgb:
            feats_rgb = self.rgb_encoder(rgb)
        if cfg.uses_depth:
            feats_depth = self.depth_encoder(depth)
        prev = None
        for i, mrf in enumerate(self.mrf):
            level = 3 - i
            prev = mrf(feats_rgb[level] if feats_rgb else None,
                       feats_depth[level] if feats_depth else None,
                       prev)
        logits = self.classifier(prev)
        return ops.upsample_bilinear(logits, ref.shape[2], ref.shape[3])


def predict(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)


def loss(logits: Tensor, labels: np.ndarray, void_label: int = 255) -> Tensor:
    return ops.cross_entropy_masked(logits, labels, void_label=void_label)


def count_parameters(net: Module) -> list[tuple[str, int]]:
    """Exhaustive (module path, element count) rows in traversal order."""
    return [(path, p.data.size) for path, p in net.named_parameters()]


def parameter_total(net: Module) -> int:
    return sum(size for _, size in count_parameters(net))


def count_flops(net: MmafNet, input_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulate estimate of one forward pass at (n, H, W)."""
    n, h, w = input_shape
    cfg = net.config
    dtype = net.dtype
    rgb = Tensor(np.zeros((n, cfg.rgb_channels, h, w), dtype=dtype)) if cfg.uses_rgb else None
    depth = Tensor(np.zeros((n, cfg.depth_channels, h, w), dtype=dtype)) if cfg.uses_depth else None
    was_training = net.training
    net.eval()
    try:
        with ops.FlopTally() as tally:
            net(rgb, depth)
    finally:
        net.train(was_training)
    return tally.total


# ---------------------------------------------------------------------------
# Checkpoints: magic, JSON header, then (path, shape, float32 LE) entries for
# every parameter and every buffer in deterministic traversal order.
# ---------------------------------------------------------------------------

def _entries(net: MmafNet) -> list[tuple[str, np.ndarray]]:
    rows = [(f"param.{path}", p.data) for path, p in net.named_parameters()]
    rows += [(f"buffer.{path}", b) for path, b in net.named_buffers()]
    return rows


def save_checkpoint(net: MmafNet, path, extra: dict | None = None) -> None:
    header = {
        "config": dataclasses.asdict(net.config),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    rows = _entries(net)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(rows)))
        for name, arr in rows:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("checkpoint truncated")
    return buf


def load_checkpoint(path, dtype=np.float32) -> tuple[MmafNet, dict]:
    """Rebuild a network from a checkpoint; returns (net, extra header dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        net = MmafNet(config, rng=np.random.default_rng(0), dtype=dtype)
        params = {f"param.{p}": t for p, t in net.named_parameters()}
        buffers = {f"buffer.{p}": b for p, b in net.named_buffers()}
        (n_rows,) = struct.unpack("<I", _read_exact(fh, 4))
        seen = set()
        for _ in range(n_rows):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            target = params.get(name)
            if target is not None:
                dest = target.data
            elif name in buffers:
                dest = buffers[name]
            else:
                raise FormatError(f"{path}: unknown entry {name!r}")
            if dest.shape != arr.shape:
                raise FormatError(f"{path}: {name} shape {arr.shape} != expected {dest.shape}")
            dest[...] = arr
            seen.add(name)
        missing = (set(params) | set(buffers)) - seen
        if missing:
            raise FormatError(f"{path}: missing entries {sorted(missing)[:3]}")
    return net, header.get("extra", {})
