"""Multi-scale U-Net and a plain U-Net baseline.

Every encoder block of the multi-scale network runs three parallel 3x3
kernel sets on its input: one at full resolution, one with dilation and
stride 2, one with dilation and stride 4. The two downscaled maps are
brought back to the block-input resolution with bilinear interpolation,
concatenated with the full-resolution map, optionally fused by a 3x3 conv,
and max-pooled. The fused (pre-pool) map is the skip connection.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError

CHECKPOINT_MAGIC = b"MSUNET-CKPT-1\n"


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 32
    scales: list[int] = field(default_factory=lambda: [1, 2, 4])
    in_channels: int = 3
    out_classes: int = 2
    fusion_conv: bool = True
    arch: str = "msunet"  # or "unet" for the baseline

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1 or self.out_classes < 2:
            raise ConfigError("in_channels must be >= 1 and out_classes >= 2")
        s = list(self.scales)
        if not s or s[0] != 1:
            raise ConfigError(f"scales must start with 1, got {s}")
        if s != sorted(set(s)):
            raise ConfigError(f"scales must be strictly ascending, got {s}")
        for v in s:
            if v < 1 or v & (v - 1):
                raise ConfigError(f"scale {v} is not a power of two")
        if self.arch not in ("msunet", "unet"):
            raise ConfigError(f"unknown arch {self.arch!r}")

    @property
    def divisor(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** self.depth * max(self.scales)


def _cbr(in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    # padding = dilation keeps out = in / stride for a 3x3 kernel
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class MultiScaleBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, scales=(1, 2, 4), fusion_conv: bool = True):
        super().__init__()
        self.scales = tuple(scales)
        self.branches = nn.ModuleList(_cbr(in_ch, out_ch, stride=s, dilation=s) for s in self.scales)
        self.concat_channels = out_ch * len(self.scales)
        if fusion_conv:
            self.fuse = _cbr(self.concat_channels, out_ch)
            self.out_channels = out_ch
        else:
            self.fuse = nn.Identity()
            self.out_channels = self.concat_channels
        self.pool = nn.MaxPool2d(2)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        maps = []
        for s, branch in zip(self.scales, self.branches):
            y = branch(x)
            if s != 1:
                y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
            maps.append(y)
        return torch.cat(maps, dim=1) if len(maps) > 1 else maps[0]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        skip = self.fuse(self.features(x))
        return skip, self.pool(skip)


class DoubleConvBlock(nn.Module):
    """Baseline encoder block: two 3x3 convs then a 2x2 max-pool."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.convs = nn.Sequential(_cbr(in_ch, out_ch), _cbr(out_ch, out_ch))
        self.out_channels = out_ch
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skip = self.convs(x)
        return skip, self.pool(skip)


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2)
        self.conv = _cbr(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class SegNet(nn.Module):
    """U-Net skeleton shared by the multi-scale model and the baseline.

    ``config.arch`` selects the encoder block type; everything else
    (bottleneck, decoder, head) is identical so the two are directly
    comparable.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_channels * 2**b for b in range(config.depth)]
        blocks = []
        in_ch = config.in_channels
        for w in widths:
            if config.arch == "msunet":
                blk = MultiScaleBlock(in_ch, w, config.scales, config.fusion_conv)
            else:
                blk = DoubleConvBlock(in_ch, w)
            blocks.append(blk)
            in_ch = blk.out_channels
        self.encoder_blocks = nn.ModuleList(blocks)
        bottom = config.base_channels * 2**config.depth
        self.bottleneck = nn.Sequential(_cbr(in_ch, bottom), _cbr(bottom, bottom))
        decoders = []
        in_ch = bottom
        for w, blk in zip(reversed(widths), reversed(blocks)):
            decoders.append(DecoderBlock(in_ch, blk.out_channels, w))
            in_ch = w
        self.decoder_blocks = nn.ModuleList(decoders)
        self.head = nn.Conv2d(in_ch, config.out_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        d = self.config.divisor
        if h % d or w % d:
            raise ValidationError(f"input spatial dims {h}x{w} must be divisible by {d}")
        skips = []
        for blk in self.encoder_blocks:
            skip, x = blk(x)
            skips.append(skip)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoder_blocks, reversed(skips)):
            x = dec(x, skip)
        return self.head(x)


# public alias; the baseline is the same class with arch="unet"
MSUNet = SegNet


def build_model(config: ModelConfig) -> SegNet:
    if config.arch != "msunet":
        config = ModelConfig(**{**asdict(config), "arch": "msunet"})
    return SegNet(config)


def build_baseline_unet(config: ModelConfig) -> SegNet:
    return SegNet(ModelConfig(**{**asdict(config), "arch": "unet"}))


def build_from_config(config: ModelConfig) -> SegNet:
    return SegNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def foreground_probability(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the class axis, channel 1."""
    return torch.softmax(logits, dim=1)[:, 1]


def save_checkpoint(model: SegNet, optimizer_state, epoch: int, path, extra: dict | None = None) -> None:
    payload = {
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "optimizer": optimizer_state,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        return torch.load(io.BytesIO(raw[len(CHECKPOINT_MAGIC):]), map_location="cpu", weights_only=False)
    except Exception as exc:  # truncated or garbled payload
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Return ``(model, optimizer_state, epoch)``.

    With ``expected_config`` the embedded config must match it exactly.
    """
    payload = read_checkpoint(path)
    config = ModelConfig(**payload["config"])
    if expected_config is not None and asdict(expected_config) != asdict(config):
        diff = {
            k: (v, payload["config"][k])
            for k, v in asdict(expected_config).items()
            if payload["config"].get(k) != v
        }
        raise ConfigError(f"checkpoint config mismatch (expected, found): {diff}")
    model = SegNet(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload["optimizer"], payload["epoch"]
