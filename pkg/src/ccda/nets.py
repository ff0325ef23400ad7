"""Encoder, segmentation head and the two-branch discriminator, plus checkpoints."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "ccda-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int = 3
    feature_channels: int = 64
    stride: int = 8
    depth: int = 4
    width: int = 32

    def __post_init__(self):
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of 2, got {self.stride}")
        n_down = int(math.log2(self.stride))
        if self.depth < max(n_down, 1):
            raise ValueError(f"depth {self.depth} cannot reach stride {self.stride}")

    def check_input(self, height: int, width: int) -> None:
        if height % self.stride or width % self.stride:
            raise ValueError(f"input {height}x{width} is not divisible by encoder stride {self.stride}")


@dataclass(frozen=True)
class DiscSpec:
    num_classes: int
    fine_channels: tuple[int, ...] = (64, 128, 256, 512, 1)
    coarse_tail_channels: Optional[tuple[int, ...]] = None  # defaults to (256, 512, 2C)
    shared_prefix_layers: int = 2
    leaky_slope: float = 0.2
    fine_kernel: int = 3
    fine_stride: int = 1
    coarse_kernel: int = 3
    coarse_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "fine_channels", tuple(self.fine_channels))
        tail = self.coarse_tail_channels
        tail = (256, 512, 2 * self.num_classes) if tail is None else tuple(tail)
        object.__setattr__(self, "coarse_tail_channels", tail)
        if self.fine_channels[-1] != 1:
            raise ValueError("last fine channel must be 1")
        if tail[-1] != 2 * self.num_classes:
            raise ValueError(f"last coarse channel must be 2C = {2 * self.num_classes}")
        if self.leaky_slope <= 0:
            raise ValueError("leaky slope must be > 0")
        if not 1 <= self.shared_prefix_layers < len(self.fine_channels):
            raise ValueError("shared prefix must be shorter than the fine branch")

    @property
    def coarse_factor(self) -> int:
        return self.coarse_stride ** len(self.coarse_tail_channels)


def _init_conv(conv: nn.Conv2d, slope: float = 0.0) -> None:
    nn.init.kaiming_normal_(conv.weight, a=slope, nonlinearity="leaky_relu")
    nn.init.zeros_(conv.bias)


class Encoder(nn.Module):
    """Plain conv stack; the first log2(stride) blocks downsample by 2."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        n_down = int(math.log2(spec.stride))
        layers = []
        ch = spec.in_channels
        for i in range(spec.depth):
            out = spec.feature_channels if i == spec.depth - 1 else spec.width * 2 ** min(i, 2)
            conv = nn.Conv2d(ch, out, 3, stride=2 if i < n_down else 1, padding=1)
            _init_conv(conv)
            layers += [conv, nn.ReLU(inplace=True)]
            ch = out
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        self.spec.check_input(*x.shape[-2:])
        return self.body(x)


class SegHead(nn.Module):
    """1x1 conv to class logits, bilinear upsampling, softmax."""

    def __init__(self, feature_channels: int, num_classes: int):
        super().__init__()
        self.classifier = nn.Conv2d(feature_channels, num_classes, 1)
        _init_conv(self.classifier)

    def logits(self, feats, size):
        return F.interpolate(self.classifier(feats), size=size, mode="bilinear", align_corners=False)

    def forward(self, feats, size):
        return torch.softmax(self.logits(feats, size), dim=1)


class SegmentationNet(nn.Module):
    """E followed by S."""

    def __init__(self, encoder_spec: EncoderSpec, num_classes: int):
        super().__init__()
        self.encoder = Encoder(encoder_spec)
        self.head = SegHead(encoder_spec.feature_channels, num_classes)
        self.num_classes = num_classes

    def forward(self, image):
        feats = self.encoder(image)
        return feats, self.head(feats, image.shape[-2:])


class Discriminator(nn.Module):
    """Fine branch (stride-1 convs) and coarse branch (shared prefix + stride-2 tail).

    ``forward`` returns ``(U, O_s, O_t)``: the fine map after sigmoid and
    bilinear upsampling to the image size, and the two halves of the raw
    coarse output.
    """

    def __init__(self, spec: DiscSpec, in_channels: int):
        super().__init__()
        self.spec = spec
        slope = spec.leaky_slope
        pad_f = spec.fine_kernel // 2
        pad_c = spec.coarse_kernel // 2
        fine = []
        ch = in_channels
        for out in spec.fine_channels:
            fine.append(nn.Conv2d(ch, out, spec.fine_kernel, stride=spec.fine_stride, padding=pad_f))
            ch = out
        self.fine = nn.ModuleList(fine)
        coarse = []
        ch = spec.fine_channels[spec.shared_prefix_layers - 1]
        for out in spec.coarse_tail_channels:
            coarse.append(nn.Conv2d(ch, out, spec.coarse_kernel, stride=spec.coarse_stride, padding=pad_c))
            ch = out
        self.coarse = nn.ModuleList(coarse)
        for conv in list(self.fine) + list(self.coarse):
            _init_conv(conv, slope)

    def _act(self, x):
        return F.leaky_relu(x, self.spec.leaky_slope)

    def forward(self, feats, image_size):
        n_shared = self.spec.shared_prefix_layers
        x = feats
        for conv in self.fine[:n_shared]:
            x = self._act(conv(x))
        shared = x
        for i, conv in enumerate(self.fine[n_shared:], start=n_shared):
            x = conv(x)
            if i < len(self.fine) - 1:
                x = self._act(x)
        U = F.interpolate(torch.sigmoid(x), size=image_size, mode="bilinear", align_corners=False)
        y = shared
        for i, conv in enumerate(self.coarse):
            y = conv(y)
            if i < len(self.coarse) - 1:
                y = self._act(y)
        C = self.spec.num_classes
        return U[:, 0], y[:, :C], y[:, C:]

    def zero_output_layers(self) -> None:
        for conv in (self.fine[-1], self.coarse[-1]):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def describe(self) -> list[str]:
        """Layer-by-layer architecture summary, activations included."""
        lines = []
        n_fine = len(self.fine)
        for i, conv in enumerate(self.fine):
            act = f"leaky_relu({self.spec.leaky_slope})" if i < n_fine - 1 else "sigmoid+upsample"
            tag = "shared" if i < self.spec.shared_prefix_layers else "fine"
            lines.append(f"{tag}.{i}: conv{conv.kernel_size[0]}x{conv.kernel_size[1]}/s{conv.stride[0]} "
                         f"{conv.in_channels}->{conv.out_channels} -> {act}")
        for i, conv in enumerate(self.coarse):
            act = f"leaky_relu({self.spec.leaky_slope})" if i < len(self.coarse) - 1 else "none (raw O^s|O^t)"
            lines.append(f"coarse.{i}: conv{conv.kernel_size[0]}x{conv.kernel_size[1]}/s{conv.stride[0]} "
                         f"{conv.in_channels}->{conv.out_channels} -> {act}")
        return lines


def coarse_grid_shape(height: int, width: int, encoder: EncoderSpec, disc: DiscSpec) -> tuple[int, int]:
    rows, cols = height // encoder.stride, width // encoder.stride
    for _ in disc.coarse_tail_channels:
        rows = (rows - 1) // disc.coarse_stride + 1
        cols = (cols - 1) // disc.coarse_stride + 1
    return rows, cols


def patch_size(encoder: EncoderSpec, disc: DiscSpec) -> int:
    """Image pixels per coarse patch side: feature stride times coarse downsampling."""
    return encoder.stride * disc.coarse_factor


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _spec_dict(spec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def save_checkpoint(path: Path | str, seg: SegmentationNet, disc: Discriminator, *,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_classes": seg.num_classes,
        "encoder_spec": _spec_dict(seg.encoder.spec),
        "disc_spec": _spec_dict(disc.spec),
        "seg_state": seg.state_dict(),
        "disc_state": disc.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}: {path}")
    return payload


def build_from_checkpoint(path: Path | str, encoder_spec: Optional[EncoderSpec] = None,
                          disc_spec: Optional[DiscSpec] = None, num_classes: Optional[int] = None):
    """Rebuild (seg, disc, payload); rejects a checkpoint whose specs differ from the expected ones."""
    payload = read_checkpoint(path)
    enc = EncoderSpec(**payload["encoder_spec"])
    dsc = DiscSpec(**payload["disc_spec"])
    C = payload["num_classes"]
    if encoder_spec is not None and enc != encoder_spec:
        raise CheckpointError(f"encoder spec mismatch: checkpoint has {enc}, expected {encoder_spec}")
    if disc_spec is not None and dsc != disc_spec:
        raise CheckpointError(f"discriminator spec mismatch: checkpoint has {dsc}, expected {disc_spec}")
    if num_classes is not None and C != num_classes:
        raise CheckpointError(f"checkpoint has {C} classes, expected {num_classes}")
    seg = SegmentationNet(enc, C)
    disc = Discriminator(dsc, enc.feature_channels)
    seg.load_state_dict(payload["seg_state"])
    disc.load_state_dict(payload["disc_state"])
    return seg, disc, payload
