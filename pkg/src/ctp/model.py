"""Encoder contract, a small reference 3D encoder, and the trajectory head.

The head turns spatial-temporal features plus a first-frame query box
into a full predicted trajectory: squeeze the time axis to one slice,
pool the features inside the query box to a fixed grid, and run a
two-layer MLP that emits T x 4 regression targets. Targets decode
against the query box exactly as in :func:`ctp.geometry.decode_box`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import Box, Sigmas, DEFAULT_SIGMAS

__all__ = [
    "EncoderSpec",
    "HeadSpec",
    "PixelNorm",
    "TinyVideoEncoder",
    "TrajectoryHead",
    "CtpModel",
    "pool_region",
    "pool_regions",
    "decode_targets",
    "boxes_to_tensor",
    "tensor_to_boxes",
]

# Bilinear sample points per pooling cell, per axis. Fixed rather than
# configurable: the pooling oracle and gradient checks pin this value.
POOL_SAMPLES_PER_CELL = 2


@dataclass(frozen=True)
class EncoderSpec:
    """Shape contract of a video encoder.

    spatial_stride 8 keeps the last stage at full resolution for finer
    localization during pretraining; 16 is the standard configuration
    used when transferring to downstream tasks.
    """

    input_T: int = 8
    input_H: int = 64
    input_W: int = 64
    spatial_stride: int = 8
    temporal_stride: int = 2
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    variant: str = "full3d"  # "full3d" | "factorized"

    def __post_init__(self) -> None:
        if self.spatial_stride not in (8, 16):
            raise ValueError(f"spatial_stride must be 8 or 16, got {self.spatial_stride}")
        if self.temporal_stride not in (1, 2, 4):
            raise ValueError(f"temporal_stride must be 1, 2, or 4, got {self.temporal_stride}")
        if self.variant not in ("full3d", "factorized"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.input_T % self.temporal_stride:
            raise ValueError(f"input_T={self.input_T} not divisible by temporal stride")
        if self.input_H % self.spatial_stride or self.input_W % self.spatial_stride:
            raise ValueError("input_H/input_W must be divisible by the spatial stride")

    @property
    def channels(self) -> int:
        return self.stage_channels[-1]

    def feature_shape(self) -> tuple[int, int, int, int]:
        """(T', H', W', C) of the encoder output."""
        return (
            self.input_T // self.temporal_stride,
            self.input_H // self.spatial_stride,
            self.input_W // self.spatial_stride,
            self.channels,
        )


@dataclass(frozen=True)
class HeadSpec:
    """Shape and capacity of the trajectory prediction head."""

    pool_size: int = 5
    hidden: int = 512
    out_T: int = 8
    squeeze_enabled: bool = True

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.out_T < 1:
            raise ValueError(f"out_T must be >= 1, got {self.out_T}")


@dataclass(frozen=True)
class PixelNorm:
    """Per-channel normalization applied to uint8 frames scaled to [0, 1].

    Stored in every checkpoint so transfer evaluation reuses the exact
    pretraining normalization.
    """

    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self) -> None:
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std components must be positive, got {self.std}")


def boxes_to_tensor(boxes: Sequence[Box], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def tensor_to_boxes(t: torch.Tensor) -> list[Box]:
    if t.ndim != 2 or t.shape[-1] != 4:
        raise ValueError(f"expected (T, 4) tensor, got {tuple(t.shape)}")
    return [Box(*(float(v) for v in row)) for row in t]


def normalize_frames(frames: np.ndarray, norm: PixelNorm = PixelNorm(), dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 (..., T, H, W, 3) -> normalized (..., 3, T, H, W) tensor."""
    if frames.dtype != np.uint8 or frames.shape[-1] != 3:
        raise ValueError(f"expected uint8 frames with 3 channels, got {frames.dtype} {frames.shape}")
    x = torch.from_numpy(np.ascontiguousarray(frames)).to(dtype) / 255.0
    mean = torch.tensor(norm.mean, dtype=dtype)
    std = torch.tensor(norm.std, dtype=dtype)
    x = (x - mean) / std
    return x.movedim(-1, -4)


def _conv_unit(cin: int, cout: int, stride: tuple[int, int, int], variant: str) -> list[nn.Module]:
    if variant == "full3d":
        return [
            nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm3d(cout),
        ]
    ts, sh, sw = stride
    return [
        nn.Conv3d(cin, cout, (1, 3, 3), stride=(1, sh, sw), padding=(0, 1, 1), bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, (3, 1, 1), stride=(ts, 1, 1), padding=(1, 0, 0), bias=False),
        nn.BatchNorm3d(cout),
    ]


class _ResidualStage(nn.Module):
    def __init__(self, cin: int, cout: int, stride: tuple[int, int, int], variant: str):
        super().__init__()
        self.branch = nn.Sequential(
            *_conv_unit(cin, cout, stride, variant),
            nn.ReLU(inplace=True),
            *_conv_unit(cout, cout, (1, 1, 1), variant),
        )
        if cin != cout or any(s != 1 for s in stride):
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm3d(cout),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.branch(x) + self.shortcut(x))


class TinyVideoEncoder(nn.Module):
    """Four residual stages of 3D convolutions, sized for CPU training.

    Total spatial stride is 8 (stem and first two stages) or 16 (extra
    stride in the last stage); total temporal stride comes from the
    middle stages. Both the full-3D and the factorized
    spatial-then-temporal convolution variants share this skeleton.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        c1, c2, c3, c4 = spec.stage_channels
        t2 = 2 if spec.temporal_stride >= 2 else 1
        t3 = 2 if spec.temporal_stride == 4 else 1
        s4 = 2 if spec.spatial_stride == 16 else 1
        self.stem = nn.Sequential(
            nn.Conv3d(3, c1, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1), bias=False),
            nn.BatchNorm3d(c1),
            nn.ReLU(inplace=True),
        )
        self.stage1 = _ResidualStage(c1, c1, (1, 2, 2), spec.variant)
        self.stage2 = _ResidualStage(c1, c2, (t2, 2, 2), spec.variant)
        self.stage3 = _ResidualStage(c2, c3, (t3, 1, 1), spec.variant)
        self.stage4 = _ResidualStage(c3, c4, (1, s4, s4), spec.variant)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = (3, self.spec.input_T, self.spec.input_H, self.spec.input_W)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        return self.stage4(self.stage3(self.stage2(self.stage1(self.stem(x)))))


def _bilinear_sample(maps: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample (N, C, H, W) maps at continuous pixel coords (N, K, S).

    Pixel (i, j) is centered at (j + 0.5, i + 0.5); coordinates beyond
    the border replicate the edge value. Returns (N, K, S, C)-shaped
    values transposed to (N, K, C, S).
    """
    n, c, h, w = maps.shape
    fy = (ys - 0.5).clamp(0, h - 1)
    fx = (xs - 0.5).clamp(0, w - 1)
    y0 = fy.floor()
    x0 = fx.floor()
    wy = fy - y0
    wx = fx - x0
    y0i = y0.long().clamp(0, h - 1)
    x0i = x0.long().clamp(0, w - 1)
    y1i = (y0i + 1).clamp(0, h - 1)
    x1i = (x0i + 1).clamp(0, w - 1)

    flat = maps.reshape(n, c, h * w)
    k, s = ys.shape[1], ys.shape[2]

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).reshape(n, 1, k * s).expand(n, c, k * s)
        return flat.gather(2, idx).reshape(n, c, k, s)

    wy = wy.unsqueeze(1)
    wx = wx.unsqueeze(1)
    return (
        gather(y0i, x0i) * (1 - wy) * (1 - wx)
        + gather(y0i, x1i) * (1 - wy) * wx
        + gather(y1i, x0i) * wy * (1 - wx)
        + gather(y1i, x1i) * wy * wx
    ).permute(0, 2, 1, 3)


def pool_regions(maps: torch.Tensor, boxes: torch.Tensor, pool_size: int) -> torch.Tensor:
    """Quantization-free region pooling of (N, C, H, W) maps.

    Each normalized box is split into pool_size x pool_size cells; every
    cell averages a fixed 2 x 2 grid of bilinear samples taken at
    continuous coordinates (no rounding anywhere). Returns
    (N, K, C, pool_size, pool_size); differentiable in ``maps``.
    """
    if maps.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) maps, got {tuple(maps.shape)}")
    if boxes.ndim != 3 or boxes.shape[-1] != 4:
        raise ValueError(f"expected (N, K, 4) boxes, got {tuple(boxes.shape)}")
    n, c, h, w = maps.shape
    k = boxes.shape[1]
    p, sub = pool_size, POOL_SAMPLES_PER_CELL
    boxes = boxes.to(maps.dtype)

    # Per-cell sample positions in box-relative units: cell i, sample j
    # sits at (i + (j + 0.5) / sub) / p of the box extent.
    pos = (
        torch.arange(p, dtype=maps.dtype).repeat_interleave(sub)
        + (torch.arange(sub, dtype=maps.dtype).repeat(p) + 0.5) / sub
    ) / p  # (p * sub,)

    x0 = (boxes[..., 0] - boxes[..., 2] / 2) * w
    y0 = (boxes[..., 1] - boxes[..., 3] / 2) * h
    xs_1d = x0.unsqueeze(-1) + boxes[..., 2].unsqueeze(-1) * w * pos  # (N, K, p*sub)
    ys_1d = y0.unsqueeze(-1) + boxes[..., 3].unsqueeze(-1) * h * pos

    m = p * sub
    ys = ys_1d.unsqueeze(-1).expand(n, k, m, m).reshape(n, k, m * m)
    xs = xs_1d.unsqueeze(-2).expand(n, k, m, m).reshape(n, k, m * m)
    vals = _bilinear_sample(maps, ys, xs)  # (N, K, C, m*m)
    vals = vals.reshape(n, k, c, p, sub, p, sub)
    return vals.mean(dim=(4, 6))


def pool_region(feature_map: torch.Tensor, box: Box, pool_size: int) -> torch.Tensor:
    """Single-map convenience wrapper: (C, H, W) + one box -> (C, P, P)."""
    if feature_map.ndim != 3:
        raise ValueError(f"expected (C, H, W) map, got {tuple(feature_map.shape)}")
    boxes = torch.tensor([[box.as_tuple()]], dtype=feature_map.dtype)
    return pool_regions(feature_map.unsqueeze(0), boxes, pool_size)[0, 0]


def decode_targets(queries: torch.Tensor, targets: torch.Tensor, sigmas: Sigmas) -> torch.Tensor:
    """Vectorized form of :func:`ctp.geometry.decode_box`.

    queries (..., 4) and targets (..., T, 4) -> boxes (..., T, 4).
    """
    q = queries.unsqueeze(-2)
    cx = q[..., 0] + sigmas.sx * targets[..., 0]
    cy = q[..., 1] + sigmas.sy * targets[..., 1]
    w = q[..., 2] * torch.exp(sigmas.sw * targets[..., 2])
    h = q[..., 3] * torch.exp(sigmas.sh * targets[..., 3])
    return torch.stack([cx, cy, w, h], dim=-1)


class TrajectoryHead(nn.Module):
    """Temporal squeeze -> region pooling -> two-layer MLP -> T x 4 targets.

    The squeeze is a single convolution with 1 x 1 spatial extent whose
    temporal kernel spans the whole feature clip; disabling it falls
    back to a plain temporal mean. The final layer starts at zero so the
    initial prediction decodes to the query box in every frame.
    """

    def __init__(self, spec: HeadSpec, feature_T: int, channels: int):
        super().__init__()
        self.spec = spec
        self.feature_T = feature_T
        self.squeeze = (
            nn.Conv3d(channels, channels, (feature_T, 1, 1)) if spec.squeeze_enabled else None
        )
        self.fc1 = nn.Linear(channels * spec.pool_size**2, spec.hidden)
        self.fc2 = nn.Linear(spec.hidden, spec.out_T * 4)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def squeeze_time(self, features: torch.Tensor) -> torch.Tensor:
        """(N, C, T', H', W') -> (N, C, H', W')."""
        if features.shape[2] != self.feature_T:
            raise ValueError(
                f"feature clip length {features.shape[2]} != head's {self.feature_T}"
            )
        if self.squeeze is None:
            return features.mean(dim=2)
        return self.squeeze(features).squeeze(2)

    def forward(self, features: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """Features (N, C, T', H', W') + queries (N, K, 4) -> targets (N, K, T, 4)."""
        squeezed = self.squeeze_time(features)
        pooled = pool_regions(squeezed, queries, self.spec.pool_size)
        flat = pooled.flatten(2)
        hidden = torch.relu(self.fc1(flat))
        out = self.fc2(hidden)
        return out.reshape(out.shape[0], out.shape[1], self.spec.out_T, 4)


class CtpModel(nn.Module):
    """Encoder plus trajectory head; the unit that training optimizes."""

    def __init__(
        self,
        encoder_spec: EncoderSpec,
        head_spec: HeadSpec,
        sigmas: Sigmas = DEFAULT_SIGMAS,
        pixel_norm: PixelNorm = PixelNorm(),
    ):
        super().__init__()
        if head_spec.out_T != encoder_spec.input_T:
            raise ValueError(
                f"head out_T={head_spec.out_T} must equal encoder input_T={encoder_spec.input_T}"
            )
        self.encoder_spec = encoder_spec
        self.head_spec = head_spec
        self.sigmas = sigmas
        self.pixel_norm = pixel_norm
        self.encoder = TinyVideoEncoder(encoder_spec)
        feature_T = encoder_spec.input_T // encoder_spec.temporal_stride
        self.head = TrajectoryHead(head_spec, feature_T, encoder_spec.channels)

    def config_snapshot(self) -> dict:
        from dataclasses import asdict

        return {
            "encoder": asdict(self.encoder_spec),
            "head": asdict(self.head_spec),
            "sigmas": asdict(self.sigmas),
            "pixel_norm": asdict(self.pixel_norm),
        }

    def encode(self, clips: torch.Tensor) -> torch.Tensor:
        return self.encoder(clips)

    def forward(
        self, clips: torch.Tensor, queries: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized clips (N, 3, T, H, W) + queries (N, K, 4).

        Returns (targets, boxes), both (N, K, T, 4); boxes are the
        targets decoded against each query.
        """
        features = self.encoder(clips)
        targets = self.head(features, queries)
        boxes = decode_targets(queries, targets, self.sigmas)
        return targets, boxes

    @torch.no_grad()
    def predict_trajectories(self, frames: np.ndarray, query_boxes: list[Box]) -> list[list[Box]]:
        """Inference convenience: one uint8 clip + K query boxes -> K box lists."""
        was_training = self.training
        self.eval()
        try:
            clips = normalize_frames(frames[None], self.pixel_norm)
            queries = boxes_to_tensor(query_boxes).unsqueeze(0)
            _, boxes = self(clips, queries)
        finally:
            self.train(was_training)
        return [tensor_to_boxes(boxes[0, k]) for k in range(len(query_boxes))]
