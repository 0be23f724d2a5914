"""Box algebra: the regression parameterization, its inverse, and IoU.

All coordinates are normalized fractions of the frame: a box is
(cx, cy, w, h) with its center at (cx, cy), so the left edge sits at
cx - w/2 and the right edge at cx + w/2. Conversion to pixels happens
at the I/O boundary (see :mod:`ctp.compositor`), never here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

__all__ = [
    "Box",
    "Sigmas",
    "TargetVec",
    "DEFAULT_SIGMAS",
    "decode_box",
    "encode_targets",
    "smooth_l1",
    "box_distance",
    "iou",
    "clamp_to_frame",
]


@dataclass(frozen=True, slots=True)
class Box:
    """One target location in one frame: center and size, in [0, 1] units.

    Sides must be positive. Containment in the unit frame is *not*
    enforced here because decoded predictions may legitimately extend
    past the frame; synthesis code checks containment explicitly via
    :meth:`inside_frame`.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box {name} must be finite, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def inside_frame(self, tol: float = 0.0) -> bool:
        return (
            self.x0 >= -tol
            and self.y0 >= -tol
            and self.x1 <= 1.0 + tol
            and self.y1 <= 1.0 + tol
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def to_json(self) -> list[float]:
        # Sidecar convention: [cx, cy, w, h], 6 decimal places.
        return [round(v, 6) for v in self.as_tuple()]

    @classmethod
    def from_json(cls, data: Sequence[float]) -> "Box":
        if len(data) != 4:
            raise ValueError(f"expected 4 box components, got {len(data)}")
        return cls(*(float(v) for v in data))


@dataclass(frozen=True, slots=True)
class Sigmas:
    """Constant scaling factors applied to the four regression targets."""

    sx: float = 0.8
    sy: float = 0.8
    sw: float = 0.04
    sh: float = 0.04

    def __post_init__(self) -> None:
        for name in ("sx", "sy", "sw", "sh"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"sigma {name} must be finite and positive, got {v!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sx, self.sy, self.sw, self.sh)


DEFAULT_SIGMAS = Sigmas()


@dataclass(frozen=True, slots=True)
class TargetVec:
    """Regression targets for one frame: center offsets and log-size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self) -> None:
        for name in ("tx", "ty", "tw", "th"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"target {name} must be finite, got {v!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


def decode_box(query: Box, t: TargetVec, s: Sigmas = DEFAULT_SIGMAS) -> Box:
    """Apply regression targets to a query box.

    Center moves linearly, size scales exponentially:
    (cx + sx*tx, cy + sy*ty, w*exp(sw*tw), h*exp(sh*th)).
    The result is deliberately not clamped to the unit frame; clamping
    would distort loss gradients and is a rendering concern only.
    """
    return Box(
        query.cx + s.sx * t.tx,
        query.cy + s.sy * t.ty,
        query.w * math.exp(s.sw * t.tw),
        query.h * math.exp(s.sh * t.th),
    )


def encode_targets(query: Box, gt: Box, s: Sigmas = DEFAULT_SIGMAS) -> TargetVec:
    """Exact inverse of :func:`decode_box`: targets that map query onto gt."""
    return TargetVec(
        (gt.cx - query.cx) / s.sx,
        (gt.cy - query.cy) / s.sy,
        math.log(gt.w / query.w) / s.sw,
        math.log(gt.h / query.h) / s.sh,
    )


def smooth_l1(x: float) -> float:
    """Piecewise quadratic/linear penalty with transition at |x| = 1."""
    if not math.isfinite(x):
        raise ValueError(f"smooth_l1 input must be finite, got {x!r}")
    ax = abs(x)
    if ax < 1.0:
        return 0.5 * x * x
    return ax - 0.5


def box_distance(
    gt: Box, pred: Box, s: Sigmas = DEFAULT_SIGMAS
) -> tuple[float, float, float, float]:
    """Per-component distances: linear space for centers, log space for sizes.

    Each term is smooth_l1 of the corresponding normalized residual, so
    (0, 0, 0, 0) iff gt == pred.
    """
    if pred.w <= 0 or pred.h <= 0:
        raise ValueError("predicted box must have positive sides")
    return (
        smooth_l1((gt.cx - pred.cx) / s.sx),
        smooth_l1((gt.cy - pred.cy) / s.sy),
        smooth_l1(math.log(gt.w / pred.w) / s.sw),
        smooth_l1(math.log(gt.h / pred.h) / s.sh),
    )


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes, 1 for identical ones."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def clamp_to_frame(box: Box) -> Box:
    """Shift (and if needed shrink) a box so it lies inside the unit frame.

    Rendering utility only; never applied to decoded predictions.
    """
    w = min(box.w, 1.0)
    h = min(box.h, 1.0)
    cx = min(max(box.cx, w / 2), 1.0 - w / 2)
    cy = min(max(box.cy, h / 2), 1.0 - h / 2)
    return Box(cx, cy, w, h)
