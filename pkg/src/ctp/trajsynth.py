"""Pseudo-trajectory sampling: key frames plus linear interpolation.

A trajectory is a length-T sequence of boxes obeying three constraints:
per-frame center displacement at most ``max_speed`` on each axis,
per-frame side ratios within ``[exp(-scale_rate), exp(scale_rate)]``,
and full containment in the unit frame. Key frames are sampled to obey
the gap-scaled versions of these bounds; intermediate frames are linear
in every component.

Linear interpolation bounds per-frame size *differences*, not exactly
the *ratios*, so a maximally fast size ramp over a long gap can break
the per-frame ratio bound. :func:`sample_trajectory` therefore
re-validates every emitted trajectory and resamples on violation, which
keeps the published invariants literally true for every output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError
from .geometry import Box

__all__ = [
    "TrajectoryConstraints",
    "Trajectory",
    "sample_initial_box",
    "sample_keyframe_boxes",
    "interpolate_trajectory",
    "sample_trajectory",
    "validate_trajectory",
]

# Slack for floating-point roundoff when checking constraints that the
# construction satisfies exactly in real arithmetic.
_FP_TOL = 1e-9


@dataclass(frozen=True, slots=True)
class TrajectoryConstraints:
    """Bounds on sampled trajectories, in normalized frame units.

    Defaults correspond to 3 px/frame speed and 16-64 px patch sides at
    a 112-pixel frame.
    """

    max_speed: float = 3.0 / 112.0
    scale_rate: float = 0.025
    size_range: tuple[float, float] = (16.0 / 112.0, 64.0 / 112.0)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    keyframe_count_range: tuple[int, int] = (3, 5)

    def __post_init__(self) -> None:
        if self.max_speed <= 0:
            raise ConfigError(f"max_speed must be positive, got {self.max_speed}")
        if self.scale_rate < 0:
            raise ConfigError(f"scale_rate must be >= 0, got {self.scale_rate}")
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ConfigError(f"invalid size_range {self.size_range}")
        if lo > 1:
            raise ConfigError(f"size_range minimum {lo} exceeds the unit frame")
        alo, ahi = self.aspect_range
        if not (0 < alo <= ahi):
            raise ConfigError(f"invalid aspect_range {self.aspect_range}")
        klo, khi = self.keyframe_count_range
        if klo < 2 or khi < klo:
            raise ConfigError(f"invalid keyframe_count_range {self.keyframe_count_range}")


@dataclass(slots=True)
class Trajectory:
    """Length-T box sequence with per-frame visibility flags."""

    boxes: list[Box]
    visible: list[bool]
    keyframe_indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def to_json(self) -> dict[str, Any]:
        return {
            "T": len(self.boxes),
            "keyframes": list(self.keyframe_indices),
            "boxes": [b.to_json() for b in self.boxes],
            "visible": [bool(v) for v in self.visible],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Trajectory":
        boxes = [Box.from_json(b) for b in data["boxes"]]
        visible = [bool(v) for v in data["visible"]]
        if len(boxes) != data["T"] or len(visible) != data["T"]:
            raise ValueError("trajectory field lengths disagree with T")
        return cls(boxes=boxes, visible=visible, keyframe_indices=list(data["keyframes"]))


def sample_initial_box(rng: np.random.Generator, constraints: TrajectoryConstraints) -> Box:
    """Sample the first-frame box: uniform side scale, aspect, and position.

    Width and height are s*sqrt(a) and s/sqrt(a) with s ~ U(size_range)
    and a ~ U(aspect_range), each clamped back into size_range (and to
    the unit frame); the center is uniform over placements that keep the
    box fully inside the frame.
    """
    lo, hi = constraints.size_range
    s = rng.uniform(lo, hi)
    a = rng.uniform(*constraints.aspect_range)
    root = np.sqrt(a)
    w = float(np.clip(s * root, lo, min(hi, 1.0)))
    h = float(np.clip(s / root, lo, min(hi, 1.0)))
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return Box(cx, cy, w, h)


def _propose_next_box(
    rng: np.random.Generator,
    prev: Box,
    gap: int,
    constraints: TrajectoryConstraints,
) -> Box:
    """One key-frame step: rejection-sample within the gap-scaled bounds.

    Falls back to clamping the last proposal into the frame after 100
    rejections; the caller's validation pass catches the rare case where
    clamping breaks the speed bound.
    """
    max_d = constraints.max_speed * gap
    log_r = constraints.scale_rate * gap
    proposal = None
    for _ in range(100):
        dcx = rng.uniform(-max_d, max_d)
        dcy = rng.uniform(-max_d, max_d)
        w = prev.w * np.exp(rng.uniform(-log_r, log_r))
        h = prev.h * np.exp(rng.uniform(-log_r, log_r))
        proposal = Box(prev.cx + dcx, prev.cy + dcy, min(w, 1.0), min(h, 1.0))
        if proposal.inside_frame():
            return proposal
    from .geometry import clamp_to_frame

    return clamp_to_frame(proposal)


def sample_keyframe_boxes(
    rng: np.random.Generator,
    initial: Box,
    T: int,
    constraints: TrajectoryConstraints,
) -> list[tuple[int, Box]]:
    """Pick key-frame indices (always including 0 and T-1) and their boxes."""
    if T < 2:
        raise ValueError(f"need at least 2 frames, got T={T}")
    klo, khi = constraints.keyframe_count_range
    n = int(rng.integers(klo, khi + 1))
    n = min(n, T)
    interior = sorted(rng.choice(np.arange(1, T - 1), size=n - 2, replace=False).tolist()) if n > 2 else []
    indices = [0, *interior, T - 1]

    boxes = [initial]
    for prev_idx, idx in zip(indices, indices[1:]):
        boxes.append(_propose_next_box(rng, boxes[-1], idx - prev_idx, constraints))
    return list(zip(indices, boxes))


def interpolate_trajectory(keyframes: list[tuple[int, Box]], T: int) -> list[Box]:
    """Fill all T frames by per-component linear interpolation.

    Key-frame boxes are placed directly at their own indices, so they
    are reproduced bit-exactly.
    """
    indices = [i for i, _ in keyframes]
    if len(set(indices)) != len(indices):
        raise ValueError(f"duplicate key-frame indices: {indices}")
    if sorted(indices) != indices:
        raise ValueError(f"key-frame indices must be sorted: {indices}")
    if indices[0] != 0 or indices[-1] != T - 1:
        raise ValueError(f"key frames must span [0, T-1], got {indices}")

    boxes: list[Box | None] = [None] * T
    for idx, box in keyframes:
        boxes[idx] = box
    for (a, box_a), (b, box_b) in zip(keyframes, keyframes[1:]):
        for i in range(a + 1, b):
            f = (i - a) / (b - a)
            boxes[i] = Box(
                box_a.cx + f * (box_b.cx - box_a.cx),
                box_a.cy + f * (box_b.cy - box_a.cy),
                box_a.w + f * (box_b.w - box_a.w),
                box_a.h + f * (box_b.h - box_a.h),
            )
    return boxes  # type: ignore[return-value]


def validate_trajectory(
    traj: Trajectory,
    constraints: TrajectoryConstraints,
    T: int | None = None,
    tol: float = _FP_TOL,
) -> list[str]:
    """Check every published trajectory invariant; return violation messages."""
    problems: list[str] = []
    n = len(traj.boxes)
    if T is not None and n != T:
        problems.append(f"length {n} != expected {T}")
    if len(traj.visible) != n:
        problems.append("visible flags length mismatch")
    elif n and not traj.visible[0]:
        problems.append("frame 0 must be visible")

    kf = traj.keyframe_indices
    if not kf or kf[0] != 0 or kf[-1] != n - 1:
        problems.append(f"key frames must start at 0 and end at {n - 1}, got {kf}")
    elif sorted(set(kf)) != kf:
        problems.append(f"key frames must be sorted and unique, got {kf}")

    ratio_hi = np.exp(constraints.scale_rate) * (1 + tol)
    ratio_lo = np.exp(-constraints.scale_rate) * (1 - tol)
    for i, box in enumerate(traj.boxes):
        if not box.inside_frame(tol=tol):
            problems.append(f"frame {i}: box extends past the unit frame")
        if i == 0:
            continue
        prev = traj.boxes[i - 1]
        if abs(box.cx - prev.cx) > constraints.max_speed + tol:
            problems.append(f"frame {i}: x-speed {abs(box.cx - prev.cx):.6g} too high")
        if abs(box.cy - prev.cy) > constraints.max_speed + tol:
            problems.append(f"frame {i}: y-speed {abs(box.cy - prev.cy):.6g} too high")
        for side, cur_v, prev_v in (("w", box.w, prev.w), ("h", box.h, prev.h)):
            ratio = cur_v / prev_v
            if not (ratio_lo <= ratio <= ratio_hi):
                problems.append(f"frame {i}: {side}-ratio {ratio:.6g} out of bounds")
    return problems


def sample_trajectory(
    rng: np.random.Generator,
    T: int,
    constraints: TrajectoryConstraints = TrajectoryConstraints(),
    max_retries: int = 50,
) -> Trajectory:
    """Sample a full trajectory satisfying every invariant.

    Composition of initial-box, key-frame, and interpolation sampling,
    resampled wholesale until the per-frame validation passes (the
    interpolated ratio bound can fail for extreme key-frame ramps).
    Visibility starts all-true; masking is applied by the compositor.
    """
    if T < 2:
        raise ValueError(f"need at least 2 frames, got T={T}")
    for _ in range(max_retries):
        initial = sample_initial_box(rng, constraints)
        keyframes = sample_keyframe_boxes(rng, initial, T, constraints)
        boxes = interpolate_trajectory(keyframes, T)
        traj = Trajectory(
            boxes=boxes,
            visible=[True] * T,
            keyframe_indices=[i for i, _ in keyframes],
        )
        if not validate_trajectory(traj, constraints, T=T, tol=1e-12):
            return traj
    raise RuntimeError(
        f"failed to sample a constraint-satisfying trajectory in {max_retries} attempts"
    )
