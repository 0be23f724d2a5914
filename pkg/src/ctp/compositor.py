"""Synthetic clip construction: crop a patch, move it along a trajectory.

A training clip is built in three steps: sample a pseudo trajectory,
crop the patch pixels from one (random) frame of the source clip at
that trajectory's box, then paste the patch back onto every frame at
the per-frame box, skipping frames the visibility mask hides. Ground
truth is the trajectory itself, stored unmodified regardless of masking
or occlusion, so invisible frames are still supervised.

Also home to the on-disk formats: the "CTPC" clip container, per-clip
JSON sidecars, and the JSON-lines dataset manifest.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .errors import ConfigError, DataError
from .geometry import Box
from .ioutil import atomic_write_bytes, atomic_write_text, canonical_json, derive_seed
from .trajsynth import Trajectory, TrajectoryConstraints, sample_trajectory

__all__ = [
    "RawClip",
    "PatchSource",
    "SyntheticClip",
    "box_to_pixel_rect",
    "crop_patch",
    "sample_visibility",
    "resize_bilinear",
    "composite_clip",
    "synthesize_training_clip",
    "ProceduralSource",
    "FrameFolderSource",
    "write_clip",
    "read_clip",
    "clip_sidecar_json",
    "sidecar_to_clip_truth",
    "generate_dataset",
    "read_manifest",
]

CLIP_MAGIC = b"CTPC"
CLIP_VERSION = 1

_SEED_TAG_BACKGROUND = 11
_SEED_TAG_CLIP = 23


@dataclass(slots=True)
class RawClip:
    """Source frames a synthetic clip is built on: (T, H, W, 3) uint8."""

    frames: np.ndarray
    source_id: str

    def __post_init__(self) -> None:
        f = self.frames
        if f.ndim != 4 or f.shape[3] != 3 or f.dtype != np.uint8:
            raise ValueError(f"frames must be (T, H, W, 3) uint8, got {f.shape} {f.dtype}")
        t, h, w, _ = f.shape
        if t < 2:
            raise ValueError(f"need at least 2 frames, got {t}")
        if h < 32 or w < 32:
            raise ValueError(f"frames must be at least 32x32, got {h}x{w}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, slots=True)
class PatchSource:
    """Provenance of a cropped patch: which frame and which box."""

    frame_index: int
    box: Box

    def to_json(self) -> dict[str, Any]:
        return {"frame_index": self.frame_index, "box": self.box.to_json()}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "PatchSource":
        return cls(frame_index=int(data["frame_index"]), box=Box.from_json(data["box"]))


@dataclass(slots=True)
class SyntheticClip:
    """Composited frames plus the trajectories that generated them."""

    frames: np.ndarray
    trajectories: list[Trajectory]
    patch_sources: list[PatchSource]
    seed: int
    source_id: str = ""


def box_to_pixel_rect(box: Box, height: int, width: int) -> tuple[int, int, int, int]:
    """Convert a normalized box to integer pixel bounds (y0, y1, x0, x1).

    Edges round to the nearest pixel boundary; the result is clipped to
    the frame and kept at least one pixel on each side.
    """
    x0 = int(round(box.x0 * width))
    x1 = int(round(box.x1 * width))
    y0 = int(round(box.y0 * height))
    y1 = int(round(box.y1 * height))
    x0 = max(0, min(x0, width - 1))
    y0 = max(0, min(y0, height - 1))
    x1 = max(x0 + 1, min(x1, width))
    y1 = max(y0 + 1, min(y1, height))
    return y0, y1, x0, x1


def crop_patch(
    raw: RawClip, traj: Trajectory, rng: np.random.Generator
) -> tuple[np.ndarray, PatchSource]:
    """Copy the patch pixels of one randomly chosen trajectory frame."""
    if len(traj) != raw.T:
        raise ValueError(f"trajectory length {len(traj)} != clip length {raw.T}")
    h, w = raw.frames.shape[1:3]
    order = rng.permutation(raw.T)
    for j in map(int, order):
        y0, y1, x0, x1 = box_to_pixel_rect(traj.boxes[j], h, w)
        if y1 > y0 and x1 > x0:
            return raw.frames[j, y0:y1, x0:x1].copy(), PatchSource(j, traj.boxes[j])
    raise DataError(f"no frame of clip {raw.source_id!r} yields a non-degenerate crop")


def sample_visibility(rng: np.random.Generator, T: int, p_mask: float) -> list[bool]:
    """Per-frame visibility: frame 0 always shown, the rest masked i.i.d."""
    if not 0 <= p_mask < 1:
        raise ConfigError(f"p_mask must be in [0, 1), got {p_mask}")
    return [True] + [bool(rng.random() >= p_mask) for _ in range(T - 1)]


def _resize_bilinear_float(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centered coordinates (float64)."""
    in_h, in_w = src.shape[:2]
    src = src.astype(np.float64, copy=False)

    def axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(patch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (h, w, 3) uint8 patch; rounds half away from zero."""
    out = _resize_bilinear_float(patch, out_h, out_w)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def composite_clip(
    raw: RawClip,
    trajs: list[Trajectory],
    patches: list[np.ndarray],
    visibilities: list[list[bool]],
    *,
    patch_sources: list[PatchSource] | None = None,
    seed: int = 0,
) -> SyntheticClip:
    """Overlay K patches along their trajectories onto the raw frames.

    Trajectories are drawn in index order, so on overlap a later patch
    overdraws an earlier one. Masked frames are simply not pasted; the
    background shows through and no artificial marker is introduced.
    """
    if not (len(trajs) == len(patches) == len(visibilities)):
        raise ValueError(
            f"misaligned lists: {len(trajs)} trajectories, {len(patches)} patches, "
            f"{len(visibilities)} visibility masks"
        )
    h, w = raw.frames.shape[1:3]
    frames = raw.frames.copy()
    out_trajs = []
    for traj, patch, vis in zip(trajs, patches, visibilities):
        if len(traj) != raw.T or len(vis) != raw.T:
            raise ValueError("trajectory/visibility length must match the clip length")
        for i in range(raw.T):
            if not vis[i]:
                continue
            y0, y1, x0, x1 = box_to_pixel_rect(traj.boxes[i], h, w)
            frames[i, y0:y1, x0:x1] = resize_bilinear(patch, y1 - y0, x1 - x0)
        out_trajs.append(
            Trajectory(
                boxes=list(traj.boxes),
                visible=list(vis),
                keyframe_indices=list(traj.keyframe_indices),
            )
        )
    return SyntheticClip(
        frames=frames,
        trajectories=out_trajs,
        patch_sources=list(patch_sources) if patch_sources is not None else [],
        seed=seed,
        source_id=raw.source_id,
    )


def synthesize_training_clip(
    seed: int,
    raw: RawClip,
    K: int,
    constraints: TrajectoryConstraints = TrajectoryConstraints(),
    p_mask: float = 0.2,
) -> SyntheticClip:
    """Build one training example: K independent (trajectory, patch, mask) triples.

    Deterministic: the same (seed, raw frames, K) always produces the
    same bytes. The seed is recorded in the clip for provenance.
    """
    if K < 1:
        raise ValueError(f"need at least one trajectory, got K={K}")
    rng = np.random.default_rng(seed)
    trajs: list[Trajectory] = []
    patches: list[np.ndarray] = []
    sources: list[PatchSource] = []
    masks: list[list[bool]] = []
    for _ in range(K):
        traj = sample_trajectory(rng, raw.T, constraints)
        patch, source = crop_patch(raw, traj, rng)
        trajs.append(traj)
        patches.append(patch)
        sources.append(source)
        masks.append(sample_visibility(rng, raw.T, p_mask))
    return composite_clip(raw, trajs, patches, masks, patch_sources=sources, seed=seed)


# ---------------------------------------------------------------------------
# Raw clip sources


class ClipSource(Protocol):
    """Anything that can deterministically produce source frames."""

    kind: str

    def raw_clip(self, seed: int, index: int, T: int, H: int, W: int) -> RawClip: ...


def procedural_background(rng: np.random.Generator, T: int, H: int, W: int) -> np.ndarray:
    """Static background: directional color gradient + blotches + noise."""
    c0 = rng.uniform(0, 255, size=3)
    c1 = rng.uniform(0, 255, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    span = ramp.max() - ramp.min()
    ramp = (ramp - ramp.min()) / (span if span > 0 else 1.0)
    img = c0[None, None] + ramp[..., None] * (c1 - c0)[None, None]
    img += _resize_bilinear_float(rng.uniform(-40, 40, size=(6, 6, 3)), H, W)
    img += rng.normal(0, 8, size=(H, W, 3))
    frame = np.clip(img, 0, 255).astype(np.uint8)
    return np.broadcast_to(frame, (T, H, W, 3)).copy()


@dataclass(frozen=True, slots=True)
class ProceduralSource:
    """Hermetic source: backgrounds synthesized from the seed alone."""

    kind: str = "procedural"

    def raw_clip(self, seed: int, index: int, T: int, H: int, W: int) -> RawClip:
        rng = np.random.default_rng(derive_seed(seed, index, _SEED_TAG_BACKGROUND))
        return RawClip(frames=procedural_background(rng, T, H, W), source_id=f"procedural-{index:06d}")


@dataclass(slots=True)
class FrameFolderSource:
    """Adapter for user-supplied videos stored as folders of image frames.

    ``root`` contains one subdirectory per video; frames are its image
    files in sorted name order. Clips are cut with a random temporal
    stride drawn from ``frame_interval_range`` (shrunk when a video is
    too short) and resized to the requested resolution.
    """

    root: Path
    frame_interval_range: tuple[int, int] = (1, 5)
    kind: str = "frames"
    _videos: list[list[Path]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        exts = {".png", ".jpg", ".jpeg", ".bmp"}
        for sub in sorted(p for p in self.root.iterdir() if p.is_dir()):
            frames = sorted(p for p in sub.iterdir() if p.suffix.lower() in exts)
            if len(frames) >= 2:
                self._videos.append(frames)
        if not self._videos:
            raise DataError(f"no frame folders with >= 2 images under {self.root}")

    def raw_clip(self, seed: int, index: int, T: int, H: int, W: int) -> RawClip:
        from PIL import Image

        rng = np.random.default_rng(derive_seed(seed, index, _SEED_TAG_BACKGROUND))
        video = self._videos[int(rng.integers(len(self._videos)))]
        lo, hi = self.frame_interval_range
        stride = int(rng.integers(lo, hi + 1))
        # Shrink the stride until T frames fit; reject videos that are too short.
        while stride > 1 and (T - 1) * stride + 1 > len(video):
            stride -= 1
        span = (T - 1) * stride + 1
        if span > len(video):
            raise DataError(f"video {video[0].parent.name!r} has {len(video)} frames, need {span}")
        start = int(rng.integers(len(video) - span + 1))
        frames = np.stack(
            [
                np.asarray(
                    Image.open(video[start + i * stride]).convert("RGB").resize((W, H), Image.BILINEAR)
                )
                for i in range(T)
            ]
        )
        return RawClip(
            frames=frames.astype(np.uint8),
            source_id=f"{video[0].parent.name}:{start}:{stride}",
        )


# ---------------------------------------------------------------------------
# On-disk formats


def write_clip(path: str | os.PathLike, frames: np.ndarray) -> None:
    """Write frames in the CTPC container (atomic)."""
    frames = np.ascontiguousarray(frames)
    if frames.ndim != 4 or frames.dtype != np.uint8:
        raise ValueError(f"expected (T, H, W, C) uint8 frames, got {frames.shape} {frames.dtype}")
    header = CLIP_MAGIC + struct.pack("<H", CLIP_VERSION) + struct.pack("<4I", *frames.shape)
    atomic_write_bytes(path, header + frames.tobytes())


def read_clip(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CLIP_MAGIC:
        raise DataError(f"{path}: bad magic, not a clip file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CLIP_VERSION:
        raise DataError(f"{path}: unsupported clip version {version}")
    shape = struct.unpack_from("<4I", data, 6)
    payload = data[22:]
    expected = int(np.prod(shape))
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def clip_sidecar_json(clip: SyntheticClip) -> dict[str, Any]:
    return {
        "seed": clip.seed,
        "source_id": clip.source_id,
        "T": int(clip.frames.shape[0]),
        "trajectories": [t.to_json() for t in clip.trajectories],
        "patch_sources": [s.to_json() for s in clip.patch_sources],
    }


def sidecar_to_clip_truth(data: dict[str, Any]) -> tuple[list[Trajectory], list[PatchSource], int]:
    trajs = [Trajectory.from_json(t) for t in data["trajectories"]]
    sources = [PatchSource.from_json(s) for s in data.get("patch_sources", [])]
    return trajs, sources, int(data["seed"])


def _generate_one(args: tuple) -> dict[str, str]:
    out_dir, seed, index, T, H, W, K, p_mask, constraints, source = args
    out_dir = Path(out_dir)
    raw = source.raw_clip(seed, index, T, H, W)
    clip = synthesize_training_clip(
        derive_seed(seed, index, _SEED_TAG_CLIP), raw, K, constraints, p_mask
    )
    clip_id = f"clip_{index:06d}"
    clip_rel = f"clips/{clip_id}.ctpc"
    sidecar_rel = f"sidecars/{clip_id}.json"
    write_clip(out_dir / clip_rel, clip.frames)
    atomic_write_text(out_dir / sidecar_rel, canonical_json(clip_sidecar_json(clip)) + "\n")
    return {
        "id": clip_id,
        "clip_path": clip_rel,
        "sidecar_path": sidecar_rel,
        "source_id": clip.source_id,
    }


def generate_dataset(
    out_dir: str | os.PathLike,
    n_clips: int,
    T: int,
    H: int,
    W: int,
    K: int = 3,
    p_mask: float = 0.2,
    constraints: TrajectoryConstraints = TrajectoryConstraints(),
    seed: int = 0,
    source: ClipSource | None = None,
    workers: int = 1,
) -> Path:
    """Write a full synthetic dataset; returns the manifest path.

    Clip contents depend only on (seed, index, parameters), so any
    worker count produces the identical directory tree. The worker pool
    is additionally capped by the CTP_NUM_WORKERS environment variable.
    """
    if n_clips < 1:
        raise ConfigError(f"n_clips must be >= 1, got {n_clips}")
    source = source if source is not None else ProceduralSource()
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    (out_dir / "sidecars").mkdir(parents=True, exist_ok=True)

    env_cap = os.environ.get("CTP_NUM_WORKERS")
    if env_cap is not None:
        workers = min(workers, max(1, int(env_cap)))
    tasks = [
        (str(out_dir), seed, i, T, H, W, K, p_mask, constraints, source) for i in range(n_clips)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_generate_one, tasks))
    else:
        records = [_generate_one(t) for t in tasks]

    manifest_path = out_dir / "manifest.jsonl"
    lines = [canonical_json(r) for r in sorted(records, key=lambda r: r["id"])]
    atomic_write_text(manifest_path, "\n".join(lines) + "\n")
    return manifest_path


def read_manifest(manifest_path: str | os.PathLike) -> list[dict[str, str]]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    records = []
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{manifest_path}:{line_no}: malformed manifest line") from exc
    return records
