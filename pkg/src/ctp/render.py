"""Static inspection renderings: frames with ground-truth box overlays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .compositor import box_to_pixel_rect, read_clip, sidecar_to_clip_truth
from .errors import DataError
from .geometry import Box

__all__ = ["draw_box", "annotate_frames", "contact_sheet", "render_inspection"]

PALETTE = (
    (255, 64, 64),
    (64, 255, 64),
    (96, 96, 255),
    (255, 224, 32),
    (255, 64, 255),
    (64, 255, 255),
)


def draw_box(frame: np.ndarray, box: Box, color, style: str = "solid") -> None:
    """Draw a 1 px box outline in place; "corners" draws tick marks only."""
    h, w = frame.shape[:2]
    y0, y1, x0, x1 = box_to_pixel_rect(box, h, w)
    y1 -= 1
    x1 -= 1
    color = np.asarray(color, dtype=np.uint8)
    if style == "solid":
        frame[y0, x0 : x1 + 1] = color
        frame[y1, x0 : x1 + 1] = color
        frame[y0 : y1 + 1, x0] = color
        frame[y0 : y1 + 1, x1] = color
        return
    if style != "corners":
        raise ValueError(f"unknown draw style {style!r}")
    tick = max(2, min(x1 - x0, y1 - y0) // 4)
    for yy, xx, dy, dx in ((y0, x0, 1, 1), (y0, x1, 1, -1), (y1, x0, -1, 1), (y1, x1, -1, -1)):
        frame[yy, xx : xx + dx * tick : dx] = color
        frame[yy : yy + dy * tick : dy, xx] = color
    # Center dot marking a masked (not pasted) frame.
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    frame[max(cy - 1, 0) : cy + 2, max(cx - 1, 0) : cx + 2] = color


def annotate_frames(frames: np.ndarray, trajectories) -> np.ndarray:
    """Copy of frames with each trajectory's boxes drawn, masked frames marked."""
    out = frames.copy()
    for k, traj in enumerate(trajectories):
        color = PALETTE[k % len(PALETTE)]
        for i in range(len(traj.boxes)):
            style = "solid" if traj.visible[i] else "corners"
            draw_box(out[i], traj.boxes[i], color, style)
    return out


def contact_sheet(frames: np.ndarray, cols: int = 8, pad: int = 2) -> np.ndarray:
    """Tile (T, H, W, 3) frames into a single grid image."""
    t, h, w, _ = frames.shape
    cols = min(cols, t)
    rows = (t + cols - 1) // cols
    sheet = np.full(
        (rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, 3), 24, dtype=np.uint8
    )
    for i in range(t):
        r, c = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        sheet[y : y + h, x : x + w] = frames[i]
    return sheet


def render_inspection(
    clip_path: str | Path,
    sidecar_path: str | Path,
    out_path: str | Path,
    frames_dir: str | Path | None = None,
) -> Path:
    """Write a contact-sheet PNG (and optional per-frame PNGs) for one clip."""
    from PIL import Image

    clip_path = Path(clip_path)
    sidecar_path = Path(sidecar_path)
    if not sidecar_path.is_file():
        raise DataError(f"sidecar not found: {sidecar_path}")
    frames = read_clip(clip_path)
    trajs, _, _ = sidecar_to_clip_truth(json.loads(sidecar_path.read_text()))
    annotated = annotate_frames(frames, trajs)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(contact_sheet(annotated)).save(out_path)
    if frames_dir is not None:
        frames_dir = Path(frames_dir)
        frames_dir.mkdir(parents=True, exist_ok=True)
        for i in range(annotated.shape[0]):
            Image.fromarray(annotated[i]).save(frames_dir / f"frame_{i:03d}.png")
    return out_path
