"""Downstream evaluation: linear probes, clip retrieval, and a toy benchmark.

The toy benchmark is the desk-scale stand-in for real action datasets:
classes are defined purely by the *motion* of one overlaid shape
(sweeps along each axis, a diagonal sweep, or a zoom) while appearance
is randomized independently of the class, so a probe can only succeed
through motion-sensitive features - exactly what patch-tracking
pretraining claims to teach.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .compositor import (
    box_to_pixel_rect,
    procedural_background,
    read_clip,
    resize_bilinear,
    write_clip,
)
from .errors import ConfigError, DataError
from .geometry import Box
from .ioutil import atomic_write_text, canonical_json, derive_seed
from .model import CtpModel, normalize_frames
from .trainer import lr_at, TrainConfig

__all__ = [
    "ProbeConfig",
    "ProbeResult",
    "ToyVideo",
    "ToyBenchmark",
    "MOTION_CLASSES",
    "extract_video_feature",
    "extract_features",
    "retrieval_eval",
    "linear_probe",
    "make_toy_benchmark",
    "shuffle_labels",
    "write_feature_store",
    "read_feature_store",
    "save_toy_dataset",
    "load_toy_dataset",
]

logger = logging.getLogger(__name__)

MOTION_CLASSES = ("horizontal", "vertical", "diagonal", "zoom")

RETRIEVAL_POOL_SHAPE = (2, 3, 3)

_SEED_TAG_VIDEO = 41
_SEED_TAG_SPLIT = 43
_SEED_TAG_EPOCH = 47
_SEED_TAG_LABELS = 53


# ---------------------------------------------------------------------------
# Feature extraction


def _clip_starts(video_T: int, clip_T: int, n_clips: int) -> list[int]:
    if video_T < clip_T:
        raise DataError(f"video has {video_T} frames, need at least {clip_T}")
    if n_clips == 1:
        return [(video_T - clip_T) // 2]
    return [int(round(s)) for s in np.linspace(0, video_T - clip_T, n_clips)]


@torch.no_grad()
def extract_video_feature(model: CtpModel, frames: np.ndarray, n_clips: int = 10) -> np.ndarray:
    """Averaged retrieval feature of one video: adaptive-pooled encoder output.

    Uniformly samples ``n_clips`` windows, encodes each, pools the
    feature volume to 2 x 3 x 3 per channel, flattens, and averages.
    """
    clip_T = model.encoder_spec.input_T
    was_training = model.training
    model.eval()
    try:
        starts = _clip_starts(frames.shape[0], clip_T, n_clips)
        clips = np.stack([frames[s : s + clip_T] for s in starts])
        vols = model.encode(normalize_frames(clips, model.pixel_norm))
        pooled = F.adaptive_avg_pool3d(vols, RETRIEVAL_POOL_SHAPE)
        return pooled.flatten(1).mean(dim=0).numpy().astype(np.float32)
    finally:
        model.train(was_training)


def extract_features(model: CtpModel, videos: Sequence["ToyVideo"], n_clips: int = 10) -> np.ndarray:
    return np.stack([extract_video_feature(model, v.frames, n_clips) for v in videos])


# ---------------------------------------------------------------------------
# Retrieval


def retrieval_eval(
    gallery_features: np.ndarray,
    gallery_labels: Sequence[int],
    query_features: np.ndarray,
    query_labels: Sequence[int],
    ks: Sequence[int] = (1, 5),
) -> dict[int, float]:
    """Top-k retrieval accuracy under cosine similarity.

    A query scores a top-k hit when any of its k most similar gallery
    items shares its label. Ties rank the lower gallery index first.
    Zero-norm features get similarity -inf (and a log line).
    """
    gallery = np.asarray(gallery_features, dtype=np.float64)
    queries = np.asarray(query_features, dtype=np.float64)
    g_labels = np.asarray(gallery_labels)
    q_labels = np.asarray(query_labels)
    if gallery.size == 0 or queries.size == 0:
        raise ValueError("gallery and queries must be non-empty")

    g_norm = np.linalg.norm(gallery, axis=1)
    q_norm = np.linalg.norm(queries, axis=1)
    g_zero = g_norm == 0
    q_zero = q_norm == 0
    if g_zero.any() or q_zero.any():
        logger.warning(
            "zero-norm features: %d gallery, %d query; ranking them last",
            int(g_zero.sum()), int(q_zero.sum()),
        )
    sims = (queries / np.where(q_zero, 1.0, q_norm)[:, None]) @ (
        gallery / np.where(g_zero, 1.0, g_norm)[:, None]
    ).T
    sims[:, g_zero] = -np.inf
    sims[q_zero, :] = -np.inf

    hits = {k: 0 for k in ks}
    for qi in range(queries.shape[0]):
        order = np.argsort(-sims[qi], kind="stable")
        match = g_labels[order] == q_labels[qi]
        for k in ks:
            if match[:k].any():
                hits[k] += 1
    return {int(k): hits[k] / queries.shape[0] for k in ks}


# ---------------------------------------------------------------------------
# Toy benchmark


@dataclass
class ToyVideo:
    video_id: str
    label: int
    frames: np.ndarray  # (T, H, W, 3) uint8


@dataclass
class ToyBenchmark:
    videos: list[ToyVideo]
    n_classes: int
    class_names: tuple[str, ...]
    train_indices: list[int]
    test_indices: list[int]
    seed: int

    def labels(self, indices: Sequence[int]) -> np.ndarray:
        return np.asarray([self.videos[i].label for i in indices])


def _motion_boxes(rng: np.random.Generator, class_name: str, T: int) -> list[Box]:
    """Per-frame boxes realizing one motion class; appearance-free."""
    side = rng.uniform(0.24, 0.34)
    aspect = rng.uniform(0.8, 1.25)
    w = side * math.sqrt(aspect)
    h = side / math.sqrt(aspect)

    def sweep(extent: float, span: float, direction: int) -> tuple[float, float]:
        start = rng.uniform(extent / 2, 1 - extent / 2 - span)
        lo, hi = (start, start + span) if direction > 0 else (start + span, start)
        return lo, hi

    if class_name == "zoom":
        ratio = rng.uniform(1.9, 2.4)
        cx = rng.uniform(0.38, 0.62)
        cy = rng.uniform(0.38, 0.62)
        largest = min(0.5, 2 * min(cx, 1 - cx), 2 * min(cy, 1 - cy)) * 0.95
        final = rng.uniform(0.8, 1.0) * largest
        sizes = final / ratio * np.exp(np.linspace(0, math.log(ratio), T))
        if rng.random() < 0.5:
            sizes = sizes[::-1]
        return [Box(cx, cy, float(s) * math.sqrt(aspect), float(s) / math.sqrt(aspect)) for s in sizes]

    span = rng.uniform(0.30, 0.42)
    if class_name == "horizontal":
        x_lo, x_hi = sweep(w, span, 1 if rng.random() < 0.5 else -1)
        cy = rng.uniform(h / 2, 1 - h / 2)
        return [Box(float(x), cy, w, h) for x in np.linspace(x_lo, x_hi, T)]
    if class_name == "vertical":
        y_lo, y_hi = sweep(h, span, 1 if rng.random() < 0.5 else -1)
        cx = rng.uniform(w / 2, 1 - w / 2)
        return [Box(cx, float(y), w, h) for y in np.linspace(y_lo, y_hi, T)]
    if class_name == "diagonal":
        span_xy = span / math.sqrt(2)
        x_lo, x_hi = sweep(w, span_xy, 1 if rng.random() < 0.5 else -1)
        y_lo, y_hi = sweep(h, span_xy, 1 if rng.random() < 0.5 else -1)
        return [
            Box(float(x), float(y), w, h)
            for x, y in zip(np.linspace(x_lo, x_hi, T), np.linspace(y_lo, y_hi, T))
        ]
    raise ConfigError(f"unknown motion class {class_name!r}")


def _render_toy_video(rng: np.random.Generator, boxes: list[Box], T: int, H: int, W: int) -> np.ndarray:
    """Background plus one moving shape with class-independent appearance."""
    frames = procedural_background(rng, T, H, W)
    base = rng.uniform(0, 255, size=3)
    noise_sigma = rng.uniform(5, 60)
    texture = np.clip(
        base[None, None] + rng.normal(0, noise_sigma, size=(48, 48, 3)), 0, 255
    ).astype(np.uint8)
    use_ellipse = rng.random() < 0.5
    for i in range(T):
        y0, y1, x0, x1 = box_to_pixel_rect(boxes[i], H, W)
        patch = resize_bilinear(texture, y1 - y0, x1 - x0)
        if use_ellipse:
            hh, ww = patch.shape[:2]
            yy, xx = np.ogrid[:hh, :ww]
            mask = ((yy + 0.5 - hh / 2) / (hh / 2)) ** 2 + ((xx + 0.5 - ww / 2) / (ww / 2)) ** 2 <= 1
            region = frames[i, y0:y1, x0:x1]
            region[mask] = patch[mask]
        else:
            frames[i, y0:y1, x0:x1] = patch
    return frames


def make_toy_benchmark(
    seed: int,
    n_classes: int = 4,
    n_per_class: int = 50,
    T: int = 12,
    H: int = 64,
    W: int = 64,
) -> ToyBenchmark:
    """Deterministic motion-labeled corpus with a stratified 80/20 split."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if n_classes > len(MOTION_CLASSES):
        raise ConfigError(f"at most {len(MOTION_CLASSES)} motion classes available")
    videos: list[ToyVideo] = []
    for label in range(n_classes):
        for j in range(n_per_class):
            rng = np.random.default_rng(derive_seed(seed, label, j, _SEED_TAG_VIDEO))
            boxes = _motion_boxes(rng, MOTION_CLASSES[label], T)
            frames = _render_toy_video(rng, boxes, T, H, W)
            videos.append(ToyVideo(f"toy_{MOTION_CLASSES[label]}_{j:04d}", label, frames))

    split_rng = np.random.default_rng(derive_seed(seed, _SEED_TAG_SPLIT))
    train_indices: list[int] = []
    test_indices: list[int] = []
    n_train = int(round(n_per_class * 0.8))
    for label in range(n_classes):
        members = [i for i, v in enumerate(videos) if v.label == label]
        order = split_rng.permutation(len(members))
        train_indices.extend(members[i] for i in order[:n_train])
        test_indices.extend(members[i] for i in order[n_train:])
    return ToyBenchmark(
        videos=videos,
        n_classes=n_classes,
        class_names=MOTION_CLASSES[:n_classes],
        train_indices=sorted(train_indices),
        test_indices=sorted(test_indices),
        seed=seed,
    )


def shuffle_labels(benchmark: ToyBenchmark, seed: int) -> ToyBenchmark:
    """Control benchmark: labels randomly reassigned across videos."""
    rng = np.random.default_rng(derive_seed(seed, _SEED_TAG_LABELS))
    labels = np.asarray([v.label for v in benchmark.videos])
    shuffled = labels[rng.permutation(len(labels))]
    videos = [replace(v, label=int(l)) for v, l in zip(benchmark.videos, shuffled)]
    return replace(benchmark, videos=videos)


# ---------------------------------------------------------------------------
# Linear probe


@dataclass(frozen=True)
class ProbeConfig:
    """Classifier training protocol (full-scale reference: 150 epochs,
    milestones at 60/120, lr 0.01, weight decay 5e-4; desk defaults keep
    the milestone ratios at a fifth the length)."""

    epochs: int = 30
    base_lr: float = 0.01
    lr_decay: float = 0.1
    lr_milestones: tuple[int, ...] = (12, 24)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    mode: str = "frozen"  # "frozen" | "finetune"
    train_clips_per_video: int = 2
    eval_clips_per_video: int = 3
    augment: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("frozen", "finetune"):
            raise ConfigError(f"unknown probe mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if any(m >= self.epochs for m in self.lr_milestones):
            raise ConfigError("lr_milestones must be < epochs")

    def _schedule(self) -> TrainConfig:
        # Reuse the milestone schedule; only the lr fields matter here.
        return TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            lr_decay=self.lr_decay,
            lr_milestones=self.lr_milestones,
            seed=self.seed,
        )


@dataclass
class ProbeResult:
    top1: float
    mode: str
    n_train_clips: int
    n_test_videos: int
    final_train_loss: float


@torch.no_grad()
def _global_avg_features(model: CtpModel, clips: np.ndarray, batch: int = 32) -> torch.Tensor:
    """Spatially and temporally averaged encoder features, (N, C)."""
    outs = []
    for lo in range(0, clips.shape[0], batch):
        x = normalize_frames(clips[lo : lo + batch], model.pixel_norm)
        outs.append(model.encode(x).mean(dim=(2, 3, 4)))
    return torch.cat(outs)


def _augment_clip(rng: np.random.Generator, frames: np.ndarray) -> np.ndarray:
    """Random resized crop + horizontal flip + channel gain jitter."""
    t, h, w, _ = frames.shape
    scale = rng.uniform(0.8, 1.0)
    ch, cw = int(round(h * scale)), int(round(w * scale))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    out = np.stack([resize_bilinear(f[y0 : y0 + ch, x0 : x0 + cw], h, w) for f in frames])
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    gains = rng.uniform(0.8, 1.2, size=3)
    return np.clip(out.astype(np.float64) * gains, 0, 255).astype(np.uint8)


def train_linear_classifier(
    features: torch.Tensor,
    labels: torch.Tensor,
    n_classes: int,
    cfg: ProbeConfig,
) -> tuple[nn.Linear, float]:
    """SGD-train an affine classifier on fixed features; returns final loss."""
    torch.manual_seed(cfg.seed)
    clf = nn.Linear(features.shape[1], n_classes)
    opt = torch.optim.SGD(
        clf.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    schedule = cfg._schedule()
    loss_value = float("nan")
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, schedule)
        for g in opt.param_groups:
            g["lr"] = lr
        order = np.random.default_rng(derive_seed(cfg.seed, epoch, _SEED_TAG_EPOCH)).permutation(
            features.shape[0]
        )
        for lo in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[lo : lo + cfg.batch_size].copy())
            loss = F.cross_entropy(clf(features[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_value = float(loss.detach())
    return clf, loss_value


def _video_clips(video: ToyVideo, clip_T: int, n_clips: int) -> np.ndarray:
    starts = _clip_starts(video.frames.shape[0], clip_T, n_clips)
    return np.stack([video.frames[s : s + clip_T] for s in starts])


def linear_probe(model: CtpModel, benchmark: ToyBenchmark, cfg: ProbeConfig) -> ProbeResult:
    """Classify toy videos from globally averaged encoder features.

    Frozen mode trains only the affine classifier; finetune mode updates
    the (copied) encoder jointly. Inference averages the logits of
    uniformly picked clips per video.
    """
    labels = [v.label for v in benchmark.videos]
    if max(labels) >= benchmark.n_classes or min(labels) < 0:
        raise DataError("video labels exceed the declared class count")
    clip_T = model.encoder_spec.input_T

    def gather(indices: Sequence[int], n_clips: int, augment_rng=None) -> tuple[np.ndarray, torch.Tensor]:
        clips, ys = [], []
        for i in indices:
            arr = _video_clips(benchmark.videos[i], clip_T, n_clips)
            if augment_rng is not None:
                arr = np.stack([_augment_clip(augment_rng, c) for c in arr])
            clips.append(arr)
            ys.extend([benchmark.videos[i].label] * arr.shape[0])
        return np.concatenate(clips), torch.tensor(ys)

    train_clips, train_y = gather(benchmark.train_indices, cfg.train_clips_per_video)

    if cfg.mode == "frozen":
        feats = _global_avg_features(model, train_clips)
        clf, final_loss = train_linear_classifier(feats, train_y, benchmark.n_classes, cfg)
        eval_model = model
    else:
        eval_model = copy.deepcopy(model)
        eval_model.train()
        torch.manual_seed(cfg.seed)
        clf = nn.Linear(eval_model.encoder_spec.channels, benchmark.n_classes)
        from .trainer import split_decay_params

        decay, no_decay = split_decay_params(eval_model.encoder)
        decay.append(clf.weight)
        no_decay.append(clf.bias)
        opt = torch.optim.SGD(
            [
                {"params": decay, "weight_decay": cfg.weight_decay},
                {"params": no_decay, "weight_decay": 0.0},
            ],
            lr=cfg.base_lr,
            momentum=cfg.momentum,
        )
        schedule = cfg._schedule()
        final_loss = float("nan")
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, schedule)
            for g in opt.param_groups:
                g["lr"] = lr
            rng = np.random.default_rng(derive_seed(cfg.seed, epoch, _SEED_TAG_EPOCH))
            order = rng.permutation(train_clips.shape[0])
            epoch_clips = train_clips
            if cfg.augment:
                epoch_clips = np.stack([_augment_clip(rng, c) for c in train_clips])
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                x = normalize_frames(epoch_clips[idx], eval_model.pixel_norm)
                pooled = eval_model.encode(x).mean(dim=(2, 3, 4))
                loss = F.cross_entropy(clf(pooled), train_y[torch.from_numpy(idx.copy())])
                opt.zero_grad()
                loss.backward()
                opt.step()
                final_loss = float(loss.detach())
        eval_model.eval()

    # Inference: average logits over uniformly picked clips per video.
    correct = 0
    for i in benchmark.test_indices:
        clips = _video_clips(benchmark.videos[i], clip_T, cfg.eval_clips_per_video)
        feats = _global_avg_features(eval_model, clips)
        logits = clf(feats).mean(dim=0)
        correct += int(logits.argmax()) == benchmark.videos[i].label
    return ProbeResult(
        top1=correct / len(benchmark.test_indices),
        mode=cfg.mode,
        n_train_clips=int(train_clips.shape[0]),
        n_test_videos=len(benchmark.test_indices),
        final_train_loss=final_loss,
    )


# ---------------------------------------------------------------------------
# On-disk formats


def write_feature_store(base_path: str | Path, features: np.ndarray, video_ids: Sequence[str], labels: Sequence[int]) -> tuple[Path, Path]:
    """float32 vectors in <base>.bin plus a JSON index in <base>.json."""
    base = Path(base_path)
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2 or len(video_ids) != features.shape[0] or len(labels) != features.shape[0]:
        raise ValueError("features must be (N, D) aligned with ids and labels")
    from .ioutil import atomic_write_bytes

    bin_path = base.with_suffix(".bin")
    index_path = base.with_suffix(".json")
    atomic_write_bytes(bin_path, features.tobytes())
    row = features.shape[1] * 4
    index = {
        "dim": int(features.shape[1]),
        "count": int(features.shape[0]),
        "dtype": "float32",
        "entries": [
            {"video_id": vid, "label": int(lab), "offset": i * row}
            for i, (vid, lab) in enumerate(zip(video_ids, labels))
        ],
    }
    atomic_write_text(index_path, canonical_json(index) + "\n")
    return bin_path, index_path


def read_feature_store(base_path: str | Path) -> tuple[np.ndarray, list[str], np.ndarray]:
    base = Path(base_path)
    index_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    if not index_path.is_file() or not bin_path.is_file():
        raise DataError(f"feature store incomplete at {base}")
    index = json.loads(index_path.read_text())
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    features = raw.reshape(index["count"], index["dim"]).copy()
    ids = [e["video_id"] for e in index["entries"]]
    labels = np.asarray([e["label"] for e in index["entries"]])
    return features, ids, labels


def save_toy_dataset(benchmark: ToyBenchmark, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    labels_lines = []
    for i, video in enumerate(benchmark.videos):
        write_clip(out_dir / "clips" / f"{video.video_id}.ctpc", video.frames)
        labels_lines.append(
            canonical_json(
                {
                    "id": video.video_id,
                    "label": video.label,
                    "class_name": benchmark.class_names[video.label]
                    if video.label < len(benchmark.class_names)
                    else str(video.label),
                    "split": "train" if i in set(benchmark.train_indices) else "test",
                }
            )
        )
    atomic_write_text(out_dir / "labels.jsonl", "\n".join(labels_lines) + "\n")
    meta = {
        "n_classes": benchmark.n_classes,
        "class_names": list(benchmark.class_names),
        "seed": benchmark.seed,
        "train_ids": [benchmark.videos[i].video_id for i in benchmark.train_indices],
        "test_ids": [benchmark.videos[i].video_id for i in benchmark.test_indices],
    }
    atomic_write_text(out_dir / "meta.json", canonical_json(meta) + "\n")
    return out_dir


def load_toy_dataset(path: str | Path) -> ToyBenchmark:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"not a toy dataset directory: {path}")
    meta = json.loads(meta_path.read_text())
    videos = []
    by_id = {}
    with open(path / "labels.jsonl", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            frames = read_clip(path / "clips" / f"{rec['id']}.ctpc")
            by_id[rec["id"]] = len(videos)
            videos.append(ToyVideo(rec["id"], int(rec["label"]), frames))
    return ToyBenchmark(
        videos=videos,
        n_classes=int(meta["n_classes"]),
        class_names=tuple(meta["class_names"]),
        train_indices=[by_id[i] for i in meta["train_ids"]],
        test_indices=[by_id[i] for i in meta["test_ids"]],
        seed=int(meta["seed"]),
    )
