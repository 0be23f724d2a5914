"""Pretraining loop: data -> model -> loss under an SGD milestone schedule.

Everything is deterministic given (seed, config, dataset): data
randomness is derived statelessly from (seed, epoch, clip index), the
epoch shuffle from (seed, epoch), and model initialization from the
seed, so a run resumed from any checkpoint reproduces the uninterrupted
run bit for bit on the same platform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .compositor import (
    ClipSource,
    ProceduralSource,
    read_clip,
    read_manifest,
    sidecar_to_clip_truth,
    synthesize_training_clip,
)
from .errors import ConfigError, DataError, NumericError
from .geometry import DEFAULT_SIGMAS, Sigmas
from .ioutil import atomic_write_text, config_hash, derive_seed
from .model import CtpModel, EncoderSpec, HeadSpec, PixelNorm, normalize_frames
from .objective import batch_loss
from .trajsynth import TrajectoryConstraints

__all__ = [
    "TrainConfig",
    "DatasetHandle",
    "PretrainData",
    "lr_at",
    "split_decay_params",
    "build_optimizer",
    "pretrain",
    "evaluate_tracking",
]

_SEED_TAG_SHUFFLE = 31
_SEED_TAG_SYNTH = 37


@dataclass(frozen=True)
class TrainConfig:
    """Pretraining hyperparameters (desk-scale defaults).

    The reference schedule at full scale is 300 epochs with decay
    milestones at 100 and 200; the desk defaults keep the same
    proportions at a tenth the length.
    """

    epochs: int = 30
    base_lr: float = 0.01
    lr_decay: float = 0.1
    lr_milestones: tuple[int, ...] = (10, 20)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    clip_T: int = 8
    clip_H: int = 64
    clip_W: int = 64
    frame_interval_range: tuple[int, int] = (1, 5)
    K: int = 3
    p_mask: float = 0.2
    seed: int = 0
    clips_per_epoch: int = 64
    checkpoint_every: int = 10
    constraints: TrajectoryConstraints = TrajectoryConstraints()

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)):
            raise ConfigError(f"lr_milestones must be strictly increasing, got {self.lr_milestones}")
        if any(m >= self.epochs or m < 0 for m in self.lr_milestones):
            raise ConfigError(f"lr_milestones must lie in [0, epochs), got {self.lr_milestones}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if not 0 <= self.p_mask < 1:
            raise ConfigError(f"p_mask must be in [0, 1), got {self.p_mask}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Milestone schedule: base_lr decays by lr_decay at each milestone."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    n_passed = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.base_lr * cfg.lr_decay**n_passed


@dataclass
class DatasetHandle:
    """Where training clips come from.

    "pregenerated": fixed clips read from a manifest (determinism audits
    and benchmarking). "onthefly": clips synthesized per epoch with
    epoch-varying seeds, so patches and trajectories change every epoch
    while the underlying source frames stay fixed per index.
    """

    mode: str = "onthefly"
    manifest_path: Path | None = None
    clips_per_epoch: int | None = None
    source: ClipSource = field(default_factory=ProceduralSource)

    def __post_init__(self) -> None:
        if self.mode not in ("pregenerated", "onthefly"):
            raise ConfigError(f"unknown dataset mode {self.mode!r}")
        if self.mode == "pregenerated" and self.manifest_path is None:
            raise ConfigError("pregenerated mode needs a manifest_path")

    def descriptor(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "manifest": str(self.manifest_path) if self.manifest_path else None,
            "clips_per_epoch": self.clips_per_epoch,
            "source": getattr(self.source, "kind", None),
        }


class PretrainData:
    """Materializes (frames, queries, ground truth) arrays per clip index."""

    def __init__(self, handle: DatasetHandle, cfg: TrainConfig):
        self.handle = handle
        self.cfg = cfg
        if handle.mode == "pregenerated":
            self.records = read_manifest(handle.manifest_path)
            if not self.records:
                raise DataError(f"empty dataset manifest: {handle.manifest_path}")
            self.base = Path(handle.manifest_path).parent
            self.n_clips = len(self.records)
        else:
            if not handle.clips_per_epoch and not cfg.clips_per_epoch:
                raise ConfigError("onthefly mode needs clips_per_epoch")
            self.n_clips = handle.clips_per_epoch or cfg.clips_per_epoch

    def __len__(self) -> int:
        return self.n_clips

    def clip_arrays(self, epoch: int, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, str]:
        """Returns (frames uint8 (T,H,W,3), queries (K,4), gt (K,T,4), clip id)."""
        cfg = self.cfg
        if self.handle.mode == "pregenerated":
            rec = self.records[index]
            frames = read_clip(self.base / rec["clip_path"])
            with open(self.base / rec["sidecar_path"], encoding="utf-8") as f:
                trajs, _, _ = sidecar_to_clip_truth(json.load(f))
            clip_id = rec["id"]
        else:
            raw = self.handle.source.raw_clip(cfg.seed, index, cfg.clip_T, cfg.clip_H, cfg.clip_W)
            clip = synthesize_training_clip(
                derive_seed(cfg.seed, epoch, index, _SEED_TAG_SYNTH),
                raw,
                cfg.K,
                cfg.constraints,
                cfg.p_mask,
            )
            frames, trajs = clip.frames, clip.trajectories
            clip_id = f"epoch{epoch}:clip{index:06d}"
        gt = np.asarray(
            [[b.as_tuple() for b in t.boxes] for t in trajs], dtype=np.float32
        )
        return frames, gt[:, 0].copy(), gt, clip_id

    def batches(
        self, epoch: int
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[str]]]:
        """Shuffled batches of stacked clip tensors (queries/gt still raw)."""
        order = np.random.default_rng(
            derive_seed(self.cfg.seed, epoch, _SEED_TAG_SHUFFLE)
        ).permutation(self.n_clips)
        bs = self.cfg.batch_size
        for lo in range(0, self.n_clips, bs):
            chunk = [self.clip_arrays(epoch, int(i)) for i in order[lo : lo + bs]]
            frames = np.stack([c[0] for c in chunk])
            queries = torch.from_numpy(np.stack([c[1] for c in chunk]))
            gt = torch.from_numpy(np.stack([c[2] for c in chunk]))
            yield frames, queries, gt, [c[3] for c in chunk]


def split_decay_params(model: torch.nn.Module) -> tuple[list, list]:
    """Weight-decay groups: matrices/kernels decay, 1-D parameters do not.

    The exclusion list is exactly the parameters with ndim <= 1: all
    biases and all normalization scales/offsets.
    """
    decay = [p for p in model.parameters() if p.requires_grad and p.ndim > 1]
    no_decay = [p for p in model.parameters() if p.requires_grad and p.ndim <= 1]
    return decay, no_decay


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    decay, no_decay = split_decay_params(model)
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.base_lr,
        momentum=cfg.momentum,
    )


def full_config_dict(cfg: TrainConfig, model: CtpModel, data: DatasetHandle) -> dict[str, Any]:
    d = asdict(cfg)
    d["constraints"] = asdict(cfg.constraints)
    return {"train": d, "model": model.config_snapshot(), "data": data.descriptor()}


def _save_train_checkpoint(
    path: Path,
    model: CtpModel,
    optimizer: torch.optim.SGD,
    cfg_dict: dict,
    cfg_hash: str,
    epoch: int,
    global_step: int,
) -> Path:
    return save_checkpoint(
        path,
        {
            "config": cfg_dict,
            "config_hash": cfg_hash,
            "epoch": epoch,
            "global_step": global_step,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
        },
    )


def load_model_from_checkpoint(path: str | Path, force: bool = False) -> tuple[CtpModel, dict]:
    """Rebuild a CtpModel (eval-ready) from a checkpoint's config snapshot."""
    state = load_checkpoint(path, force=force)
    mc = state["config"]["model"]
    model = CtpModel(
        EncoderSpec(**{**mc["encoder"], "stage_channels": tuple(mc["encoder"]["stage_channels"])}),
        HeadSpec(**mc["head"]),
        Sigmas(**mc["sigmas"]),
        PixelNorm(**{k: tuple(v) for k, v in mc["pixel_norm"].items()}),
    )
    model.load_state_dict(state["model"])
    model.eval()
    return model, state


def pretrain(
    cfg: TrainConfig,
    data: DatasetHandle,
    encoder_spec: EncoderSpec,
    head_spec: HeadSpec,
    out_dir: str | Path,
    sigmas: Sigmas = DEFAULT_SIGMAS,
    pixel_norm: PixelNorm = PixelNorm(),
    resume: str | Path | None = None,
    force: bool = False,
    log_stream=None,
) -> Path:
    """Run the pretraining loop; returns the final checkpoint path.

    Writes a JSON-lines training log and periodic checkpoints into
    ``out_dir``. With ``resume``, restores model/optimizer/epoch/rng
    state and continues; the result is bit-identical to the
    uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = CtpModel(encoder_spec, head_spec, sigmas, pixel_norm)
    optimizer = build_optimizer(model, cfg)
    dataset = PretrainData(data, cfg)
    cfg_dict = full_config_dict(cfg, model, data)
    cfg_hash = config_hash(cfg_dict)

    start_epoch = 0
    global_step = 0
    if resume is not None:
        state = load_checkpoint(resume, expected_config_hash=cfg_hash, force=force)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"].to(torch.uint8))
        start_epoch = int(state["epoch"])
        global_step = int(state["global_step"])

    model.train()
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a", encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for frames, queries, gt, clip_ids in dataset.batches(epoch):
                clips = normalize_frames(frames, pixel_norm)
                _, pred = model(clips, queries)
                report = batch_loss(gt, pred, sigmas)
                if not torch.isfinite(report.total):
                    dump = {"epoch": epoch, "step": global_step, "clips": clip_ids,
                            "components": report.scalars()}
                    atomic_write_text(out_dir / "nan_dump.json", json.dumps(dump, indent=2))
                    raise NumericError(
                        f"non-finite loss at step {global_step} (clips {clip_ids}); "
                        f"diagnostics in {out_dir / 'nan_dump.json'}"
                    )
                optimizer.zero_grad()
                report.total.backward()
                optimizer.step()
                global_step += 1
                record = {"step": global_step, "epoch": epoch, **report.scalars(), "lr": lr}
                line = json.dumps(record, sort_keys=True)
                log.write(line + "\n")
                if log_stream is not None:
                    print(line, file=log_stream)
            if (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.epochs:
                _save_train_checkpoint(
                    out_dir / f"ckpt_ep{epoch + 1:04d}.ctpk",
                    model, optimizer, cfg_dict, cfg_hash, epoch + 1, global_step,
                )
        final = _save_train_checkpoint(
            out_dir / "final.ctpk", model, optimizer, cfg_dict, cfg_hash, cfg.epochs, global_step
        )
    return final


@torch.no_grad()
def evaluate_tracking(model: CtpModel, data: DatasetHandle, cfg: TrainConfig, epoch: int = 0) -> dict[str, float]:
    """Mean decoded-box IoU against ground truth over one epoch of clips."""
    from .geometry import Box, iou

    dataset = PretrainData(data, cfg)
    was_training = model.training
    model.eval()
    ious: list[float] = []
    losses: list[float] = []
    try:
        for index in range(len(dataset)):
            frames, queries, gt, _ = dataset.clip_arrays(epoch, index)
            clips = normalize_frames(frames[None], model.pixel_norm)
            _, pred = model(clips, torch.from_numpy(queries[None]))
            losses.append(float(batch_loss(torch.from_numpy(gt[None]), pred, model.sigmas).total))
            pred_np = pred[0].numpy()
            for k in range(gt.shape[0]):
                for t in range(gt.shape[1]):
                    ious.append(iou(Box(*gt[k, t]), Box(*pred_np[k, t])))
    finally:
        model.train(was_training)
    return {"mean_iou": float(np.mean(ious)), "loss": float(np.mean(losses))}
