"""Operator surface: dataset generation, pretraining, evaluation, inspection.

Every command resolves its configuration (YAML file plus flag
overrides), writes an immutable run manifest before any long work
starts, and exits with a distinct code per failure class: 2 for config
errors, 3 for data errors, 4 for numeric failures.

Run manifests land in a separate runs directory (never inside --out) so
artifact directories stay bit-reproducible across identical seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .compositor import FrameFolderSource, ProceduralSource, generate_dataset
from .config import (
    GenerateConfig,
    RetrievalConfig,
    config_help,
    dataclass_from_mapping,
    load_config_file,
    section,
)
from .errors import ConfigError, DataError, NumericError
from .ioutil import atomic_write_text, canonical_json, config_hash
from .model import CtpModel
from .trainer import (
    DatasetHandle,
    evaluate_tracking,
    load_model_from_checkpoint,
    pretrain,
)
from .transfer import (
    extract_features,
    linear_probe,
    load_toy_dataset,
    make_toy_benchmark,
    retrieval_eval,
    save_toy_dataset,
    shuffle_labels,
    write_feature_store,
)

__all__ = ["main"]


@dataclass
class RunManifest:
    """What a command is about to do; written before the work, then frozen."""

    command: str
    argv: list[str]
    seed: int | None
    config: dict
    config_hash: str
    code_version: str
    started_at: str
    outputs: list[str]


def write_run_manifest(runs_dir: str | Path, manifest: RunManifest) -> Path:
    runs_dir = Path(runs_dir)
    runs_dir.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    path = runs_dir / f"{manifest.command}-{stamp}-{os.getpid()}.json"
    atomic_write_text(path, json.dumps(dataclasses.asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


def _manifest(args, command: str, config: dict, outputs: list[str], seed: int | None) -> None:
    write_run_manifest(
        args.runs_dir,
        RunManifest(
            command=command,
            argv=sys.argv[1:],
            seed=seed,
            config=config,
            config_hash=config_hash(config),
            code_version=__version__,
            started_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            outputs=outputs,
        ),
    )


def _load_metrics_schema() -> dict:
    from importlib.resources import files

    return json.loads(files("ctp.schemas").joinpath("metrics.schema.json").read_text())


def write_metrics(path: str | Path, command: str, seed: int, cfg_hash: str, metrics: dict, artifacts: dict | None = None) -> Path:
    """Validate against the shipped schema, then write atomically."""
    import jsonschema

    doc = {
        "command": command,
        "seed": int(seed),
        "config_hash": cfg_hash,
        "metrics": metrics,
        "artifacts": {k: str(v) for k, v in (artifacts or {}).items()},
    }
    jsonschema.validate(doc, _load_metrics_schema())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _resolve_out(args, command: str) -> Path:
    return Path(args.out) if args.out else Path("ctp_out") / command


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    config = load_config_file(args.config)
    gen = section(
        config,
        "generate",
        {
            "seed": args.seed,
            "n_clips": args.n_clips,
            "K": args.k,
            "p_mask": args.p_mask,
            "workers": args.workers,
        },
    )
    constraints = section(config, "constraints")
    out_dir = _resolve_out(args, "dataset")
    if args.dry_run:
        print(
            f"would write {gen.n_clips} clips of {gen.T}x{gen.H}x{gen.W} "
            f"(K={gen.K}, p_mask={gen.p_mask}, seed={gen.seed}) to {out_dir}"
        )
        return 0
    resolved = {"generate": dataclasses.asdict(gen), "constraints": dataclasses.asdict(constraints)}
    _manifest(args, "generate", resolved, [str(out_dir)], gen.seed)
    source = (
        ProceduralSource()
        if gen.source == "procedural"
        else FrameFolderSource(Path(gen.frames_dir))
    )
    manifest_path = generate_dataset(
        out_dir,
        n_clips=gen.n_clips,
        T=gen.T,
        H=gen.H,
        W=gen.W,
        K=gen.K,
        p_mask=gen.p_mask,
        constraints=constraints,
        seed=gen.seed,
        source=source,
        workers=gen.workers,
    )
    print(f"wrote {gen.n_clips} clips; manifest at {manifest_path}")
    return 0


def _model_sections(config: dict, train) -> tuple:
    encoder_data = dict(config.get("encoder", {}) or {})
    encoder_data.setdefault("input_T", train.clip_T)
    encoder_data.setdefault("input_H", train.clip_H)
    encoder_data.setdefault("input_W", train.clip_W)
    head_data = dict(config.get("head", {}) or {})
    head_data.setdefault("out_T", train.clip_T)
    from .model import EncoderSpec, HeadSpec

    encoder = dataclass_from_mapping(EncoderSpec, encoder_data, "encoder")
    head = dataclass_from_mapping(HeadSpec, head_data, "head")
    sigmas = section(config, "sigmas")
    pixel_norm = section(config, "pixel_norm")
    return encoder, head, sigmas, pixel_norm


def _data_handle(config: dict, train) -> DatasetHandle:
    data = dict(config.get("data", {}) or {})
    mode = data.get("mode", "onthefly")
    if mode == "pregenerated":
        manifest = data.get("manifest")
        if not manifest:
            raise ConfigError("data.mode 'pregenerated' needs data.manifest")
        return DatasetHandle(mode=mode, manifest_path=Path(manifest))
    if mode == "onthefly":
        source = data.get("source", "procedural")
        if source == "frames":
            frames_dir = data.get("frames_dir")
            if not frames_dir:
                raise ConfigError("data.source 'frames' needs data.frames_dir")
            src = FrameFolderSource(Path(frames_dir), train.frame_interval_range)
        elif source == "procedural":
            src = ProceduralSource()
        else:
            raise ConfigError(f"unknown data.source {source!r}")
        return DatasetHandle(
            mode=mode, clips_per_epoch=data.get("clips_per_epoch", train.clips_per_epoch), source=src
        )
    raise ConfigError(f"unknown data.mode {mode!r}")


def cmd_pretrain(args) -> int:
    config = load_config_file(args.config)
    train = section(config, "train", {"seed": args.seed})
    encoder, head, sigmas, pixel_norm = _model_sections(config, train)
    handle = _data_handle(config, train)
    out_dir = _resolve_out(args, "pretrain")
    resolved = {
        "train": dataclasses.asdict(train),
        "encoder": dataclasses.asdict(encoder),
        "head": dataclasses.asdict(head),
        "sigmas": dataclasses.asdict(sigmas),
        "pixel_norm": dataclasses.asdict(pixel_norm),
        "data": handle.descriptor(),
    }
    _manifest(args, "pretrain", resolved, [str(out_dir)], train.seed)
    final = pretrain(
        train,
        handle,
        encoder,
        head,
        out_dir,
        sigmas=sigmas,
        pixel_norm=pixel_norm,
        resume=args.resume,
        force=args.force,
        log_stream=sys.stdout if args.verbose else None,
    )
    model, state = load_model_from_checkpoint(final)
    scores = evaluate_tracking(model, handle, train)
    metrics_path = write_metrics(
        out_dir / "metrics.json",
        "pretrain",
        train.seed,
        config_hash(resolved),
        {"final_loss": scores["loss"], "mean_iou": scores["mean_iou"], "steps": state["global_step"]},
        {"checkpoint": final},
    )
    print(f"pretraining done: checkpoint {final}, metrics {metrics_path}")
    return 0


def _probe_model(args, config: dict, probe_seed: int) -> CtpModel:
    if args.checkpoint:
        model, _ = load_model_from_checkpoint(args.checkpoint, force=args.force)
        return model
    if not args.random_init:
        raise ConfigError("probe needs --checkpoint or --random-init")
    train = section(config, "train", {"seed": probe_seed})
    encoder, head, sigmas, pixel_norm = _model_sections(config, train)
    torch.manual_seed(probe_seed)
    model = CtpModel(encoder, head, sigmas, pixel_norm)
    model.eval()
    return model


def cmd_probe(args) -> int:
    config = load_config_file(args.config)
    probe = section(config, "probe", {"seed": args.seed})
    if not args.data:
        raise ConfigError("probe needs --data pointing at a toy dataset directory")
    benchmark = load_toy_dataset(Path(args.data))
    if args.shuffle_labels:
        benchmark = shuffle_labels(benchmark, probe.seed)
    model = _probe_model(args, config, probe.seed)
    out_dir = _resolve_out(args, "probe")
    resolved = {
        "probe": dataclasses.asdict(probe),
        "data": str(args.data),
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "random_init": bool(args.random_init),
        "shuffle_labels": bool(args.shuffle_labels),
    }
    _manifest(args, "probe", resolved, [str(out_dir)], probe.seed)
    result = linear_probe(model, benchmark, probe)
    metrics_path = write_metrics(
        out_dir / "metrics.json",
        "probe",
        probe.seed,
        config_hash(resolved),
        {
            "top1": result.top1,
            "mode": result.mode,
            "n_train_clips": result.n_train_clips,
            "n_test_videos": result.n_test_videos,
            "final_train_loss": result.final_train_loss,
        },
    )
    print(f"probe top-1 accuracy: {result.top1:.3f} ({result.mode}); metrics {metrics_path}")
    return 0


def cmd_eval_retrieval(args) -> int:
    config = load_config_file(args.config)
    retrieval = section(config, "retrieval", {"seed": args.seed})
    if not args.checkpoint:
        raise ConfigError("eval-retrieval needs --checkpoint")
    if not args.data:
        raise ConfigError("eval-retrieval needs --data pointing at a toy dataset directory")
    benchmark = load_toy_dataset(Path(args.data))
    model, _ = load_model_from_checkpoint(args.checkpoint, force=args.force)
    out_dir = _resolve_out(args, "retrieval")
    resolved = {
        "retrieval": dataclasses.asdict(retrieval),
        "data": str(args.data),
        "checkpoint": str(args.checkpoint),
    }
    _manifest(args, "eval-retrieval", resolved, [str(out_dir)], retrieval.seed)

    train_videos = [benchmark.videos[i] for i in benchmark.train_indices]
    test_videos = [benchmark.videos[i] for i in benchmark.test_indices]
    gallery = extract_features(model, train_videos, retrieval.n_clips_per_video)
    queries = extract_features(model, test_videos, retrieval.n_clips_per_video)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_feature_store(
        out_dir / "gallery", gallery, [v.video_id for v in train_videos],
        [v.label for v in train_videos],
    )
    write_feature_store(
        out_dir / "queries", queries, [v.video_id for v in test_videos],
        [v.label for v in test_videos],
    )
    accs = retrieval_eval(
        gallery,
        [v.label for v in train_videos],
        queries,
        [v.label for v in test_videos],
        retrieval.ks,
    )
    metrics_path = write_metrics(
        out_dir / "metrics.json",
        "eval-retrieval",
        retrieval.seed,
        config_hash(resolved),
        {f"top{k}": v for k, v in accs.items()},
    )
    print(
        "retrieval accuracy: "
        + ", ".join(f"top-{k} {v:.3f}" for k, v in sorted(accs.items()))
        + f"; metrics {metrics_path}"
    )
    return 0


def _find_sidecar(clip_path: Path) -> Path:
    candidates = [
        clip_path.parent.parent / "sidecars" / f"{clip_path.stem}.json",
        clip_path.with_suffix(".json"),
    ]
    for c in candidates:
        if c.is_file():
            return c
    raise DataError(f"no sidecar found for {clip_path} (tried {[str(c) for c in candidates]})")


def cmd_inspect(args) -> int:
    from .render import render_inspection

    clip_path = Path(args.clip)
    if not clip_path.is_file():
        raise DataError(f"clip not found: {clip_path}")
    sidecar = Path(args.sidecar) if args.sidecar else _find_sidecar(clip_path)
    out_path = Path(args.out) if args.out else clip_path.with_suffix(".png")
    resolved = {"clip": str(clip_path), "sidecar": str(sidecar)}
    _manifest(args, "inspect", resolved, [str(out_path)], None)
    render_inspection(clip_path, sidecar, out_path, args.frames_dir)
    print(f"wrote {out_path}")
    return 0


def cmd_make_toy(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out_dir = _resolve_out(args, "toy")
    resolved = {
        "classes": args.classes,
        "per_class": args.per_class,
        "frames": args.frames,
        "height": args.height,
        "width": args.width,
        "seed": seed,
    }
    _manifest(args, "make-toy", resolved, [str(out_dir)], seed)
    benchmark = make_toy_benchmark(
        seed, args.classes, args.per_class, args.frames, args.height, args.width
    )
    save_toy_dataset(benchmark, out_dir)
    print(
        f"wrote {len(benchmark.videos)} toy videos "
        f"({benchmark.n_classes} classes) to {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (or file for inspect)")
    p.add_argument("--workers", type=int, default=None, help="worker pool size")
    p.add_argument("--runs-dir", default="runs", help="where run manifests are written")
    p.add_argument("--verbose", action="store_true", help="echo progress to stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctp",
        description="Self-supervised video pretraining by tracking synthetic moving patches.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, sections, extra=None):
        p = sub.add_parser(
            name,
            help=help_text,
            epilog=config_help(sections) if sections else None,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _add_common(p)
        if extra:
            extra(p)
        p.set_defaults(func=func)
        return p

    def generate_flags(p):
        p.add_argument("--n-clips", type=int, default=None, help="number of clips to synthesize")
        p.add_argument("--k", type=int, default=None, help="trajectories per clip")
        p.add_argument("--p-mask", type=float, default=None, help="masking probability")
        p.add_argument("--dry-run", action="store_true", help="print the plan without writing")

    add("generate", cmd_generate, "synthesize a training dataset", ("generate", "constraints"), generate_flags)

    def pretrain_flags(p):
        p.add_argument("--resume", default=None, help="checkpoint to resume from")
        p.add_argument("--force", action="store_true", help="ignore checkpoint config-hash mismatches")

    add(
        "pretrain",
        cmd_pretrain,
        "pretrain the encoder on synthetic clips",
        ("train", "encoder", "head", "sigmas", "pixel_norm"),
        pretrain_flags,
    )

    def probe_flags(p):
        p.add_argument("--checkpoint", default=None, help="pretrained checkpoint to evaluate")
        p.add_argument("--random-init", action="store_true", help="probe a randomly initialized encoder")
        p.add_argument("--data", default=None, help="toy dataset directory")
        p.add_argument("--shuffle-labels", action="store_true", help="label-shuffle control run")
        p.add_argument("--force", action="store_true", help="ignore checkpoint config-hash mismatches")

    add(
        "probe",
        cmd_probe,
        "linear-probe or finetune classification on the toy benchmark",
        ("probe", "train", "encoder", "head"),
        probe_flags,
    )

    def retrieval_flags(p):
        p.add_argument("--checkpoint", default=None, help="pretrained checkpoint")
        p.add_argument("--data", default=None, help="toy dataset directory")
        p.add_argument("--force", action="store_true", help="ignore checkpoint config-hash mismatches")

    add(
        "eval-retrieval",
        cmd_eval_retrieval,
        "nearest-neighbor clip retrieval evaluation",
        ("retrieval",),
        retrieval_flags,
    )

    def inspect_flags(p):
        p.add_argument("clip", help="path to a .ctpc clip file")
        p.add_argument("--sidecar", default=None, help="sidecar JSON (default: auto-detected)")
        p.add_argument("--frames-dir", default=None, help="also write per-frame PNGs here")

    add("inspect", cmd_inspect, "render a clip with ground-truth overlays", (), inspect_flags)

    def make_toy_flags(p):
        p.add_argument("--classes", type=int, default=4, help="number of motion classes")
        p.add_argument("--per-class", type=int, default=50, help="videos per class")
        p.add_argument("--frames", type=int, default=12, help="frames per video")
        p.add_argument("--height", type=int, default=64)
        p.add_argument("--width", type=int, default=64)

    add("make-toy", cmd_make_toy, "build the motion-labeled toy benchmark", (), make_toy_flags)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
