"""Command-line entry point: synth-data, train, generate and evaluate over one config file."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .audiodata import (
    DatasetError,
    ToyDatasetSpec,
    extract_cqt,
    generate_toy_dataset,
    load_real_dataset,
    read_audio,
    read_frame,
    read_keypoints,
    write_dataset,
)
from .core import ConfigError, PipelineConfig, load_config
from .metrics import REFERENCE_NOTE, REFERENCE_SCORES, EvalReport, pca_trace, plot_traces, score_sequence, write_trace_csv
from .nets import derive_seed
from .training import CheckpointError, DivergenceError, MissingCheckpointError, checkpoint_path

log = logging.getLogger("apvg")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PREREQUISITE = 3
EXIT_DIVERGENCE = 4

STAGES = ("khp", "cvg", "fhvg")
PREREQUISITES = {"khp": (), "cvg": (), "fhvg": ("khp", "cvg")}


def artifact_id(path: Path) -> str:
    """Content digest of a file, shortened like a git object id."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def write_manifest(out_dir: Path, command: str, config: PipelineConfig, inputs: dict, outputs: dict,
                   started: datetime, artifacts: dict | None = None, name: str | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "seed": config.seed,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "artifacts": artifacts or {},
    }
    path = out_dir / (name or f"manifest-{command}.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _seed_everything(config: PipelineConfig, label: str) -> None:
    torch.manual_seed(derive_seed(config.seed, f"cli:{label}"))


def _load_training_data(data_dir: Path, config: PipelineConfig):
    loaded = load_real_dataset(data_dir, config)
    if not loaded.sequences:
        raise DatasetError(f"no usable sequences under {data_dir}")
    return loaded.sequences


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_data(config: PipelineConfig, out_dir: Path) -> Path:
    started = datetime.now(timezone.utc)
    spec = ToyDatasetSpec.from_config(config)
    dataset = generate_toy_dataset(spec)
    write_dataset(dataset, out_dir, spec.sample_rate)
    return write_manifest(out_dir, "synth-data", config, {}, {"dataset": out_dir}, started,
                          name="manifest.json")


def cmd_train(stage: str, config: PipelineConfig, data_dir: Path, ckpt_dir: Path) -> Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    for need in PREREQUISITES[stage]:
        if not checkpoint_path(ckpt_dir, need).exists():
            raise MissingCheckpointError(
                f"stage {stage} needs the {need} checkpoint: {checkpoint_path(ckpt_dir, need)} is missing"
            )
    started = datetime.now(timezone.utc)
    dataset = _load_training_data(data_dir, config)
    _seed_everything(config, f"train:{stage}")
    curve_path = ckpt_dir / f"{stage}_curve.csv"
    if curve_path.exists():
        curve_path.unlink()
    if stage == "khp":
        from .khp import train_khp

        result = train_khp(dataset, config, ckpt_dir)
    elif stage == "cvg":
        from .cvg import train_cvg

        result = train_cvg(dataset, config, ckpt_dir)
    else:
        from .adversarial import train_fhvg

        result = train_fhvg(dataset, config, ckpt_dir)
    artifacts = {p.name: artifact_id(p) for p in (checkpoint_path(ckpt_dir, s) for s in STAGES) if p.exists()}
    return write_manifest(
        ckpt_dir, "train", config, {"data": data_dir},
        {"checkpoint": result.checkpoint, "curve": curve_path}, started, artifacts,
        name=f"manifest-train-{stage}.json",
    )


def _save_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def write_generated(video, out_dir: Path) -> None:
    """Persist every intermediate: PNG frames for inspection plus exact arrays in ``arrays.npz``."""
    for sub in ("frames", "coarse", "heatmaps", "keypoints"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    peak = max(float(video.heatmaps.max()), 1e-12)
    for t in range(len(video.frames)):
        _save_png(video.frames[t], out_dir / "frames" / f"{t:06d}.png")
        _save_png(video.coarse[t], out_dir / "coarse" / f"{t:06d}.png")
        _save_png(video.heatmaps[t] / peak, out_dir / "heatmaps" / f"{t:06d}.png")
        (out_dir / "keypoints" / f"{t:06d}.json").write_text(json.dumps(video.keypoints[t].tolist()))
    np.savez(out_dir / "arrays.npz", frames=video.frames, coarse=video.coarse,
             heatmaps=video.heatmaps, keypoints=video.keypoints)


def cmd_generate(config: PipelineConfig, ckpt_dir: Path, out_dir: Path,
                 audio_path: Path | None = None, data_dir: Path | None = None) -> Path:
    """Generate from one audio file, or from every sequence's audio under a dataset root."""
    from .pipeline import TrainedStages, generate_video

    if (audio_path is None) == (data_dir is None):
        raise ConfigError("generate needs exactly one of --audio or --data")
    for stage in STAGES:
        if not checkpoint_path(ckpt_dir, stage).exists():
            raise MissingCheckpointError(f"generate needs the {stage} checkpoint in {ckpt_dir}")
    started = datetime.now(timezone.utc)
    if audio_path is not None:
        jobs = [(audio_path.stem, audio_path)]
    else:
        jobs = [(d.name, sorted(d.glob("*.wav"))[0]) for d in sorted(data_dir.iterdir())
                if d.is_dir() and any(d.glob("*.wav"))]
        if not jobs:
            raise DatasetError(f"no audio files under {data_dir}")
    stages = TrainedStages.load(ckpt_dir, config)
    _seed_everything(config, "generate")
    outputs = {}
    for name, wav in jobs:
        wave = read_audio(wav, config.sample_rate)
        clips = extract_cqt(wave, config.sample_rate, config.hop_length, config.cqt_bins, config.clip_hops)
        video = generate_video(stages, clips, config, label=f"generate:{name}")
        write_generated(video, out_dir / name)
        outputs[name] = out_dir / name
        log.info("generated %d frames for %s", len(video.frames), name)
    artifacts = {checkpoint_path(ckpt_dir, s).name: artifact_id(checkpoint_path(ckpt_dir, s)) for s in STAGES}
    inputs = {"ckpt": ckpt_dir, "audio" if audio_path else "data": audio_path or data_dir}
    return write_manifest(out_dir, "generate", config, inputs, outputs, started, artifacts)


def _load_reference(ref_dir: Path, config: PipelineConfig) -> tuple[np.ndarray, np.ndarray | None]:
    frame_files = sorted(p for p in (ref_dir / "frames").glob("*.png"))
    if not frame_files:
        raise DatasetError(f"{ref_dir}: no reference frames")
    frames = np.stack([read_frame(f, config.image_size) for f in frame_files])
    kp_files = [ref_dir / "keypoints" / f"{f.stem}.json" for f in frame_files]
    kps = None
    if all(p.exists() for p in kp_files):
        kps = np.stack([read_keypoints(p, config.keypoint_count) for p in kp_files])
    return frames, kps


def evaluate_directories(config: PipelineConfig, generated_dir: Path, reference_dir: Path,
                         plots: bool = False) -> EvalReport:
    names = sorted(d.name for d in generated_dir.iterdir() if (d / "arrays.npz").exists())
    if not names:
        raise DatasetError(f"no generated sequences (arrays.npz) under {generated_dir}")
    rows = []
    for name in names:
        ref = reference_dir / name
        if not ref.is_dir():
            raise DatasetError(f"no reference sequence {name!r} under {reference_dir}")
        with np.load(generated_dir / name / "arrays.npz") as arrays:
            frames, keypoints = arrays["frames"], arrays["keypoints"]
        ref_frames, ref_kps = _load_reference(ref, config)
        if len(frames) != len(ref_frames):
            raise ValueError(f"{name}: {len(frames)} generated frames vs {len(ref_frames)} reference frames")
        rows.append(score_sequence(name, frames, ref_frames, keypoints if ref_kps is not None else None, ref_kps))
        if plots and len(keypoints) >= 2:
            traces = pca_trace(keypoints)
            write_trace_csv(traces, generated_dir / name / "pca_trace.csv")
            plot_traces(traces, generated_dir / name / "pca_trace.png",
                        pca_trace(ref_kps) if ref_kps is not None else None)
    return EvalReport(rows, {
        "config_hash": config.hash(),
        "generated": str(generated_dir),
        "reference": str(reference_dir),
        "reference_scores": REFERENCE_SCORES.get(config.instrument, {}),
        "reference_note": REFERENCE_NOTE,
    })


def cmd_evaluate(config: PipelineConfig, generated_dir: Path, reference_dir: Path, out_dir: Path,
                 plots: bool = False) -> Path:
    started = datetime.now(timezone.utc)
    report = evaluate_directories(config, generated_dir, reference_dir, plots)
    manifest = generated_dir / "manifest-generate.json"
    if manifest.exists():
        report.metadata["checkpoints"] = json.loads(manifest.read_text()).get("artifacts", {})
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report.write_json(report_path)
    write_manifest(out_dir, "evaluate", config, {"generated": generated_dir, "reference": reference_dir},
                   {"report": report_path}, started)
    return report_path


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat YAML config file")
    common.add_argument("--seed", type=int, help="override the config's root seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="apvg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common], help="write the toy dataset")

    train = sub.add_parser("train", parents=[common], help="train one stage")
    train.add_argument("--stage", required=True, choices=STAGES)
    train.add_argument("--data", type=Path, required=True, help="dataset root")
    train.add_argument("--ckpt", type=Path, help="checkpoint directory (defaults to --out)")

    gen = sub.add_parser("generate", parents=[common], help="audio to video through all stages")
    gen.add_argument("--ckpt", type=Path, required=True)
    src = gen.add_mutually_exclusive_group(required=True)
    src.add_argument("--audio", type=Path, help="a single WAV file")
    src.add_argument("--data", type=Path, help="dataset root; every sequence's audio is used")

    ev = sub.add_parser("evaluate", parents=[common], help="score generated sequences against references")
    ev.add_argument("--generated", type=Path, required=True)
    ev.add_argument("--reference", "--data", dest="reference", type=Path, required=True)
    ev.add_argument("--plots", action="store_true", help="also write PCA trace CSVs and plots")
    return parser


def run(args: argparse.Namespace) -> Path:
    config = _config(args)
    if args.command == "synth-data":
        return cmd_synth_data(config, _need(args.out, "--out"))
    if args.command == "train":
        ckpt = args.ckpt or _need(args.out, "--ckpt or --out")
        return cmd_train(args.stage, config, args.data, ckpt)
    if args.command == "generate":
        return cmd_generate(config, args.ckpt, _need(args.out, "--out"), args.audio, args.data)
    return cmd_evaluate(config, args.generated, args.reference, args.out or args.generated, args.plots)


def _need(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = run(args)
    except MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, CheckpointError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
