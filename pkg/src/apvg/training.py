"""Checkpoints, loss-curve logging, learning-rate schedule and divergence handling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .core import PipelineConfig

CHECKPOINT_FORMAT = 1


class CheckpointError(RuntimeError):
    pass


class MissingCheckpointError(CheckpointError):
    """A stage's prerequisite checkpoint does not exist."""


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_good: Path | None = None):
        super().__init__(message if last_good is None else f"{message} (last good checkpoint: {last_good})")
        self.last_good = last_good


def checkpoint_path(ckpt_dir: str | Path, stage: str) -> Path:
    return Path(ckpt_dir) / f"{stage}.pt"


def save_checkpoint(path: str | Path, stage: str, config: PipelineConfig, state: dict, extras: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "config_hash": config.hash(stage),
        "config": config.to_dict(),
        "state": state,
        "extras": extras or {},
    }, path)
    return path


def load_checkpoint(path: str | Path, stage: str, config: PipelineConfig) -> dict:
    """Load a stage checkpoint, refusing one written under a different config."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"missing {stage} checkpoint: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("stage") != stage:
        raise CheckpointError(f"{path} is not a {stage} checkpoint (format {CHECKPOINT_FORMAT})")
    expected = config.hash(stage)
    if blob["config_hash"] != expected:
        raise CheckpointError(
            f"{path}: config hash {blob['config_hash']} does not match current {stage} config {expected}"
        )
    return blob


def lr_at(step: int, total: int, lr: float, lr_final: float) -> float:
    """Exponential decay from ``lr`` at step 0 to ``lr_final`` at the last step."""
    if total <= 1 or lr_final <= 0:
        return lr
    return lr * (lr_final / lr) ** (step / (total - 1))


def set_lr(opt: torch.optim.Optimizer, value: float) -> None:
    for group in opt.param_groups:
        group["lr"] = value


def check_finite(value: float, stage: str, step: int, last_good: Path | None = None) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{stage}: non-finite loss at step {step}", last_good)


@dataclass
class LossCurve:
    """In-memory loss log; ``write_csv`` appends ``step,loss_name,value`` rows."""

    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def log(self, step: int, **values: float) -> None:
        for name, v in values.items():
            self.rows.append((step, name, float(v)))

    def series(self, name: str) -> list[float]:
        return [v for _, n, v in self.rows if n == name]

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists()
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "loss_name", "value"])
            for step, name, v in self.rows:
                w.writerow([step, name, repr(v)])


def read_curve_csv(path: str | Path) -> LossCurve:
    curve = LossCurve()
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            curve.rows.append((int(row["step"]), row["loss_name"], float(row["value"])))
    return curve
