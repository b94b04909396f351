"""Full audio-to-video generation through the three trained stages."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adversarial import coarse_inputs, load_fhvg
from .core import PipelineConfig
from .cvg import CoarseGenerator, load_cvg
from .dlt import heatmaps_torch
from .khp import KeypointPredictor, load_khp, predict_keypoints
from .stu import StructuredTemporalUNet, stu_generate


@dataclass
class TrainedStages:
    khp: KeypointPredictor
    cvg: CoarseGenerator
    stu: StructuredTemporalUNet

    @classmethod
    def load(cls, ckpt_dir: str | Path, config: PipelineConfig) -> "TrainedStages":
        return cls(load_khp(ckpt_dir, config), load_cvg(ckpt_dir, config), load_fhvg(ckpt_dir, config)[0])


@dataclass
class GeneratedVideo:
    """Every intermediate of one generation run, one entry per clip."""

    keypoints: np.ndarray  # (n, P, 2)
    heatmaps: np.ndarray  # (n, H, W)
    coarse: np.ndarray  # (n, H, W, 3)
    frames: np.ndarray  # (n, H, W, 3)


def generate_video(stages: TrainedStages, clips: np.ndarray, config: PipelineConfig, label: str = "eval") -> GeneratedVideo:
    """Clips -> predicted keypoints -> heatmaps -> coarse frames -> final frames."""
    keypoints, _ = predict_keypoints(stages.khp, clips)
    inputs = coarse_inputs(stages.cvg, clips, keypoints, config, label=label)
    size = config.image_size
    with torch.no_grad():
        heat = heatmaps_torch(inputs.keypoints, size, size, config.heatmap_alpha).numpy()
    coarse = inputs.coarse.permute(0, 2, 3, 1).numpy()
    frames = stu_generate(stages.stu, coarse, keypoints, inputs.audio.numpy(), heat)
    return GeneratedVideo(keypoints, heat, coarse, frames)
