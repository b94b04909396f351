"""Keypoint and heatmap prediction from audio clips."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audiodata import AudioStats, PairedSequence, fit_audio_stats
from .core import KeypointSet, PipelineConfig
from .dlt import heatmaps_torch
from .nets import ClipEncoder, kaiming_init, seeded
from .training import LossCurve, check_finite, checkpoint_path, load_checkpoint, lr_at, save_checkpoint, set_lr

log = logging.getLogger(__name__)


class UnknownInstrumentError(KeyError):
    pass


def average_keypoints(dataset: list[PairedSequence], instrument: str) -> KeypointSet:
    """Elementwise mean keypoints over every frame of ``instrument``."""
    seqs = [s.keypoints for s in dataset if s.instrument == instrument]
    if not seqs:
        raise UnknownInstrumentError(f"no training sequences for instrument {instrument!r}")
    return KeypointSet(np.concatenate(seqs).mean(axis=0), instrument)


class KeypointPredictor(nn.Module):
    """Motion encoder + average-pose condition -> LSTM -> affine head."""

    def __init__(self, config: PipelineConfig, avg: np.ndarray, stats: AudioStats):
        super().__init__()
        p = config.keypoint_count
        self.keypoint_count = p
        self.clip_shape = (config.cqt_bins, config.clip_hops)
        with seeded(config.seed, "khp"):
            self.encoder = kaiming_init(ClipEncoder(config.cqt_bins, config.motion_dim))
            self.rnn = nn.LSTM(config.motion_dim + 2 * p, config.khp_hidden, batch_first=True)
            for name, w in self.rnn.named_parameters():
                if name.startswith("weight"):
                    nn.init.kaiming_normal_(w, nonlinearity="linear")
                else:
                    nn.init.zeros_(w)
            self.head = kaiming_init(nn.Linear(config.khp_hidden, 2 * p))
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor(np.array(avg), dtype=torch.float32).reshape(-1))
        self.register_buffer("avg", torch.tensor(np.array(avg), dtype=torch.float32).reshape(p, 2))
        self.register_buffer("audio_mean", torch.tensor(float(stats.mean)))
        self.register_buffer("audio_std", torch.tensor(float(stats.std)))

    def encode_motion(self, clips: torch.Tensor) -> torch.Tensor:
        return self.encoder((clips - self.audio_mean) / self.audio_std)

    def forward(self, clips: torch.Tensor, avg: torch.Tensor | None = None, state=None):
        """``clips`` is ``(B, T, bins, hops)``; returns ``((B, T, P, 2), state)``."""
        b, t = clips.shape[:2]
        motion = self.encode_motion(clips)
        cond = (self.avg if avg is None else avg).reshape(1, 1, -1).expand(b, t, -1)
        h, state = self.rnn(torch.cat([motion, cond], dim=-1), state)
        return self.head(h).reshape(b, t, self.keypoint_count, 2), state


def encode_motion(model: KeypointPredictor, clip: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(clip), dtype=torch.float32)
        if tuple(x.shape[-2:]) != model.clip_shape:
            raise ValueError(f"clip shape {tuple(x.shape)} does not end in {model.clip_shape}")
        return model.encode_motion(x).numpy()


def predict_keypoints(
    model: KeypointPredictor,
    clips: np.ndarray,
    avg: KeypointSet | None = None,
    state=None,
) -> tuple[np.ndarray, tuple]:
    """Run the predictor over one sequence of clips, in order. Returns ``(n, P, 2)`` and the final state."""
    clips = np.asarray(clips)
    if clips.ndim != 3 or len(clips) == 0:
        raise ValueError("expected a non-empty (n, bins, hops) clip sequence")
    a = None
    if avg is not None:
        if avg.count != model.keypoint_count:
            raise ValueError(f"average pose has {avg.count} points, model expects {model.keypoint_count}")
        a = torch.as_tensor(avg.coords, dtype=torch.float32)
    with torch.no_grad():
        out, state = model(torch.as_tensor(clips, dtype=torch.float32)[None], a, state)
    return out[0].double().numpy(), state


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _pair(pred, real) -> tuple[torch.Tensor, torch.Tensor]:
    pred = torch.as_tensor(pred)
    real = torch.as_tensor(real, dtype=pred.dtype)
    if pred.shape != real.shape:
        raise ValueError(f"keypoint shapes differ: {tuple(pred.shape)} vs {tuple(real.shape)}")
    return pred, real


def khp_coordinate_loss(pred, real) -> torch.Tensor:
    """Stacked L2 norm over the P points of each frame, averaged over frames.

    Inputs are ``(..., P, 2)``; a single ``(P, 2)`` set gives the plain norm.
    """
    pred, real = _pair(pred, real)
    diff = (pred - real).flatten(-2)
    sq = (diff * diff).sum(-1)
    # guard the sqrt gradient at exactly zero distance
    norm = torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))
    return norm.mean()


def khp_visual_loss(pred, real, width: int = 64, height: int = 64, alpha: float = 1.0) -> torch.Tensor:
    """Mean absolute heatmap difference, averaged over the W*H cells (and frames)."""
    pred, real = _pair(pred, real)
    return (heatmaps_torch(pred, width, height, alpha) - heatmaps_torch(real, width, height, alpha)).abs().mean()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class KhpResult:
    model: KeypointPredictor
    curve: LossCurve
    checkpoint: Path | None


def build_khp(config: PipelineConfig, dataset: list[PairedSequence]) -> KeypointPredictor:
    avg = average_keypoints(dataset, config.instrument)
    return KeypointPredictor(config, avg.coords, fit_audio_stats(dataset))


def train_khp(
    dataset: list[PairedSequence],
    config: PipelineConfig,
    ckpt_dir: str | Path | None = None,
    steps: int | None = None,
) -> KhpResult:
    """Full-batch Adam on coordinate loss + lambda_vis * visual loss."""
    steps = config.khp_steps if steps is None else steps
    model = build_khp(config, dataset)
    seqs = [s for s in dataset if s.instrument == config.instrument]
    clips = torch.as_tensor(np.stack([s.clips for s in seqs]), dtype=torch.float32)
    real = torch.as_tensor(np.stack([s.keypoints for s in seqs]), dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    curve = LossCurve()
    size = config.vis_heatmap_size
    model.train()
    for step in range(steps):
        set_lr(opt, lr_at(step, steps, config.lr, config.lr_final))
        pred, _ = model(clips)
        coor = khp_coordinate_loss(pred, real)
        loss = coor
        vis = torch.zeros(())
        if config.lambda_vis > 0:
            vis = khp_visual_loss(pred, real, size, size, config.heatmap_alpha)
            loss = coor + config.lambda_vis * vis
        check_finite(loss.item(), "khp", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.log(step, coordinate=coor.item(), visual=vis.item(), total=loss.item())
        if step % 250 == 0:
            log.info("khp step %d coordinate %.5f visual %.6f", step, coor.item(), vis.item())
    model.eval()
    path = None
    if ckpt_dir is not None:
        path = save_checkpoint(checkpoint_path(ckpt_dir, "khp"), "khp", config, model.state_dict())
        curve.write_csv(Path(ckpt_dir) / "khp_curve.csv")
    return KhpResult(model, curve, path)


def load_khp(ckpt_dir: str | Path, config: PipelineConfig) -> KeypointPredictor:
    blob = load_checkpoint(checkpoint_path(ckpt_dir, "khp"), "khp", config)
    state = blob["state"]
    model = KeypointPredictor(
        config, state["avg"].numpy(), AudioStats(float(state["audio_mean"]), float(state["audio_std"]))
    )
    model.load_state_dict(state)
    model.eval()
    return model
