"""Coarse video generation: audio features + previous frame + noise -> next frame."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audiodata import AudioStats, PairedSequence, fit_audio_stats, mean_frame
from .core import PipelineConfig
from .nets import ClipEncoder, FrozenBackbone, derive_seed, down, kaiming_init, seeded, up
from .training import LossCurve, check_finite, checkpoint_path, load_checkpoint, lr_at, save_checkpoint, set_lr

log = logging.getLogger(__name__)

AUDIO_MAP_CHANNELS = 16


class AudioSequenceEncoder(nn.Module):
    """Per-clip convolutional encoding followed by an LSTM over the sequence."""

    def __init__(self, bins: int, dim: int):
        super().__init__()
        self.clip = kaiming_init(ClipEncoder(bins, dim))
        self.rnn = nn.LSTM(dim, dim, batch_first=True)
        for name, w in self.rnn.named_parameters():
            if name.startswith("weight"):
                nn.init.kaiming_normal_(w, nonlinearity="linear")
            else:
                nn.init.zeros_(w)

    def forward(self, clips: torch.Tensor, state=None):
        h, state = self.rnn(self.clip(clips), state)
        return h, state


class CoarseGenerator(nn.Module):
    def __init__(self, config: PipelineConfig, stats: AudioStats, seed_frame: np.ndarray):
        super().__init__()
        size = config.image_size
        self.image_size = size
        self.noise_dim = config.noise_dim
        self.backbone = FrozenBackbone(config.backbone_widths, config.backbone_weights, config.seed)
        if size % 16 != 0:
            raise ValueError(f"image_size {size} must be a multiple of 16")
        # backbone pools by 4 and the two trainable strided convs by another 4
        self.feature_size = size // 16
        with seeded(config.seed, "cvg"):
            self.audio = AudioSequenceEncoder(config.cqt_bins, config.audio_dim)
            self.image_convs = kaiming_init(nn.Sequential(down(self.backbone.out_channels, 32), down(32, 32)))
            self.audio_proj = kaiming_init(
                nn.Linear(config.audio_dim + config.noise_dim, AUDIO_MAP_CHANNELS * self.feature_size ** 2)
            )
            self.decoder = kaiming_init(nn.Sequential(
                up(32 + AUDIO_MAP_CHANNELS, 64), up(64, 32), up(32, 16), up(16, 8),
                nn.Conv2d(8, 3, 3, padding=1),
            ))
        self.register_buffer("audio_mean", torch.tensor(float(stats.mean)))
        self.register_buffer("audio_std", torch.tensor(float(stats.std)))
        self.register_buffer("seed_frame", torch.as_tensor(np.array(seed_frame), dtype=torch.float32).permute(2, 0, 1))

    def encode_audio(self, clips: torch.Tensor, state=None):
        """``(B, T, bins, hops)`` -> ``(B, T, audio_dim)`` audio features."""
        return self.audio((clips - self.audio_mean) / self.audio_std, state)

    def image_features(self, frames: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            feats = self.backbone(frames)
        return self.image_convs(feats)

    def step(self, audio_feat: torch.Tensor, prev_frame: torch.Tensor, z: torch.Tensor,
             prev_features: torch.Tensor | None = None) -> torch.Tensor:
        """One frame: ``(B, D_a)``, ``(B, 3, H, W)``, ``(B, D_z)`` -> ``(B, 3, H, W)`` in [0, 1]."""
        fv = self.image_features(prev_frame) if prev_features is None else prev_features
        return self.decode(fv, audio_feat, z)

    def decode(self, image_feat: torch.Tensor, audio_feat: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        fs = self.feature_size
        fa = self.audio_proj(torch.cat([audio_feat, z], dim=-1)).reshape(-1, AUDIO_MAP_CHANNELS, fs, fs)
        return torch.sigmoid(self.decoder(torch.cat([image_feat, fa], dim=1)))


def noise_sequence(config: PipelineConfig, n: int, label: str = "eval") -> torch.Tensor:
    """Standard-normal z for n frames, fixed by the config seed and a label."""
    g = torch.Generator().manual_seed(derive_seed(config.seed, f"cvg-noise:{label}"))
    if config.noise_per_frame:
        return torch.randn(n, config.noise_dim, generator=g)
    return torch.randn(1, config.noise_dim, generator=g).expand(n, -1).clone()


def encode_audio_sequence(model: CoarseGenerator, clips: np.ndarray) -> np.ndarray:
    clips = np.asarray(clips)
    if clips.ndim != 3 or len(clips) == 0:
        raise ValueError("expected a non-empty (n, bins, hops) clip sequence")
    with torch.no_grad():
        feats, _ = model.encode_audio(torch.as_tensor(clips, dtype=torch.float32)[None])
    return feats[0].numpy()


def cvg_step(model: CoarseGenerator, audio_feat: np.ndarray, prev_frame: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Single generation step on numpy values; frames are ``(H, W, 3)``."""
    with torch.no_grad():
        out = model.step(
            torch.as_tensor(audio_feat, dtype=torch.float32)[None],
            torch.as_tensor(prev_frame, dtype=torch.float32).permute(2, 0, 1)[None],
            torch.as_tensor(z, dtype=torch.float32)[None],
        )
    return out[0].permute(1, 2, 0).numpy()


def rollout_torch(model: CoarseGenerator, clips: torch.Tensor, seed_frame: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Autoregressive generation for one sequence; returns ``(n, 3, H, W)``."""
    feats, _ = model.encode_audio(clips[None])
    prev = seed_frame[None]
    out = []
    for t in range(clips.shape[0]):
        prev = model.step(feats[0, t : t + 1], prev, z[t : t + 1])
        out.append(prev)
    return torch.cat(out)


def cvg_rollout(
    model: CoarseGenerator,
    clips: np.ndarray,
    seed_frame: np.ndarray | None = None,
    z: np.ndarray | torch.Tensor | None = None,
    config: PipelineConfig | None = None,
) -> np.ndarray:
    """frame_t = step(F^a_t, frame_{t-1}, z_t) with frame_0 input ``seed_frame``.

    Defaults: the model's stored mean frame and the config-seeded noise policy.
    Returns ``(n, H, W, 3)``.
    """
    clips = torch.as_tensor(np.asarray(clips), dtype=torch.float32)
    if z is None:
        z = noise_sequence(config or PipelineConfig(noise_dim=model.noise_dim), len(clips))
    z = torch.as_tensor(z, dtype=torch.float32)
    seed = model.seed_frame if seed_frame is None else torch.as_tensor(seed_frame, dtype=torch.float32).permute(2, 0, 1)
    with torch.no_grad():
        frames = rollout_torch(model, clips, seed, z)
    return frames.permute(0, 2, 3, 1).numpy()


def cvg_loss(real_frames, coarse_frames) -> torch.Tensor:
    """(1/n) * sum_t mean|real_t - coarse_t| over per-frame pixels."""
    real = torch.as_tensor(real_frames)
    coarse = torch.as_tensor(coarse_frames, dtype=real.dtype)
    if real.shape != coarse.shape:
        raise ValueError(f"video shapes differ: {tuple(real.shape)} vs {tuple(coarse.shape)}")
    return (real - coarse).abs().flatten(1).mean(dim=1).mean()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class CvgResult:
    model: CoarseGenerator
    curve: LossCurve
    checkpoint: Path | None


def build_cvg(config: PipelineConfig, dataset: list[PairedSequence]) -> CoarseGenerator:
    return CoarseGenerator(config, fit_audio_stats(dataset), mean_frame(dataset, config.instrument))


def train_cvg(
    dataset: list[PairedSequence],
    config: PipelineConfig,
    ckpt_dir: str | Path | None = None,
    steps: int | None = None,
) -> CvgResult:
    """Teacher-forced L1 training on random minibatches of frames.

    The audio LSTM runs over whole sequences every step (it is cheap); the
    image path sees the ground-truth previous frame, or the mean frame at t=0.
    """
    steps = config.cvg_steps if steps is None else steps
    model = build_cvg(config, dataset)
    seqs = [s for s in dataset if s.instrument == config.instrument]
    clips = torch.as_tensor(np.stack([s.clips for s in seqs]), dtype=torch.float32)
    frames = torch.as_tensor(np.stack([s.frames for s in seqs]), dtype=torch.float32).permute(0, 1, 4, 2, 3)
    n_seq, n = frames.shape[:2]
    with torch.no_grad():
        prev = torch.cat([model.seed_frame.expand(n_seq, 1, -1, -1, -1), frames[:, :-1]], dim=1)
        backbone_feats = torch.stack([model.backbone(prev[i]) for i in range(n_seq)])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    g = torch.Generator().manual_seed(derive_seed(config.seed, "cvg-train"))
    curve = LossCurve()
    model.train()
    for step in range(steps):
        set_lr(opt, lr_at(step, steps, config.lr, config.lr_final))
        feats, _ = model.encode_audio(clips)
        idx = torch.randperm(n_seq * n, generator=g)[: config.cvg_batch]
        si, ti = idx // n, idx % n
        z = torch.randn(len(idx), config.noise_dim, generator=g)
        out = model.decode(model.image_convs(backbone_feats[si, ti]), feats[si, ti], z)
        loss = cvg_loss(frames[si, ti], out)
        check_finite(loss.item(), "cvg", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.log(step, l1=loss.item())
        if step % 200 == 0:
            log.info("cvg step %d l1 %.5f", step, loss.item())
    model.eval()
    path = None
    if ckpt_dir is not None:
        path = save_checkpoint(checkpoint_path(ckpt_dir, "cvg"), "cvg", config, _trainable_state(model))
        curve.write_csv(Path(ckpt_dir) / "cvg_curve.csv")
    return CvgResult(model, curve, path)


def _trainable_state(model: CoarseGenerator) -> dict:
    return {k: v for k, v in model.state_dict().items() if not k.startswith("backbone.")}


def load_cvg(ckpt_dir: str | Path, config: PipelineConfig) -> CoarseGenerator:
    blob = load_checkpoint(checkpoint_path(ckpt_dir, "cvg"), "cvg", config)
    state = blob["state"]
    model = CoarseGenerator(
        config,
        AudioStats(float(state["audio_mean"]), float(state["audio_std"])),
        state["seed_frame"].permute(1, 2, 0).numpy(),
    )
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected or any(not k.startswith("backbone.") for k in missing):
        raise RuntimeError(f"cvg checkpoint mismatch: missing={missing} unexpected={unexpected}")
    model.eval()
    return model
