"""Audio-video pair discriminator, GAN and perceptual losses, and final-stage training."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audiodata import PairedSequence
from .core import PipelineConfig
from .cvg import CoarseGenerator, encode_audio_sequence, load_cvg, noise_sequence, rollout_torch
from .khp import load_khp, predict_keypoints
from .nets import ClipEncoder, FrozenBackbone, derive_seed, down, kaiming_init, seeded
from .stu import StructuredTemporalUNet
from .training import (
    LossCurve,
    check_finite,
    checkpoint_path,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    set_lr,
)

log = logging.getLogger(__name__)

SCORE_EPS = 1e-6


class Discriminator(nn.Module):
    """Scores (frame, CQT clip) pairs; output lies strictly inside (0, 1)."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        with seeded(config.seed, "discriminator"):
            self.frames = kaiming_init(nn.Sequential(
                down(3, 16), down(16, 32), down(32, 64), down(64, 64), down(64, 64),
            ))
            self.audio = kaiming_init(ClipEncoder(config.cqt_bins, 64))
            self.head = kaiming_init(nn.Sequential(nn.Linear(128, 64), nn.LeakyReLU(0.2), nn.Linear(64, 1)))
        self.register_buffer("audio_mean", torch.tensor(0.0))
        self.register_buffer("audio_std", torch.tensor(1.0))

    def set_audio_stats(self, mean: float, std: float) -> None:
        self.audio_mean.fill_(mean)
        self.audio_std.fill_(std)

    def forward(self, frames: torch.Tensor, clips: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` and ``(B, bins, hops)`` -> scores ``(B,)``."""
        f = self.frames(frames).mean(dim=(2, 3))
        a = self.audio((clips - self.audio_mean) / self.audio_std)
        logit = self.head(torch.cat([f, a], dim=1)).squeeze(1)
        return SCORE_EPS + (1 - 2 * SCORE_EPS) * torch.sigmoid(logit)


def discriminate(disc: Discriminator, frame: np.ndarray, clip: np.ndarray) -> float:
    """Score one ``(H, W, 3)`` frame against one ``(bins, hops)`` clip."""
    with torch.no_grad():
        s = disc(
            torch.as_tensor(np.asarray(frame), dtype=torch.float32).permute(2, 0, 1)[None],
            torch.as_tensor(np.asarray(clip), dtype=torch.float32)[None],
        )
    return float(s[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def generator_loss_from_scores(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective: mean of -log D(fake)."""
    return -torch.log(torch.as_tensor(fake_scores)).mean()


def discriminator_loss_from_scores(real_scores, fake_scores, literal: bool = False) -> torch.Tensor:
    """Binary cross-entropy over real (label 1) and fake (label 0) pairs.

    ``literal=True`` instead returns ``-(mean log D(real) + mean log D(fake))``,
    which rewards scoring fakes high; it exists only for comparison runs.
    """
    real = torch.as_tensor(real_scores)
    fake = torch.as_tensor(fake_scores, dtype=real.dtype)
    if literal:
        return -(torch.log(real).mean() + torch.log(fake).mean())
    return -(torch.log(real).mean() + torch.log1p(-fake).mean())


def _flat_pairs(frames: torch.Tensor, clips: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if frames.shape[:-3] != clips.shape[:-2]:
        raise ValueError(f"frames {tuple(frames.shape)} and clips {tuple(clips.shape)} are not aligned")
    return frames.reshape(-1, *frames.shape[-3:]), clips.reshape(-1, *clips.shape[-2:])


def generator_adv_loss(disc: Discriminator, fake_frames: torch.Tensor, clips: torch.Tensor) -> torch.Tensor:
    """Frames ``(..., 3, H, W)`` paired with clips ``(..., bins, hops)``."""
    f, c = _flat_pairs(fake_frames, clips)
    return generator_loss_from_scores(disc(f, c))


def discriminator_loss(
    disc: Discriminator,
    real_frames: torch.Tensor,
    fake_frames: torch.Tensor,
    clips: torch.Tensor,
    literal: bool = False,
) -> torch.Tensor:
    r, c = _flat_pairs(real_frames, clips)
    f, _ = _flat_pairs(fake_frames, clips)
    return discriminator_loss_from_scores(disc(r, c), disc(f, c), literal)


class PerceptualExtractor(nn.Module):
    """Frozen backbone exposing a fixed list of tapped activations; tap 0 is the raw image."""

    def __init__(self, backbone: FrozenBackbone, taps):
        super().__init__()
        taps = sorted(set(int(t) for t in taps))
        if not taps or taps[0] < 0 or taps[-1] > len(backbone.convs):
            raise ValueError(f"taps {taps} outside 0..{len(backbone.convs)}")
        self.backbone = backbone
        self.tap_ids = taps

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        outs = self.backbone.taps(frames, upto=self.tap_ids[-1])
        return [outs[t] for t in self.tap_ids]


def perceptual_loss(extractor: PerceptualExtractor, real_frames: torch.Tensor, fake_frames: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the summed per-tap mean absolute feature difference."""
    real = torch.as_tensor(real_frames)
    fake = torch.as_tensor(fake_frames, dtype=real.dtype)
    if real.shape != fake.shape:
        raise ValueError(f"video shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    real = real.reshape(-1, *real.shape[-3:])
    fake = fake.reshape(-1, *fake.shape[-3:])
    with torch.no_grad():
        targets = extractor(real)
    total = real.new_zeros(real.shape[0])
    for tgt, out in zip(targets, extractor(fake)):
        total = total + (tgt - out).abs().flatten(1).mean(dim=1)
    return total.mean()


# ---------------------------------------------------------------------------
# final-stage training
# ---------------------------------------------------------------------------


@dataclass
class StageInputs:
    """Everything the final stage consumes for one sequence, precomputed from earlier stages."""

    coarse: torch.Tensor  # (n, 3, H, W)
    keypoints: torch.Tensor  # (n, P, 2)
    audio: torch.Tensor  # (n, audio_dim)
    clips: torch.Tensor  # (n, bins, hops)
    frames: torch.Tensor | None = None  # (n, 3, H, W) ground truth when known


def coarse_inputs(
    cvg: CoarseGenerator,
    clips: np.ndarray,
    keypoints: np.ndarray,
    config: PipelineConfig,
    frames: np.ndarray | None = None,
    label: str = "eval",
) -> StageInputs:
    """Roll the coarse generator out over a sequence and bundle the final-stage inputs."""
    c = torch.as_tensor(np.asarray(clips), dtype=torch.float32)
    z = noise_sequence(config, len(c), label)
    with torch.no_grad():
        coarse = rollout_torch(cvg, c, cvg.seed_frame, z)
    audio = torch.as_tensor(encode_audio_sequence(cvg, clips))
    gt = None if frames is None else torch.as_tensor(np.asarray(frames), dtype=torch.float32).permute(0, 3, 1, 2)
    kp = torch.as_tensor(np.asarray(keypoints), dtype=torch.float32)
    return StageInputs(coarse, kp, audio, c, gt)


@dataclass
class FhvgResult:
    model: StructuredTemporalUNet
    disc: Discriminator
    curve: LossCurve
    checkpoint: Path | None


def build_stu(config: PipelineConfig) -> StructuredTemporalUNet:
    return StructuredTemporalUNet(config)


def _windows(inputs: list[StageInputs], starts: list[tuple[int, int]], length: int):
    pick = lambda name: torch.stack([getattr(inputs[s], name)[t : t + length] for s, t in starts])  # noqa: E731
    return pick("coarse"), pick("keypoints"), pick("audio"), pick("clips"), pick("frames")


def train_fhvg(
    dataset: list[PairedSequence],
    config: PipelineConfig,
    ckpt_dir: str | Path,
    steps: int | None = None,
) -> FhvgResult:
    """Alternate discriminator and generator updates on short windows of each sequence.

    Needs the keypoint and coarse-video checkpoints in ``ckpt_dir``. The
    generator minimizes ``lambda_adv * adversarial + lambda_perc * perceptual``.
    """
    steps = config.fhvg_steps if steps is None else steps
    ckpt_dir = Path(ckpt_dir)
    khp = load_khp(ckpt_dir, config)
    cvg = load_cvg(ckpt_dir, config)
    seqs = [s for s in dataset if s.instrument == config.instrument]
    inputs = []
    for i, s in enumerate(seqs):
        kp = s.keypoints if config.stu_train_keypoints == "real" else predict_keypoints(khp, s.clips)[0]
        inputs.append(coarse_inputs(cvg, s.clips, kp, config, s.frames, label=f"train:{i}"))

    model = build_stu(config)
    disc = Discriminator(config)
    disc.set_audio_stats(float(cvg.audio_mean), float(cvg.audio_std))
    extractor = PerceptualExtractor(
        FrozenBackbone(config.backbone_widths, config.backbone_weights, config.seed), config.perceptual_taps
    )
    opt_g = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(0.5, 0.999))
    g = torch.Generator().manual_seed(derive_seed(config.seed, "fhvg-train"))
    length = min(config.fhvg_window, min(len(x.coarse) for x in inputs))
    curve = LossCurve()
    use_adv = config.lambda_adv > 0
    last_good = None
    model.train()
    disc.train()
    for step in range(steps):
        lr = lr_at(step, steps, config.lr, config.lr_final)
        set_lr(opt_g, lr)
        set_lr(opt_d, lr)
        seq_ids = torch.randint(len(inputs), (config.fhvg_batch,), generator=g).tolist()
        starts = [(s, int(torch.randint(len(inputs[s].coarse) - length + 1, (1,), generator=g))) for s in seq_ids]
        coarse, kp, audio, clips, real = _windows(inputs, starts, length)
        fake = model(coarse, kp, audio)

        d_loss = torch.zeros(())
        if use_adv:
            rf, rc = _flat_pairs(real, clips)
            ff, _ = _flat_pairs(fake.detach(), clips)
            d_loss = discriminator_loss_from_scores(disc(rf, rc), disc(ff, rc), config.literal_discriminator_loss)
            if config.disc_mismatch_pairs:
                shifted = torch.roll(rc, shifts=len(rc) // 2, dims=0)
                d_loss = d_loss - torch.log1p(-disc(rf, shifted)).mean()
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

        perc = perceptual_loss(extractor, real, fake)
        adv = generator_adv_loss(disc, fake, clips) if use_adv else torch.zeros(())
        g_loss = adv_weight(step, steps, config) * adv + config.lambda_perc * perc
        check_finite(g_loss.item() + d_loss.item(), "fhvg", step, last_good)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        curve.log(step, perceptual=perc.item(), generator_adv=adv.item(), discriminator=d_loss.item(),
                  generator=g_loss.item())
        if step % 100 == 0:
            log.info("fhvg step %d perceptual %.4f adv %.4f disc %.4f", step, perc.item(), adv.item(), d_loss.item())
        if (step + 1) % 250 == 0 and step + 1 < steps:
            last_good = _save(ckpt_dir / "fhvg_last_good.pt", config, model, disc, step + 1)
    model.eval()
    disc.eval()
    path = _save(checkpoint_path(ckpt_dir, "fhvg"), config, model, disc, steps)
    curve.write_csv(ckpt_dir / "fhvg_curve.csv")
    return FhvgResult(model, disc, curve, path)


def adv_weight(step: int, steps: int, config: PipelineConfig) -> float:
    """Adversarial weight, ramped linearly from 0 over the first ``adv_warmup`` fraction of steps."""
    ramp = config.adv_warmup * steps
    if ramp <= 0:
        return config.lambda_adv
    return config.lambda_adv * min(1.0, step / ramp)


def _save(path: Path, config: PipelineConfig, model, disc, step: int) -> Path:
    state = {"stu": copy.deepcopy(model.state_dict()), "disc": copy.deepcopy(disc.state_dict())}
    return save_checkpoint(path, "fhvg", config, state, {"step": step})


def load_fhvg(ckpt_dir: str | Path, config: PipelineConfig) -> tuple[StructuredTemporalUNet, Discriminator]:
    blob = load_checkpoint(checkpoint_path(ckpt_dir, "fhvg"), "fhvg", config)
    model = build_stu(config)
    model.load_state_dict(blob["state"]["stu"])
    disc = Discriminator(config)
    disc.load_state_dict(blob["state"]["disc"])
    model.eval()
    disc.eval()
    return model, disc
