"""Audio features, paired audio/frame/keypoint sequences, and the toy performer dataset."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

from . import core
from .core import Frame, KeypointSet, PipelineConfig

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class InsufficientAudioError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


class KeypointCountError(DatasetError):
    pass


@dataclass(frozen=True)
class AudioClip:
    """Log-magnitude CQT for the audio aligned with one video frame (bins x hops)."""

    cqt: np.ndarray
    sample_rate: int = 44100
    hop_length: int = 256

    def __post_init__(self):
        if self.cqt.shape != (84, 87):
            raise ValueError(f"clip must be 84x87, got {self.cqt.shape}")
        if not np.all(np.isfinite(self.cqt)):
            raise ValueError("clip contains non-finite values")


@dataclass
class PairedSequence:
    """Index-aligned clips ``(n, bins, hops)``, frames ``(n, H, W, 3)``, keypoints ``(n, P, 2)``."""

    name: str
    instrument: str
    clips: np.ndarray
    frames: np.ndarray
    keypoints: np.ndarray
    waveform: np.ndarray | None = None
    pitch: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.frames)
        if n < 2:
            raise DatasetError(f"{self.name}: a sequence needs at least 2 frames, got {n}")
        if len(self.clips) != n or len(self.keypoints) != n:
            raise DatasetError(
                f"{self.name}: misaligned counts clips={len(self.clips)} "
                f"frames={n} keypoints={len(self.keypoints)}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    def clip(self, t: int) -> AudioClip:
        return AudioClip(self.clips[t])

    def frame(self, t: int) -> Frame:
        return Frame(self.frames[t])

    def keypoint_set(self, t: int) -> KeypointSet:
        return KeypointSet(self.keypoints[t], self.instrument)


# ---------------------------------------------------------------------------
# CQT
# ---------------------------------------------------------------------------


def extract_cqt(
    waveform: np.ndarray,
    sr: int = 44100,
    hop: int = 256,
    bins: int = 84,
    clip_hops: int = 87,
) -> np.ndarray:
    """Cut a waveform into consecutive, non-overlapping log-CQT clips.

    Only the first ``len(waveform) // hop`` CQT frames are kept, so the clip
    count is ``len(waveform) // (hop * clip_hops)``. Returns ``(n, bins, clip_hops)``.
    """
    import librosa

    y = np.asarray(waveform, dtype=np.float32)
    total_hops = len(y) // hop
    n = total_hops // clip_hops
    if n < 1:
        raise InsufficientAudioError(
            f"insufficient audio: {len(y)} samples, need at least {hop * clip_hops} for one clip"
        )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        mag = np.abs(librosa.cqt(y, sr=sr, hop_length=hop, n_bins=bins))
    logmag = np.log(mag[:, : n * clip_hops] + LOG_FLOOR).astype(np.float32)
    return np.ascontiguousarray(logmag.reshape(bins, n, clip_hops).transpose(1, 0, 2))


@dataclass(frozen=True)
class AudioStats:
    """Dataset-level standardization of log-CQT values."""

    mean: float
    std: float

    def apply(self, clips: np.ndarray) -> np.ndarray:
        return ((clips - self.mean) / self.std).astype(np.float32)


def fit_audio_stats(dataset: list[PairedSequence]) -> AudioStats:
    allv = np.concatenate([s.clips.ravel() for s in dataset]).astype(np.float64)
    std = float(allv.std())
    return AudioStats(float(allv.mean()), std if std > 0 else 1.0)


# ---------------------------------------------------------------------------
# Toy performer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDatasetSpec:
    sequences: int = 8
    frames: int = 32
    pitch_low: int = 48
    pitch_high: int = 60
    keypoint_count: int = 67
    topology: str = "openpose25_hands"
    render_style: str = "stick"
    image_size: int = 256
    instrument: str = "cello"
    sample_rate: int = 44100
    hop_length: int = 256
    clip_hops: int = 87
    cqt_bins: int = 84
    seed: int = 0

    def __post_init__(self):
        if self.sequences < 1:
            raise core.ConfigError(f"sequences must be >= 1, got {self.sequences}")
        if self.frames < 2:
            raise core.ConfigError(f"frames must be >= 2, got {self.frames}")
        if self.pitch_high <= self.pitch_low:
            raise core.ConfigError("pitch_high must exceed pitch_low")
        if self.keypoint_count != 67 or self.topology != "openpose25_hands":
            raise core.ConfigError("the toy performer supports only the 67-point openpose25_hands topology")
        if self.render_style != "stick":
            raise core.ConfigError(f"unknown render_style {self.render_style!r}")
        if self.image_size < 16:
            raise core.ConfigError("image_size must be at least 16")

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "ToyDatasetSpec":
        return cls(
            sequences=config.toy_sequences,
            frames=config.toy_frames,
            pitch_low=config.toy_pitch_low,
            pitch_high=config.toy_pitch_high,
            keypoint_count=config.keypoint_count,
            topology=config.topology,
            image_size=config.image_size,
            instrument=config.instrument,
            sample_rate=config.sample_rate,
            hop_length=config.hop_length,
            clip_hops=config.clip_hops,
            cqt_bins=config.cqt_bins,
            seed=config.seed,
        )


_BASE_BODY = np.array([
    [0.50, 0.17], [0.50, 0.28], [0.41, 0.29], [0.0, 0.0], [0.0, 0.0],
    [0.59, 0.29], [0.0, 0.0], [0.0, 0.0], [0.50, 0.54], [0.45, 0.54],
    [0.37, 0.69], [0.38, 0.87], [0.55, 0.54], [0.63, 0.69], [0.62, 0.87],
    [0.48, 0.15], [0.52, 0.15], [0.46, 0.16], [0.54, 0.16], [0.65, 0.90],
    [0.67, 0.89], [0.61, 0.89], [0.35, 0.90], [0.33, 0.89], [0.39, 0.89],
])


def _hand(wrist: np.ndarray, direction: float, u: float) -> np.ndarray:
    pts = [wrist]
    for f in range(5):
        curl = 0.35 * np.sin(2 * np.pi * (f + 1) * u + f)
        ang = direction + 0.28 * (f - 2)
        p = wrist + 0.022 * np.array([np.cos(ang), np.sin(ang)])
        for _ in range(4):
            pts.append(p)
            ang += curl
            p = p + 0.013 * np.array([np.cos(ang), np.sin(ang)])
    return np.array(pts)


def toy_keypoints(u: float) -> np.ndarray:
    """Pose of the toy cellist for a normalized pitch ``u`` in [0, 1].

    The whole figure sways sideways with pitch, the bowing arm angle is
    linear in pitch, the fingering hand slides along the neck, the knees
    open and close, and finger curls oscillate at harmonics of the pitch.
    """
    k = _BASE_BODY.copy()
    a1 = np.pi * (0.62 + 0.22 * u)
    k[3] = k[2] + 0.13 * np.array([np.cos(a1), np.sin(a1)])
    a2 = np.pi * (0.10 - 0.30 * u)
    k[4] = k[3] + 0.14 * np.array([np.cos(a2), np.sin(a2)])
    k[7] = np.array([0.66, 0.42 - 0.16 * u])
    k[6] = np.array([0.73, 0.40 - 0.05 * u])
    spread = 0.10 * (u - 0.5)
    k[[10, 11, 22, 23, 24], 0] -= spread
    k[[13, 14, 19, 20, 21], 0] += spread
    left = _hand(k[7], np.pi * (1.05 + 0.1 * u), u)
    right = _hand(k[4], a2, 1.0 - u)
    pts = np.concatenate([k, left, right], axis=0)
    pts[:, 0] += 0.20 * (u - 0.5)
    return pts


def _background(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    texture = 0.05 * np.sin(2 * np.pi * 11 * xx) * np.sin(2 * np.pi * 9 * yy)
    img = np.empty((size, size, 3))
    img[..., 0] = 0.80 - 0.20 * yy + texture
    img[..., 1] = 0.78 - 0.15 * yy + texture
    img[..., 2] = 0.70 - 0.05 * yy + texture
    # instrument: an ellipse body and a straight neck
    cx, cy, rx, ry = 0.60, 0.68, 0.13, 0.18
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    cov = np.clip((1.0 - d) * size * 0.05, 0.0, 1.0)[..., None]
    img = img * (1 - cov) + np.array([0.55, 0.33, 0.18]) * cov
    _draw_segment(img, np.array([0.62, 0.52]) * (size - 1), np.array([0.66, 0.14]) * (size - 1),
                  0.02 * size, np.array([0.30, 0.18, 0.10]))
    return img


def _draw_segment(img: np.ndarray, p0: np.ndarray, p1: np.ndarray, width: float, color: np.ndarray) -> None:
    """Composite an anti-aliased capsule of full width ``width`` (pixel units) in place."""
    size_y, size_x = img.shape[:2]
    r = width / 2 + 1.0
    x0 = max(int(np.floor(min(p0[0], p1[0]) - r)), 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]) + r)) + 1, size_x)
    y0 = max(int(np.floor(min(p0[1], p1[1]) - r)), 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]) + r)) + 1, size_y)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    d = p1 - p0
    denom = float(d @ d)
    if denom > 0:
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / denom, 0.0, 1.0)
    else:
        t = np.zeros_like(xx)
    dist = np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))
    cov = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)[..., None]
    patch = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = patch * (1 - cov) + color * cov


_BODY_COLOR = np.array([0.16, 0.22, 0.55])
_HEAD_COLOR = np.array([0.85, 0.65, 0.55])
_LEFT_COLOR = np.array([0.85, 0.40, 0.20])
_RIGHT_COLOR = np.array([0.20, 0.60, 0.35])


def render_stick_figure(keypoints: np.ndarray, size: int, background: np.ndarray | None = None) -> np.ndarray:
    """Rasterize the figure over the fixed background, quantized to 8-bit levels."""
    img = (_background(size) if background is None else background).copy()
    pts = np.asarray(keypoints, dtype=np.float64) * (size - 1)
    scale = size / 256
    for i, j in core.BODY25_EDGES:
        _draw_segment(img, pts[i], pts[j], 12.0 * scale, _BODY_COLOR)
    _draw_segment(img, pts[0], pts[0], 28.0 * scale, _HEAD_COLOR)
    for offset, wrist, color in (
        (core.LEFT_HAND_OFFSET, core.LEFT_WRIST, _LEFT_COLOR),
        (core.RIGHT_HAND_OFFSET, core.RIGHT_WRIST, _RIGHT_COLOR),
    ):
        _draw_segment(img, pts[wrist], pts[offset], 5.0 * scale, color)
        for a, b in core.HAND21_EDGES:
            _draw_segment(img, pts[a + offset], pts[b + offset], 4.0 * scale, color)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _pitch_walk(rng: np.random.Generator, n: int, low: int, high: int) -> np.ndarray:
    p = np.empty(n, dtype=np.int64)
    p[0] = rng.integers(low, high + 1)
    for t in range(1, n):
        p[t] = np.clip(p[t - 1] + rng.integers(-3, 4), low, high)
    return p


def _synthesize(pitch: np.ndarray, samples_per_frame: int, sr: int) -> np.ndarray:
    freq = 440.0 * 2.0 ** ((np.repeat(pitch, samples_per_frame) - 69) / 12.0)
    phase = 2 * np.pi * np.cumsum(freq) / sr
    wave = 0.4 * np.sin(phase) + 0.2 * np.sin(2 * phase) + 0.1 * np.sin(3 * phase)
    return wave.astype(np.float32)


def generate_toy_dataset(spec: ToyDatasetSpec) -> list[PairedSequence]:
    """Synthesize sequences where audio pitch fully determines pose and frame."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.sequences)
    background = _background(spec.image_size)
    samples = spec.hop_length * spec.clip_hops
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    out = []
    for idx, child in enumerate(children):
        rng = np.random.default_rng(child)
        pitch = _pitch_walk(rng, spec.frames, spec.pitch_low, spec.pitch_high)
        kps, frames = [], []
        for p in pitch:
            p = int(p)
            if p not in cache:
                u = (p - spec.pitch_low) / (spec.pitch_high - spec.pitch_low)
                kp = toy_keypoints(u)
                cache[p] = (kp, render_stick_figure(kp, spec.image_size, background).astype(np.float32))
            kps.append(cache[p][0])
            frames.append(cache[p][1])
        wave = _synthesize(pitch, samples, spec.sample_rate)
        clips = extract_cqt(wave, spec.sample_rate, spec.hop_length, spec.cqt_bins, spec.clip_hops)
        out.append(PairedSequence(
            name=f"seq_{idx:03d}",
            instrument=spec.instrument,
            clips=clips,
            frames=np.stack(frames),
            keypoints=np.stack(kps),
            waveform=wave,
            pitch=pitch,
        ))
    return out


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def write_dataset(dataset: list[PairedSequence], root: str | Path, sample_rate: int = 44100) -> None:
    """Persist sequences as ``<root>/<name>/{audio.wav, meta.json, frames/, keypoints/}``."""
    root = Path(root)
    for seq in dataset:
        if seq.waveform is None:
            raise DatasetError(f"{seq.name}: no waveform to write")
        d = root / seq.name
        (d / "frames").mkdir(parents=True, exist_ok=True)
        (d / "keypoints").mkdir(parents=True, exist_ok=True)
        wavfile.write(d / "audio.wav", sample_rate, seq.waveform.astype(np.float32))
        meta = {"instrument": seq.instrument}
        if seq.pitch is not None:
            meta["pitch"] = [int(p) for p in seq.pitch]
        (d / "meta.json").write_text(json.dumps(meta, indent=1))
        for t in range(len(seq)):
            img = np.round(seq.frames[t] * 255.0).astype(np.uint8)
            Image.fromarray(img).save(d / "frames" / f"{t:06d}.png")
            (d / "keypoints" / f"{t:06d}.json").write_text(json.dumps(seq.keypoints[t].tolist()))


def read_audio(path: Path, sample_rate: int) -> np.ndarray:
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable audio {path}: {exc}") from exc
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32) / float(np.iinfo(data.dtype).max)
    data = data.astype(np.float32)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if sr != sample_rate:
        import librosa

        data = librosa.resample(data, orig_sr=sr, target_sr=sample_rate).astype(np.float32)
    return data


def read_frame(path: Path, size: int) -> np.ndarray:
    """Center-crop to a square and resize to ``size`` x ``size``; values in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if side != size:
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    return arr


def read_keypoints(path: Path, count: int) -> np.ndarray:
    try:
        data = np.asarray(json.loads(path.read_text()), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable keypoint file {path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 2:
        raise DatasetError(f"{path}: expected a list of [x, y] pairs")
    if data.shape[0] != count:
        raise KeypointCountError(f"{path}: found {data.shape[0]} keypoints, expected {count}")
    return data


@dataclass
class DatasetLoad:
    sequences: list[PairedSequence] = field(default_factory=list)
    skipped: int = 0
    rejected: dict[str, str] = field(default_factory=dict)


def load_real_dataset(root: str | Path, config: PipelineConfig | None = None) -> DatasetLoad:
    """Load every sequence folder under ``root`` in sorted order.

    Sequences with missing keypoint files are skipped and counted; sequences
    with the wrong keypoint count or misaligned audio are rejected with a
    reason. Unreadable files raise :class:`DatasetError` naming the path.
    """
    config = config or PipelineConfig()
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    result = DatasetLoad()
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        frame_files = sorted(p for p in (d / "frames").glob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        kp_dir = d / "keypoints"
        missing = [f for f in frame_files if not (kp_dir / f"{f.stem}.json").exists()]
        if not frame_files or missing:
            result.skipped += 1
            continue
        audio_files = sorted(d.glob("*.wav"))
        if not audio_files:
            raise DatasetError(f"{d}: no audio file")
        try:
            kps = np.stack([read_keypoints(kp_dir / f"{f.stem}.json", config.keypoint_count) for f in frame_files])
        except KeypointCountError as exc:
            result.rejected[d.name] = str(exc)
            continue
        wave = read_audio(audio_files[0], config.sample_rate)
        try:
            clips = extract_cqt(wave, config.sample_rate, config.hop_length, config.cqt_bins, config.clip_hops)
        except InsufficientAudioError as exc:
            result.rejected[d.name] = str(exc)
            continue
        if len(clips) != len(frame_files):
            result.rejected[d.name] = (
                f"misaligned counts: {len(clips)} audio clips for {len(frame_files)} frames"
            )
            continue
        frames = np.stack([read_frame(f, config.image_size) for f in frame_files])
        meta_path = d / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        pitch = np.asarray(meta["pitch"]) if "pitch" in meta else None
        result.sequences.append(PairedSequence(
            d.name, meta.get("instrument", config.instrument), clips, frames, kps, wave, pitch,
        ))
    if result.skipped:
        log.warning("skipped %d sequence(s) with missing keypoint files", result.skipped)
    for name, reason in result.rejected.items():
        log.warning("rejected sequence %s: %s", name, reason)
    return result


def mean_frame(dataset: list[PairedSequence], instrument: str | None = None) -> np.ndarray:
    seqs = [s for s in dataset if instrument is None or s.instrument == instrument]
    if not seqs:
        raise DatasetError(f"no sequences for instrument {instrument!r}")
    return np.concatenate([s.frames for s in seqs]).mean(axis=0).astype(np.float32)
