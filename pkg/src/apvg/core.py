"""Domain types, skeleton graphs and the validated pipeline configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

SCHEMA_VERSION = 1

BODY25_EDGES = [
    (1, 8), (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (8, 9), (9, 10),
    (10, 11), (8, 12), (12, 13), (13, 14), (1, 0), (0, 15), (15, 17), (0, 16),
    (16, 18), (14, 19), (19, 20), (14, 21), (11, 22), (22, 23), (11, 24),
]
HAND21_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 4), (0, 5), (5, 6), (6, 7), (7, 8), (0, 9),
    (9, 10), (10, 11), (11, 12), (0, 13), (13, 14), (14, 15), (15, 16),
    (0, 17), (17, 18), (18, 19), (19, 20),
]
BODY_POINTS = 25
HAND_POINTS = 21
LEFT_HAND_OFFSET = BODY_POINTS
RIGHT_HAND_OFFSET = BODY_POINTS + HAND_POINTS
# body-25 wrist indices (OpenPose: 4 = right wrist, 7 = left wrist)
RIGHT_WRIST = 4
LEFT_WRIST = 7


class ConfigError(ValueError):
    """Raised for invalid configuration values; the message names the field."""


class SkeletonError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeypointSet:
    """P landmark coordinates of one frame, normalized to [0, 1]^2."""

    coords: np.ndarray
    instrument: str = "cello"

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"keypoints must have shape (P, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("keypoint coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    def is_valid(self) -> bool:
        """True when every coordinate lies inside the unit square."""
        return bool(np.all((self.coords >= 0.0) & (self.coords <= 1.0)))


@dataclass(frozen=True)
class Heatmap:
    """W x H grid, indexed ``grid[i, j]`` with i over width and j over height."""

    grid: np.ndarray
    alpha: float = 1.0

    @property
    def width(self) -> int:
        return self.grid.shape[0]

    @property
    def height(self) -> int:
        return self.grid.shape[1]

    def to_image(self) -> np.ndarray:
        """Row-major (H, W) array clipped to [0, 1], for display only."""
        return np.clip(self.grid.T, 0.0, 1.0)


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame must have shape (H, W, 3), got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class SkeletonGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray
    normalization: str = "symmetric"


# ---------------------------------------------------------------------------
# Skeleton
# ---------------------------------------------------------------------------


def openpose_edges() -> list[tuple[int, int]]:
    """Body-25 plus both 21-point hands, each hand hung off its wrist."""
    edges = list(BODY25_EDGES)
    for offset, wrist in ((LEFT_HAND_OFFSET, LEFT_WRIST), (RIGHT_HAND_OFFSET, RIGHT_WRIST)):
        edges.append((wrist, offset))
        edges.extend((a + offset, b + offset) for a, b in HAND21_EDGES)
    return edges


TOPOLOGIES = {
    "openpose25_hands": (openpose_edges, BODY_POINTS + 2 * HAND_POINTS),
}


def _chain_edges(count: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(count - 1)]


def build_skeleton(
    edge_spec: str | Iterable[Sequence[int]],
    count: int,
    normalization: str = "symmetric",
) -> SkeletonGraph:
    """Build a skeleton graph with a self-looped, normalized adjacency.

    ``edge_spec`` is either a named topology (``"openpose25_hands"``,
    ``"chain"``) or an explicit iterable of index pairs. ``normalization``
    selects ``D^-1/2 (A+I) D^-1/2`` ("symmetric") or ``D^-1 (A+I)`` ("row").
    """
    if count <= 0:
        raise SkeletonError(f"node count must be positive, got {count}")
    if isinstance(edge_spec, str):
        if edge_spec == "chain":
            raw = _chain_edges(count)
        elif edge_spec in TOPOLOGIES:
            make, expected = TOPOLOGIES[edge_spec]
            if count != expected:
                raise SkeletonError(
                    f"topology {edge_spec!r} has {expected} nodes, got count={count}"
                )
            raw = make()
        else:
            raise SkeletonError(f"unknown topology {edge_spec!r}")
    else:
        raw = [tuple(e) for e in edge_spec]

    edge_set: set[tuple[int, int]] = set()
    for e in raw:
        if len(e) != 2:
            raise SkeletonError(f"edge {e!r} is not a pair")
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < count and 0 <= j < count):
            raise SkeletonError(f"edge ({i}, {j}) out of range for {count} nodes")
        if i != j:
            edge_set.add((i, j))
            edge_set.add((j, i))
    edges = tuple(sorted(edge_set))

    a = np.eye(count, dtype=np.float64)
    for i, j in edges:
        a[i, j] = 1.0
    deg = a.sum(axis=1)
    if normalization == "symmetric":
        inv_sqrt = 1.0 / np.sqrt(deg)
        adj = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    elif normalization == "row":
        adj = a / deg[:, None]
    else:
        raise SkeletonError(f"unknown normalization {normalization!r}")
    adj.setflags(write=False)
    return SkeletonGraph(count, edges, adj, normalization)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_ARCH = ("khp", "cvg", "fhvg")


def _f(default, *stages, kind=None):
    """Config field; ``stages`` lists the checkpoints whose hash covers it."""
    meta = {"stages": stages}
    if kind is not None:
        meta["kind"] = kind
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline. Loaded from a flat YAML mapping."""

    schema_version: int = _f(SCHEMA_VERSION)
    seed: int = _f(0, *_ARCH)

    # data
    keypoint_count: int = _f(67, *_ARCH, kind="size")
    topology: str = _f("openpose25_hands", *_ARCH)
    adjacency_normalization: str = _f("symmetric", "fhvg")
    image_size: int = _f(256, "cvg", "fhvg", kind="size")
    sample_rate: int = _f(44100, *_ARCH, kind="size")
    hop_length: int = _f(256, *_ARCH, kind="size")
    cqt_bins: int = _f(84, *_ARCH, kind="size")
    clip_hops: int = _f(87, *_ARCH, kind="size")
    instrument: str = _f("cello", *_ARCH)

    # toy data
    toy_sequences: int = _f(8, kind="size")
    toy_frames: int = _f(32, kind="size")
    toy_pitch_low: int = _f(48)
    toy_pitch_high: int = _f(60)

    # KHP
    heatmap_alpha: float = _f(1.0, *_ARCH, kind="weight")
    vis_heatmap_size: int = _f(64, "khp", kind="size")
    motion_dim: int = _f(256, "khp", kind="size")
    khp_hidden: int = _f(256, "khp", kind="size")
    lambda_vis: float = _f(1.0, "khp", kind="weight")
    khp_steps: int = _f(600, "khp", kind="size")

    # CVG
    audio_dim: int = _f(256, "cvg", "fhvg", kind="size")
    noise_dim: int = _f(16, "cvg", "fhvg", kind="size")
    noise_per_frame: bool = _f(True, "cvg", "fhvg")
    backbone: str = _f("random", "cvg", "fhvg")
    backbone_weights: str = _f("", "cvg", "fhvg")
    backbone_widths: list = _f([8, 16, 32], "cvg", "fhvg", kind="size")
    cvg_steps: int = _f(600, "cvg", kind="size")
    cvg_batch: int = _f(8, "cvg", kind="size")

    # STU / FHVG
    stu_channels: list = _f([8, 16, 32, 48, 64], "fhvg", kind="size")
    stu_audio_channels: int = _f(32, "fhvg", kind="size")
    stu_tap_level: int = _f(3, "fhvg", kind="size")
    stu_block_size: int = _f(3, "fhvg", kind="size")
    gcn_layers: int = _f(2, "fhvg", kind="size")
    use_gcn: bool = _f(True, "fhvg")
    use_conv_gru: bool = _f(True, "fhvg")
    stu_train_keypoints: str = _f("real", "fhvg")
    perceptual_taps: list = _f([2, 4, 5], "fhvg")
    disc_mismatch_pairs: bool = _f(True, "fhvg")
    lambda_adv: float = _f(1.0, "fhvg", kind="weight")
    lambda_perc: float = _f(10.0, "fhvg", kind="weight")
    adv_warmup: float = _f(0.5, "fhvg", kind="weight")
    literal_discriminator_loss: bool = _f(False, "fhvg")
    fhvg_steps: int = _f(600, "fhvg", kind="size")
    fhvg_window: int = _f(4, "fhvg", kind="size")
    fhvg_batch: int = _f(2, "fhvg", kind="size")

    # optimisation
    lr: float = _f(1e-3, *_ARCH, kind="weight")
    lr_final: float = _f(1.25e-4, *_ARCH, kind="weight")

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            kind = f.metadata.get("kind")
            if kind == "size":
                values = value if isinstance(value, list) else [value]
                if not values or any(not isinstance(v, int) or isinstance(v, bool) or v <= 0 for v in values):
                    raise ConfigError(f"{f.name} must be a positive integer, got {value!r}")
            elif kind == "weight":
                if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
                    raise ConfigError(f"{f.name} must be a non-negative number, got {value!r}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {self.schema_version!r} unsupported (expected {SCHEMA_VERSION})"
            )
        if self.heatmap_alpha <= 0:
            raise ConfigError("heatmap_alpha must be positive")
        if self.adv_warmup > 1:
            raise ConfigError("adv_warmup is a fraction of training and must be at most 1")
        if self.stu_block_size % 2 == 0:
            raise ConfigError("stu_block_size must be odd")
        if not 1 <= self.stu_tap_level <= len(self.stu_channels):
            raise ConfigError("stu_tap_level must index a level of stu_channels")
        if self.image_size % (2 ** len(self.stu_channels)) != 0:
            raise ConfigError("image_size must be divisible by 2**len(stu_channels)")
        if self.stu_train_keypoints not in ("real", "pred"):
            raise ConfigError("stu_train_keypoints must be 'real' or 'pred'")
        if self.backbone not in ("random", "vgg19"):
            raise ConfigError("backbone must be 'random' or 'vgg19'")
        if len(self.backbone_widths) != 3:
            raise ConfigError("backbone_widths must list 3 widths")
        if not self.perceptual_taps or any(
            not isinstance(t, int) or t < 0 or t > 5 for t in self.perceptual_taps
        ):
            raise ConfigError("perceptual_taps must be layer indices in [0, 5]")
        if self.toy_pitch_high <= self.toy_pitch_low:
            raise ConfigError("toy_pitch_high must exceed toy_pitch_low")
        if self.adjacency_normalization not in ("symmetric", "row"):
            raise ConfigError("adjacency_normalization must be 'symmetric' or 'row'")

    # -- helpers ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def hash(self, stage: str | None = None) -> str:
        """Stable digest of the config, or of the fields one stage depends on."""
        data = self.to_dict()
        if stage is not None:
            data = {
                f.name: data[f.name]
                for f in dataclasses.fields(self)
                if stage in f.metadata.get("stages", ())
            }
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def skeleton(self) -> SkeletonGraph:
        return build_skeleton(self.topology, self.keypoint_count, self.adjacency_normalization)

    @property
    def clip_samples(self) -> int:
        return self.clip_hops * self.hop_length


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of keys to values")
    if "schema_version" not in data:
        raise ConfigError("missing required key: schema_version")
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested mappings are not allowed")
        default = known[key].default
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            data = {**data, key: float(value)}
    return PipelineConfig(**data)


def load_config(path: str | Path) -> PipelineConfig:
    """Read and validate a flat YAML config; missing keys take defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data if data is not None else {})


def save_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
