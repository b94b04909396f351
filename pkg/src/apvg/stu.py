"""Structured Temporal UNet: UNet + convolutional GRU on the bottleneck + GCN over keypoint blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import PipelineConfig, SkeletonGraph
from .dlt import heatmaps_torch
from .nets import down, kaiming_init, seeded, up


COARSE_CLAMP = 1e-3


@dataclass
class MotionGraphBatch:
    """Node features ``(B, P, C*k*k)`` in keypoint order, plus the skeleton they live on."""

    nodes: torch.Tensor
    skeleton: SkeletonGraph | None = None


# ---------------------------------------------------------------------------
# keypoint-anchored feature blocks
# ---------------------------------------------------------------------------


def _block_grid(keypoints: torch.Tensor, k: int, h: int, w: int) -> torch.Tensor:
    # cell centres sit at (i + 0.5) / w, so pixel coordinate = x * w - 0.5 (align_corners=False)
    offs = torch.arange(k, dtype=keypoints.dtype, device=keypoints.device) - k // 2
    gx = (2 * keypoints[..., 0:1] - 1) + offs * (2.0 / w)  # (B, P, k)
    gy = (2 * keypoints[..., 1:2] - 1) + offs * (2.0 / h)
    b, p = keypoints.shape[:2]
    grid = torch.stack(torch.broadcast_tensors(gx.unsqueeze(2), gy.unsqueeze(3)), dim=-1)  # (B, P, k, k, 2)
    return grid.reshape(b, p * k, k, 2)


def extract_feature_blocks(feature_map: torch.Tensor, keypoints: torch.Tensor, block_size: int) -> torch.Tensor:
    """Bilinearly sample a ``k x k`` block around each keypoint; zero outside the map.

    ``feature_map`` is ``(B, C, h, w)``, ``keypoints`` ``(B, P, 2)`` normalized.
    Returns ``(B, P, C * k * k)``.
    """
    b, c, h, w = feature_map.shape
    k = block_size
    p = keypoints.shape[1]
    grid = _block_grid(keypoints.to(feature_map.dtype), k, h, w)
    out = F.grid_sample(feature_map, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.reshape(b, c, p, k, k).permute(0, 2, 1, 3, 4).reshape(b, p, c * k * k)


def scatter_blocks(feature_map: torch.Tensor, nodes: torch.Tensor, keypoints: torch.Tensor, block_size: int) -> torch.Tensor:
    """Add node blocks back onto the map with the transposed bilinear weights.

    Exactly the adjoint of :func:`extract_feature_blocks`; returns a new map.
    """
    b, c, h, w = feature_map.shape
    k = block_size
    p = keypoints.shape[1]
    vals = nodes.reshape(b, p, c, k, k).permute(0, 2, 1, 3, 4).reshape(b, c, -1)  # (B, C, P*k*k)
    kp = keypoints.to(feature_map.dtype)
    offs = torch.arange(k, dtype=kp.dtype, device=kp.device) - k // 2
    fx = (kp[..., 0:1] * w - 0.5 + offs).unsqueeze(2).expand(b, p, k, k)
    fy = (kp[..., 1:2] * h - 0.5 + offs).unsqueeze(3).expand(b, p, k, k)
    fx, fy = fx.reshape(b, -1), fy.reshape(b, -1)
    x0, y0 = torch.floor(fx), torch.floor(fy)
    out = feature_map.reshape(b, c, h * w).clone()
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            weight = (1 - (fx - xi).abs()) * (1 - (fy - yi).abs())
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long()
            contrib = vals * (weight * valid).unsqueeze(1)
            out = out.scatter_add(2, idx.unsqueeze(1).expand(b, c, -1), contrib)
    return out.reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# GCN and convolutional GRU
# ---------------------------------------------------------------------------


class GCN(nn.Module):
    """Stacked ``X <- act(A_hat X W)`` layers over a fixed normalized adjacency."""

    def __init__(self, adjacency: np.ndarray, dim: int, layers: int = 2, activation=torch.relu):
        super().__init__()
        self.register_buffer("adjacency", torch.as_tensor(np.array(adjacency), dtype=torch.float32))
        self.weights = nn.ParameterList([nn.Parameter(torch.empty(dim, dim)) for _ in range(layers)])
        for wt in self.weights:
            nn.init.kaiming_normal_(wt, nonlinearity="relu")
        self.activation = activation

    def forward(self, nodes: torch.Tensor, adjacency: torch.Tensor | None = None) -> torch.Tensor:
        a = self.adjacency if adjacency is None else adjacency
        x = nodes
        for wt in self.weights:
            x = self.activation(a @ x @ wt)
        return x


def gcn_forward(batch: MotionGraphBatch, gcn: GCN) -> torch.Tensor:
    adj = None
    if batch.skeleton is not None:
        adj = torch.as_tensor(np.array(batch.skeleton.adjacency), dtype=batch.nodes.dtype)
    return gcn(batch.nodes, adj)


class ConvGRUCell(nn.Module):
    """GRU whose gates and candidate are 3x3 convolutions; ``h' = u*c + (1-u)*h``."""

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 2 * hidden_channels, 3, padding=1)
        self.candidate = nn.Conv2d(in_channels + hidden_channels, hidden_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, hidden: torch.Tensor | None = None, force_update: float | None = None):
        if hidden is None:
            hidden = x.new_zeros(x.shape[0], self.hidden_channels, *x.shape[2:])
        reset, update = torch.sigmoid(self.gates(torch.cat([x, hidden], dim=1))).chunk(2, dim=1)
        if force_update is not None:
            update = torch.full_like(update, force_update)
        cand = torch.tanh(self.candidate(torch.cat([x, reset * hidden], dim=1)))
        return update * cand + (1 - update) * hidden


def conv_gru_fuse(cell: ConvGRUCell, bottleneck: torch.Tensor, previous: torch.Tensor | None, force_update=None):
    return cell(bottleneck, previous, force_update)


# ---------------------------------------------------------------------------
# the UNet
# ---------------------------------------------------------------------------


class StructuredTemporalUNet(nn.Module):
    def __init__(self, config: PipelineConfig, skeleton: SkeletonGraph | None = None):
        super().__init__()
        ch = list(config.stu_channels)
        self.levels = len(ch)
        self.tap = config.stu_tap_level
        self.block = config.stu_block_size
        self.use_gcn = config.use_gcn
        self.use_conv_gru = config.use_conv_gru
        self.image_size = config.image_size
        self.alpha = config.heatmap_alpha
        skeleton = skeleton or config.skeleton()
        ca = config.stu_audio_channels
        # each sub-network draws from its own labelled seed so ablations share the rest
        with seeded(config.seed, "stu-encoder"):
            enc, cin = [], 4
            for c in ch:
                enc.append(down(cin, c))
                cin = c
            self.encoder = kaiming_init(nn.ModuleList(enc))
        with seeded(config.seed, "stu-audio"):
            self.audio_proj = kaiming_init(nn.Linear(config.audio_dim, ca))
        with seeded(config.seed, "stu-decoder"):
            dec = [up(ch[-1] + ca, ch[-2])]
            for lvl in range(self.levels - 2, 0, -1):
                dec.append(up(2 * ch[lvl], ch[lvl - 1]))
            dec.append(up(2 * ch[0], ch[0]))
            self.decoder = kaiming_init(nn.ModuleList(dec))
            # zero-initialized so an untrained network passes the coarse frame through
            self.out = nn.Conv2d(ch[0] + 4, 3, 3, padding=1)
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        self.gru = None
        if self.use_conv_gru:
            with seeded(config.seed, "stu-gru"):
                self.gru = kaiming_init(ConvGRUCell(ch[-1], ch[-1]))
        self.gcn = None
        if self.use_gcn:
            with seeded(config.seed, "stu-gcn"):
                self.gcn = GCN(skeleton.adjacency, ch[self.tap - 1] * self.block ** 2, config.gcn_layers)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``(B, 4, H, W)`` -> feature pyramid, shallowest first; the last entry is the bottleneck."""
        if x.shape[1] != 4:
            raise ValueError(f"expected 4 input channels (frame + heatmap), got {x.shape[1]}")
        feats, h = [], x
        for blk in self.encoder:
            h = blk(h)
            feats.append(h)
        return feats

    def refine_graph(self, fmap: torch.Tensor, keypoints: torch.Tensor) -> torch.Tensor:
        nodes = extract_feature_blocks(fmap, keypoints, self.block)
        refined = self.gcn(nodes)
        return scatter_blocks(fmap, refined, keypoints, self.block)

    def decode(self, x: torch.Tensor, feats: list[torch.Tensor], fused: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        a = self.audio_proj(audio)[:, :, None, None].expand(-1, -1, *fused.shape[2:])
        d = self.decoder[0](torch.cat([fused, a], dim=1))
        for i, blk in enumerate(self.decoder[1:]):
            d = blk(torch.cat([d, feats[self.levels - 2 - i]], dim=1))
        base = torch.logit(x[:, :3].clamp(COARSE_CLAMP, 1 - COARSE_CLAMP))
        return torch.sigmoid(base + self.out(torch.cat([d, x], dim=1)))

    def step(self, x: torch.Tensor, keypoints: torch.Tensor, audio: torch.Tensor, hidden: torch.Tensor | None):
        """One frame; returns ``(frame (B, 3, H, W), new hidden)``."""
        feats = self.encode(x)
        bottleneck = feats[-1]
        fused = self.gru(bottleneck, hidden) if self.gru is not None else bottleneck
        if self.gcn is not None:
            feats[self.tap - 1] = self.refine_graph(feats[self.tap - 1], keypoints)
        return self.decode(x, feats, fused, audio), fused

    def make_input(self, coarse: torch.Tensor, keypoints: torch.Tensor, heatmaps: torch.Tensor | None = None) -> torch.Tensor:
        """Concatenate coarse frames ``(..., 3, H, W)`` with ``(..., H, W)`` heatmaps.

        Heatmaps are rendered from the keypoints at frame size when not given.
        """
        if heatmaps is None:
            heatmaps = heatmaps_torch(keypoints, coarse.shape[-1], coarse.shape[-2], self.alpha)
        if heatmaps.shape[-2:] != coarse.shape[-2:]:
            raise ValueError(f"heatmap size {tuple(heatmaps.shape[-2:])} differs from frame size {tuple(coarse.shape[-2:])}")
        return torch.cat([coarse, heatmaps.unsqueeze(-3).to(coarse.dtype)], dim=-3)

    def forward(self, coarse: torch.Tensor, keypoints: torch.Tensor, audio: torch.Tensor,
                heatmaps: torch.Tensor | None = None) -> torch.Tensor:
        """Sequences ``(B, T, 3, H, W)``, ``(B, T, P, 2)``, ``(B, T, D_a)`` -> ``(B, T, 3, H, W)``.

        The recurrent state starts at zeros for each call.
        """
        x = self.make_input(coarse, keypoints, heatmaps)
        hidden, out = None, []
        for t in range(x.shape[1]):
            frame, hidden = self.step(x[:, t], keypoints[:, t], audio[:, t], hidden)
            out.append(frame)
        return torch.stack(out, dim=1)


def stu_generate(
    model: StructuredTemporalUNet,
    coarse_frames: np.ndarray,
    keypoints: np.ndarray,
    audio_features: np.ndarray,
    heatmaps: np.ndarray | None = None,
) -> np.ndarray:
    """Numpy wrapper over one sequence; frames are ``(n, H, W, 3)``, heatmaps ``(n, H, W)``."""
    n = len(coarse_frames)
    lengths = [len(keypoints), len(audio_features)] + ([] if heatmaps is None else [len(heatmaps)])
    if any(m != n for m in lengths):
        raise ValueError(f"length mismatch: {n} frames vs {lengths} keypoint/audio/heatmap entries")
    heat = None if heatmaps is None else torch.as_tensor(np.asarray(heatmaps), dtype=torch.float32)[None]
    with torch.no_grad():
        out = model(
            torch.as_tensor(np.asarray(coarse_frames), dtype=torch.float32).permute(0, 3, 1, 2)[None],
            torch.as_tensor(np.asarray(keypoints), dtype=torch.float32)[None],
            torch.as_tensor(np.asarray(audio_features), dtype=torch.float32)[None],
            heat,
        )
    return out[0].permute(0, 2, 3, 1).numpy()
