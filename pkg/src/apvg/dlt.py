"""Differentiable landmark-to-heatmap transform.

Each landmark contributes a separable tent kernel

    grid[i, j] += alpha * max(0, 1 - |i - x_s|) * max(0, 1 - |j - y_s|)

where ``i`` runs over the width and ``j`` over the height of the grid.
The map is piecewise linear in the landmark coordinates; at the kinks
(``|i - x_s|`` in {0, 1}) the derivative convention is 0.
"""

from __future__ import annotations

import numpy as np
import torch

from .core import Heatmap, KeypointSet


def to_grid(keypoints: KeypointSet | np.ndarray, width: int, height: int) -> np.ndarray:
    """Scale normalized coordinates to grid units: x * (W - 1), y * (H - 1)."""
    if width < 2 or height < 2:
        raise ValueError("grid must be at least 2x2")
    coords = keypoints.coords if isinstance(keypoints, KeypointSet) else np.asarray(keypoints, dtype=np.float64)
    return coords * np.array([width - 1, height - 1], dtype=np.float64)


def from_grid(grid_coords: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.asarray(grid_coords, dtype=np.float64) / np.array([width - 1, height - 1], dtype=np.float64)


def _tents(grid_coords: np.ndarray, width: int, height: int):
    g = np.asarray(grid_coords, dtype=np.float64)
    dx = np.arange(width)[None, :] - g[:, 0:1]  # (P, W)
    dy = np.arange(height)[None, :] - g[:, 1:2]  # (P, H)
    return dx, dy, np.maximum(0.0, 1.0 - np.abs(dx)), np.maximum(0.0, 1.0 - np.abs(dy))


def render_heatmap(grid_coords: np.ndarray, width: int, height: int, alpha: float = 1.0) -> Heatmap:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    _, _, kx, ky = _tents(grid_coords, width, height)
    return Heatmap(alpha * kx.T @ ky, alpha)


def _tent_slope(d: np.ndarray) -> np.ndarray:
    # d/dc of max(0, 1 - |i - c|) = sign(i - c) strictly inside the support, 0 at kinks
    inside = (np.abs(d) > 0.0) & (np.abs(d) < 1.0)
    return np.where(inside, np.sign(d), 0.0)


def render_heatmap_grad(
    grid_coords: np.ndarray,
    width: int,
    height: int,
    alpha: float,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient of ``<upstream, render_heatmap(...)>`` w.r.t. each (x_s, y_s).

    ``upstream`` has the heatmap's (W, H) layout. Returns a (P, 2) array in
    grid units.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (width, height):
        raise ValueError(f"upstream must have shape {(width, height)}, got {upstream.shape}")
    dx, dy, kx, ky = _tents(grid_coords, width, height)
    sx, sy = _tent_slope(dx), _tent_slope(dy)
    u_ky = ky @ upstream.T  # (P, W): sum_j U[i, j] ky[s, j]
    u_kx = kx @ upstream  # (P, H): sum_i U[i, j] kx[s, i]
    gx = alpha * np.sum(sx * u_ky, axis=1)
    gy = alpha * np.sum(sy * u_kx, axis=1)
    return np.stack([gx, gy], axis=1)


def render_keypoints(keypoints: KeypointSet, width: int, height: int, alpha: float = 1.0) -> Heatmap:
    return render_heatmap(to_grid(keypoints, width, height), width, height, alpha)


# ---------------------------------------------------------------------------
# torch path used inside the networks
# ---------------------------------------------------------------------------


def heatmaps_torch(coords: torch.Tensor, width: int, height: int, alpha: float = 1.0) -> torch.Tensor:
    """Batched renderer on normalized coords ``(..., P, 2)``.

    Returns images laid out row-major ``(..., H, W)`` so they stack with
    frames as an extra channel. torch's subgradients of ``abs`` and ``relu``
    at 0 are both 0, which matches the kink convention above.
    """
    gx = coords[..., 0] * (width - 1)
    gy = coords[..., 1] * (height - 1)
    ix = torch.arange(width, dtype=coords.dtype, device=coords.device)
    iy = torch.arange(height, dtype=coords.dtype, device=coords.device)
    kx = torch.relu(1.0 - (ix - gx.unsqueeze(-1)).abs())  # (..., P, W)
    ky = torch.relu(1.0 - (iy - gy.unsqueeze(-1)).abs())  # (..., P, H)
    return alpha * torch.einsum("...sh,...sw->...hw", ky, kx)
