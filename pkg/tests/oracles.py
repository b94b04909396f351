"""Independent reference computations used as test oracles.

These are written as plain loops on purpose so they share no code path with
the vectorized implementations they check.
"""

import math

import numpy as np


def heatmap_loops(grid_coords, width, height, alpha):
    out = np.zeros((width, height))
    for i in range(width):
        for j in range(height):
            total = 0.0
            for x, y in grid_coords:
                total += alpha * max(0.0, 1.0 - abs(i - x)) * max(0.0, 1.0 - abs(j - y))
            out[i, j] = total
    return out


def central_difference(fn, x, step=1e-4):
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += step
        dn[idx] -= step
        grad[idx] = (fn(up) - fn(dn)) / (2 * step)
    return grad


def stacked_l2(pred, real):
    """Per-frame norm of all stacked coordinate differences, averaged over frames."""
    total = 0.0
    for p_frame, r_frame in zip(pred, real):
        sq = 0.0
        for (px, py), (rx, ry) in zip(p_frame, r_frame):
            sq += (px - rx) ** 2 + (py - ry) ** 2
        total += math.sqrt(sq)
    return total / len(pred)


def mean_abs(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return sum(abs(x - y) for x, y in zip(a, b)) / len(a)


def bilinear_sample(fmap, x, y):
    """Zero-padded bilinear read of ``fmap (C, h, w)`` at continuous pixel position (x, y)."""
    c, h, w = fmap.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(c)
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wt = (1 - abs(x - xi)) * (1 - abs(y - yi))
            if 0 <= xi < w and 0 <= yi < h:
                out += wt * fmap[:, yi, xi]
    return out


def feature_blocks_loops(fmap, keypoints, k):
    """Blocks of ``k x k`` samples centred on each normalized keypoint, cell centres at (i + 0.5) / w."""
    c, h, w = fmap.shape
    rows = []
    for kx, ky in keypoints:
        block = np.zeros((c, k, k))
        for a in range(k):
            for b in range(k):
                px = kx * w - 0.5 + (b - k // 2)
                py = ky * h - 0.5 + (a - k // 2)
                block[:, a, b] = bilinear_sample(fmap, px, py)
        rows.append(block.ravel())
    return np.stack(rows)
