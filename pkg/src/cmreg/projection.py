"""Orthographic depth-image rendering of point clouds from fixed viewpoints.

Each view rotates the cloud about the vertical (y) axis by an equal azimuth
step and z-buffers the points onto an R x R grid covering [-1, 1]^2.  Pixel
intensity encodes nearness: 1 - normalized depth, background 0.  Rendering
is deterministic; depth ties go to the lower point index.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DepthImageStack:
    views: np.ndarray  # (V, R, R), values in [0, 1]
    view_angles: np.ndarray  # V azimuths in degrees


def _azimuth_step_matrix(v_count: int) -> np.ndarray:
    a = math.radians(360.0 / v_count)
    c, s = math.cos(a), math.sin(a)
    # rotation about the vertical (y) axis
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rasterize(points: np.ndarray, resolution: int) -> np.ndarray:
    """Project (x, y) onto the grid; keep the nearest point (largest z)."""
    img = np.zeros((resolution, resolution))
    px = np.clip(((points[:, 0] + 1.0) / 2.0 * resolution).astype(int), 0, resolution - 1)
    py = np.clip(((points[:, 1] + 1.0) / 2.0 * resolution).astype(int), 0, resolution - 1)
    # intensity = 1 - depth, with depth = (1 - z)/2 over the unit sphere
    val = (points[:, 2] + 1.0) / 2.0
    for i in range(len(points)):
        # strict > keeps the earlier (lower-index) point on exact ties
        if val[i] > img[py[i], px[i]]:
            img[py[i], px[i]] = val[i]
    return img


def render_views(points: np.ndarray, v_count: int = 4, resolution: int = 32) -> DepthImageStack:
    """Render V orthographic depth views at azimuths 360*v/V degrees.

    The azimuth rotation is applied incrementally (view v+1 rotates view v's
    cloud by one step), so pre-rotating the input by one step cyclically
    permutes the stack bit-for-bit.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("render_views: empty cloud")
    if v_count < 1:
        raise ValueError("render_views: v_count must be >= 1")
    if resolution < 4:
        raise ValueError("render_views: resolution must be >= 4")
    step = _azimuth_step_matrix(v_count)
    views = np.zeros((v_count, resolution, resolution))
    current = points
    for v in range(v_count):
        views[v] = _rasterize(current, resolution)
        current = current @ step.T
    angles = np.array([360.0 * v / v_count for v in range(v_count)])
    return DepthImageStack(views=views, view_angles=angles)


def write_pgm_views(stack: DepthImageStack, out_dir, prefix: str = "view") -> list:
    """Dump each view as an ASCII PGM (P2) file for visual inspection."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for v, img in enumerate(stack.views):
        path = os.path.join(out_dir, f"{prefix}_{v:02d}.pgm")
        gray = np.round(img * 255).astype(int)
        with open(path, "w") as fh:
            fh.write(f"P2\n{img.shape[1]} {img.shape[0]}\n255\n")
            for row in gray:
                fh.write(" ".join(str(x) for x in row) + "\n")
        paths.append(path)
    return paths
