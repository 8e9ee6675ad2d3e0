"""Brute-force volume rendering of single rays by fine midpoint quadrature.

Uses only the point-wise field queries, not the renderer's kernels, so it
checks the interval culling, stratification and compositing independently.
"""
from __future__ import annotations

import numpy as np

from ..geometry import generate_ray
from ..scene import sample_color, sample_density


def render_ray(scene, origin, direction, time: float, near: float, far: float,
               n: int = 4000) -> np.ndarray:
    """(r, g, b, opacity) along ``origin + t * direction`` for t in [near, far]."""
    dt = (far - near) / n
    t = near + dt * (np.arange(n) + 0.5)
    pts = np.asarray(origin)[None] + t[:, None] * np.asarray(direction)[None]
    sig = sample_density(scene, pts, time)
    rgb = sample_color(scene, pts, time)
    alpha = 1.0 - np.exp(-sig * dt)
    T = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    w = T * alpha
    op = w.sum()
    col = (w[:, None] * rgb).sum(axis=0) + (1.0 - op) * scene.background_color
    return np.concatenate([col, [op]])


def render_pixels(params, scene, pixels, resolution, near=1.5, far=9.5, n=4000) -> np.ndarray:
    """Rows of (r, g, b, opacity) for each (x, y) pixel centre."""
    pose = params.world_pose()
    out = []
    for px in pixels:
        ray = generate_ray(px, pose, params.focal, resolution)
        out.append(render_ray(scene, ray.origin, ray.direction, params.time, near, far, n))
    return np.array(out)
