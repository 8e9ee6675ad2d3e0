"""Guidance maps and gradient-masked pixel sampling.

Every pixel takes part in the forward pass; only the sampled ones pass an
adjoint back into the renderer.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc

GUARD = 1e-12


@dataclass
class GuidanceMap:
    data: np.ndarray  # (H, W), values in [0, 2]
    resolution: tuple

    def dump(self, path) -> Path:
        """Write as a plain PGM (P2), scaled so 2.0 maps to 255."""
        path = Path(path)
        H, W = self.resolution
        px = np.clip(np.round(self.data / 2.0 * 255), 0, 255).astype(int)
        rows = "\n".join(" ".join(map(str, r)) for r in px)
        path.write_text(f"P2\n{W} {H}\n255\n{rows}\n")
        return path


def _arr(x):
    if isinstance(x, dc.Tensor):
        return x.data
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo + GUARD)


def guidance_map(H_ref, H_syn, O_ref=None, O_syn=None) -> GuidanceMap:
    """Sum of min-max-normalized heatmap and flow difference maps.

    Flow arguments may be omitted (the last frame of a window has no outgoing
    flow); the flow addend is then zero.
    """
    hr, hs = _arr(H_ref), _arr(H_syn)
    if hr.shape != hs.shape:
        raise dc.ShapeError("guidance_map", [hr.shape, hs.shape])
    H, W = hr.shape[:2]
    g = minmax(np.abs(hr - hs).reshape(H, W, -1).sum(axis=2))
    if O_ref is not None and O_syn is not None:
        fr = _arr(O_ref).reshape(H, W, 2)
        fs = _arr(O_syn).reshape(H, W, 2)
        g = g + minmax(np.abs(fr - fs).sum(axis=2))
    return GuidanceMap(g, (H, W))


def sample_pixels(G: GuidanceMap | np.ndarray, n: int, rng_seed=0, floor: float | None = None,
                  jitter_px: float = 0.0) -> np.ndarray:
    """Draw ``n`` distinct flat pixel indices with probability proportional to G + u0.

    ``u0`` defaults to 5% of mean(G). With ``jitter_px > 0`` each draw is
    displaced by a Gaussian of that std, rounded to the grid; collisions fall
    back to the undisplaced pixel, then to random unused pixels.
    """
    data = G.data if isinstance(G, GuidanceMap) else np.asarray(G, dtype=np.float64)
    H, W = data.shape
    P = H * W
    if not 1 <= n <= P:
        raise ValueError(f"sample count {n} outside [1, {P}]")
    rng = np.random.default_rng(rng_seed)
    if n == P:
        return np.arange(P)
    u0 = 0.05 * float(data.mean()) if floor is None else float(floor)
    w = data.reshape(-1) + u0
    if not np.any(w > 0):
        w = np.ones(P)
    support = np.count_nonzero(w)
    if support < n:
        # not enough mass for n distinct draws: top up uniformly
        w = w + (w.sum() / P if w.sum() > 0 else 1.0) * 1e-9
    idx = rng.choice(P, size=n, replace=False, p=w / w.sum())
    if jitter_px > 0:
        r, c = np.divmod(idx, W)
        r2 = np.clip(np.round(r + rng.normal(0, jitter_px, n)), 0, H - 1).astype(int)
        c2 = np.clip(np.round(c + rng.normal(0, jitter_px, n)), 0, W - 1).astype(int)
        moved = r2 * W + c2
        taken = set()
        out = []
        for orig, m in zip(idx, moved):
            pick = m if m not in taken else orig
            if pick in taken:
                continue
            taken.add(pick)
            out.append(pick)
        if len(out) < n:
            spare = [p for p in rng.permutation(P) if p not in taken]
            out += spare[: n - len(out)]
        idx = np.array(out)
    return np.sort(idx)


def pixel_mask(indices, n_pixels: int) -> np.ndarray:
    keep = np.zeros((n_pixels, 1))
    keep[np.asarray(indices, dtype=np.intp)] = 1.0
    return keep


def apply_gradient_mask(tape: dc.Tape, pixel_nodes, sampled) -> dc.Tape:
    """Zero the adjoints of un-sampled rows of each ``(P, ...)`` pixel node.

    Forward values are untouched. Returns the tape for chaining.
    """
    for node in pixel_nodes:
        keep = pixel_mask(sampled, node.shape[0])
        keep = keep.reshape((node.shape[0],) + (1,) * (node.ndim - 1))
        tape.mask(node, keep, pixel_axes=1)
    return tape
