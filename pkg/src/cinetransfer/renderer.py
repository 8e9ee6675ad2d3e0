"""Differentiable emission-absorption volume rendering of a DynamicScene."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import _kernels as K
from . import diffcore as dc
from .diffcore import Tensor, primitive
from .geometry import CinematicParams, SE3Pose, pose_tensors, ray_tensors
from .scene import DynamicScene, joints_3d

DEFAULT_RESOLUTION = (64, 64)


class RenderError(RuntimeError):
    pass


class NonDefinedRegionError(RenderError):
    """Camera left the volume where the scene field is defined."""


@dataclass(frozen=True)
class Quadrature:
    n_samples: int = 64
    near: float = 1.5
    far: float = 9.5
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not self.near < self.far:
            raise ValueError("near must be < far")

    @property
    def spacing(self) -> float:
        return (self.far - self.near) / self.n_samples


@lru_cache(maxsize=32)
def _stratified(n_pixels: int, quad: Quadrature) -> np.ndarray:
    rng = np.random.default_rng(quad.seed)
    edges = quad.near + quad.spacing * np.arange(quad.n_samples)
    t = edges[None, :] + quad.spacing * rng.random((n_pixels, quad.n_samples))
    t.setflags(write=False)
    return t


@dataclass
class RenderedFrame:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    opacity: np.ndarray  # (H, W)
    resolution: tuple

    @classmethod
    def from_packed(cls, packed: np.ndarray, resolution) -> RenderedFrame:
        H, W = resolution
        p = packed.reshape(H, W, 5)
        return cls(p[..., :3].copy(), p[..., 3].copy(), p[..., 4].copy(), tuple(resolution))


@primitive("volume_render")
def _volume_render(origins, dirs, bone_a, bone_b, scene, tvals, quad):
    kind, prm, amp, col, _ = scene.primitive_table(np.zeros((scene.actor.joint_count, 3)))
    nbg = scene.background_count
    prm = prm.copy()
    prm[nbg:, :3] = bone_a
    prm[nbg:, 3:6] = bone_b
    bg = scene.background_color
    out = K.render_forward(origins, dirs, tvals, quad.spacing, kind, prm, amp, col, bg, quad.far)
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise RenderError(f"non-finite radiance sample at pixel {bad}")

    def vjp(g):
        rows = np.flatnonzero(np.any(g != 0, axis=1))
        go = np.zeros_like(origins)
        gd = np.zeros_like(dirs)
        if rows.size == 0:
            return go, gd, np.zeros_like(bone_a), np.zeros_like(bone_b)
        r_o, r_d, g_prm = K.render_backward(origins, dirs, tvals, quad.spacing, kind, prm, amp,
                                            col, bg, quad.far, rows.astype(np.int64),
                                            np.ascontiguousarray(g[rows]))
        go[rows] = r_o
        gd[rows] = r_d
        return go, gd, g_prm[nbg:, :3], g_prm[nbg:, 3:6]

    return out, vjp


@dataclass
class CameraTensors:
    """Differentiable view of one camera's cinematic parameters."""

    vector: Tensor  # (8,) = xi(6), focal, time
    R: Tensor
    t: Tensor
    focal: Tensor
    time: Tensor
    base: SE3Pose

    @classmethod
    def build(cls, vector: Tensor, base: SE3Pose) -> CameraTensors:
        R, t = pose_tensors(base, vector[0:6])
        return cls(vector, R, t, vector[6], vector[7], base)


def check_defined(scene: DynamicScene, position) -> None:
    if not scene.inside(position):
        raise NonDefinedRegionError(
            f"camera at {np.round(np.asarray(position), 3).tolist()} is outside the scene bounds")


def render_tensor(cam: CameraTensors, scene: DynamicScene, resolution, quad: Quadrature):
    """Packed ``(H*W, 5)`` Tensor (rgb, depth, opacity) plus the ray tensors."""
    check_defined(scene, cam.t.data)
    origins, dirs = ray_tensors(cam.R, cam.t, cam.focal, resolution)
    joints = joints_3d(scene, cam.time)
    bones = scene.actor.bones
    bone_a = dc.gather(joints, bones[:, 0])
    bone_b = dc.gather(joints, bones[:, 1])
    tvals = _stratified(origins.shape[0], quad)
    packed = dc.record("volume_render", [origins, dirs, bone_a, bone_b],
                       scene=scene, tvals=tvals, quad=quad)
    return packed, origins, dirs


def render(params: CinematicParams, scene: DynamicScene, resolution=DEFAULT_RESOLUTION,
           quadrature: Quadrature | None = None) -> RenderedFrame:
    quad = quadrature or Quadrature()
    cam = CameraTensors.build(Tensor(params.vector()), params.pose)
    packed, _, _ = render_tensor(cam, scene, resolution, quad)
    return RenderedFrame.from_packed(packed.data, resolution)


def render_window(param_pair, scene: DynamicScene, resolution=DEFAULT_RESOLUTION,
                  quadrature: Quadrature | None = None):
    return tuple(render(p, scene, resolution, quadrature) for p in param_pair)


def write_ppm(path, color: np.ndarray) -> Path:
    path = Path(path)
    img = np.clip(np.round(np.asarray(color) * 255), 0, 255).astype(np.uint8)
    H, W, _ = img.shape
    path.write_bytes(f"P6\n{W} {H}\n255\n".encode() + img.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H = map(int, parts[1].split())
    img = np.frombuffer(parts[3], dtype=np.uint8, count=W * H * 3).reshape(H, W, 3)
    return img.astype(np.float64) / 255.0


def write_float_grid(path, grid: np.ndarray, comment: str = "") -> Path:
    """Plain-text float grid: ``PF2`` magic, optional comment, ``W H``, then rows."""
    path = Path(path)
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape
    lines = ["PF2"]
    if comment:
        lines.append("# " + comment)
    lines.append(f"{W} {H}")
    lines += [" ".join(f"{v:.9g}" for v in row) for row in grid]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_float_grid(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if lines[0] != "PF2":
        raise ValueError(f"{path}: not a float grid")
    W, H = map(int, lines[1].split())
    return np.array([[float(v) for v in ln.split()] for ln in lines[2:2 + H]]).reshape(H, W)


def dump_frame(out_dir, frame: RenderedFrame, index: int, role: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    c = write_ppm(out_dir / f"{role}_{index:04d}_color.ppm", frame.color)
    d = write_float_grid(out_dir / f"{role}_{index:04d}_depth.pgm", frame.depth, "expected depth")
    return c, d
