"""Differentiable stand-ins for the pose and flow estimators.

``render_heatmaps`` splats one Gaussian per projected joint, weighted by the
background transmittance between camera and joint. ``induced_flow`` moves each
pixel's expected surface point by the actor's motion (in actor-dominated
pixels) and reprojects it into the next camera.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from . import diffcore as dc
from .diffcore import Tensor, primitive
from .geometry import Z_MIN, CinematicParams, pixel_grid, project_tensor
from .renderer import CameraTensors, Quadrature, RenderedFrame, render_tensor
from .scene import DynamicScene, joints_3d

MAGIC = b"CTRF"
VERSION = 1
ACTOR_GATE = 0.5
FLOW_OPACITY_GATE = 1e-3


class ReferenceFormatError(ValueError):
    pass


def default_sigma(resolution) -> float:
    H, W = resolution
    return 0.02 * float(np.hypot(H, W))


@dataclass
class HeatmapStack:
    data: np.ndarray  # (H, W, J)
    sigma_px: float
    resolution: tuple

    @property
    def joint_count(self) -> int:
        return self.data.shape[2]


@dataclass
class FlowField:
    data: np.ndarray  # (H, W, 2)

    @property
    def resolution(self) -> tuple:
        return self.data.shape[:2]


@dataclass
class ReferenceClip:
    heatmaps: list  # [HeatmapStack]
    flows: list  # [FlowField]
    colors: list | None = None  # optional [(H, W, 3)]
    meta: dict = field(default_factory=lambda: {"source": "internal-render"})

    def __post_init__(self):
        if len(self.flows) != len(self.heatmaps) - 1:
            raise ReferenceFormatError(
                f"expected {len(self.heatmaps) - 1} flows for {len(self.heatmaps)} frames, "
                f"got {len(self.flows)}")
        res = {h.resolution for h in self.heatmaps} | {f.resolution for f in self.flows}
        if len(res) > 1:
            raise ReferenceFormatError(f"inconsistent resolutions {sorted(res)}")
        if len({h.joint_count for h in self.heatmaps}) > 1:
            raise ReferenceFormatError("inconsistent joint counts")

    def __len__(self):
        return len(self.heatmaps)

    @property
    def resolution(self) -> tuple:
        return self.heatmaps[0].resolution

    @property
    def joint_count(self) -> int:
        return self.heatmaps[0].joint_count


# --- heatmaps ----------------------------------------------------------------------------------


@primitive("background_transmittance")
def _bg_transmittance(origin, targets, scene, n_steps):
    kind, prm, amp, _ = scene.background_table
    J = targets.shape[0]
    origins = np.broadcast_to(origin, (J, 3)).copy()
    tau, g_o, g_t = K.segment_optical_depth(origins, np.ascontiguousarray(targets), n_steps,
                                            kind, prm, amp)
    trans = np.exp(-tau)

    def vjp(g):
        gt = -(g * trans)
        return (gt @ g_o, gt[:, None] * g_t)

    return trans, vjp


def heatmap_tensor(cam: CameraTensors, scene: DynamicScene, resolution, sigma_px=None,
                   occlusion: bool = True, n_steps: int = 48):
    """``(H, W, J)`` heatmap Tensor for the camera, differentiable in all 8 parameters."""
    H, W = resolution
    sigma = default_sigma(resolution) if sigma_px is None else sigma_px
    joints = joints_3d(scene, cam.time)
    uv, z = project_tensor(joints, cam.R, cam.t, cam.focal, resolution)
    front = (z.data > Z_MIN).astype(np.float64)
    if occlusion:
        amp = dc.record("background_transmittance", [cam.t, joints], scene=scene, n_steps=n_steps)
        amp = amp * front
    else:
        amp = Tensor(front)
    cols = np.arange(W, dtype=np.float64)[:, None]
    rows = np.arange(H, dtype=np.float64)[:, None]
    gx = dc.exp(dc.square(cols - uv[:, 0].reshape(1, -1)) * (-0.5 / sigma**2))  # (W, J)
    gy = dc.exp(dc.square(rows - uv[:, 1].reshape(1, -1)) * (-0.5 / sigma**2))  # (H, J)
    heat = gy.reshape(H, 1, -1) * gx.reshape(1, W, -1) * amp.reshape(1, 1, -1)
    return heat


def render_heatmaps(params: CinematicParams, scene: DynamicScene, resolution=(64, 64),
                    sigma_px=None, occlusion: bool = True) -> HeatmapStack:
    cam = CameraTensors.build(Tensor(params.vector()), params.pose)
    heat = heatmap_tensor(cam, scene, resolution, sigma_px, occlusion)
    sigma = default_sigma(resolution) if sigma_px is None else sigma_px
    return HeatmapStack(heat.data, sigma, tuple(resolution))


# --- flow --------------------------------------------------------------------------------------


def _bone_terms(x, A, B, radius, amp):
    """Per (point, bone): density, segment parameter, residual, clamp flag."""
    u = B - A  # (Nb, 3)
    uu = np.maximum(np.sum(u * u, axis=1), 1e-18)
    rel = x[:, None, :] - A[None]  # (P, Nb, 3)
    s_raw = np.einsum("pbk,bk->pb", rel, u) / uu
    s = np.clip(s_raw, 0.0, 1.0)
    e = rel - s[..., None] * u[None]
    d2 = np.sum(e * e, axis=2)
    sig = amp[None] * np.exp(-d2 / (2 * radius[None] ** 2))
    interior = (s_raw > 0.0) & (s_raw < 1.0)
    return sig, s, e, u, uu, rel, interior


@primitive("actor_warp")
def _actor_warp(x, A0, B0, A1, B1, radius, amp):
    """Move points with the density-weighted motion of the nearest bones."""
    sig, s, e, u, uu, rel, interior = _bone_terms(x, A0, B0, radius, amp)
    tot = sig.sum(axis=1, keepdims=True)
    w = sig / np.maximum(tot, 1e-300)
    dA, dB = A1 - A0, B1 - B0
    v = dA[None] + s[..., None] * (dB - dA)[None]  # (P, Nb, 3)
    out = x + np.einsum("pb,pbk->pk", w, v)

    def vjp(g):
        r2 = radius[None] ** 2
        dot = np.einsum("pk,pbk->pb", g, v)
        gl = w * (dot - np.sum(w * dot, axis=1, keepdims=True))  # adjoint of log density
        gd2 = -gl / (2 * r2)  # adjoint of squared distance
        gs = w * np.einsum("pk,bk->pb", g, dB - dA) * interior
        # squared distance: d/dx = 2e, d/dA0 = -2e(1-s), d/dB0 = -2e s
        ex = 2 * gd2[..., None] * e
        gx = g + ex.sum(axis=1)
        gA0 = -(ex * (1 - s)[..., None]).sum(axis=0)
        gB0 = -(ex * s[..., None]).sum(axis=0)
        # segment parameter s = rel.u / uu
        n = np.einsum("pbk,bk->pb", rel, u)
        gx += np.einsum("pb,bk->pk", gs, u / uu[:, None])
        ds_dA0 = (-u[None] - rel) / uu[None, :, None] + 2 * n[..., None] * u[None] / (uu[None, :, None] ** 2)
        ds_dB0 = rel / uu[None, :, None] - 2 * n[..., None] * u[None] / (uu[None, :, None] ** 2)
        gA0 += np.einsum("pb,pbk->bk", gs, ds_dA0)
        gB0 += np.einsum("pb,pbk->bk", gs, ds_dB0)
        # v = dA (1 - s) + dB s
        gdA = np.einsum("pb,pk->bk", w * (1 - s), g)
        gdB = np.einsum("pb,pk->bk", w * s, g)
        return gx, gA0 - gdA, gB0 - gdB, gdA, gdB, None, None

    return out, vjp


def flow_tensor(cam0: CameraTensors, cam1: CameraTensors, packed0: Tensor, origins0: Tensor,
                dirs0: Tensor, scene: DynamicScene, resolution):
    """``(H*W, 2)`` flow from camera 0 pixels to camera 1, given camera 0's render."""
    H, W = resolution
    depth = packed0[:, 3:4]
    opacity = packed0.data[:, 4]
    X = origins0 + dirs0 * depth
    j0 = joints_3d(scene, cam0.time)
    j1 = joints_3d(scene, cam1.time)
    m0 = float(np.clip(cam0.time.data, 0, 1))
    kind, prm, amp, col, is_actor = scene.primitive_table(scene.actor.joints(m0))
    sig, _, act = K.field_eval(np.ascontiguousarray(X.data), kind, prm, amp, col, is_actor,
                               scene.background_color)
    gate = (act > ACTOR_GATE * sig) & (sig > 1e-12)
    a = scene.actor
    if np.any(gate):
        idx = np.flatnonzero(gate)
        bones = a.bones
        moved = dc.record("actor_warp", [
            dc.gather(X, idx),
            dc.gather(j0, bones[:, 0]), dc.gather(j0, bones[:, 1]),
            dc.gather(j1, bones[:, 0]), dc.gather(j1, bones[:, 1]),
            a.bone_radius, a.bone_amplitude])
        X = dc.index_update(X, idx, moved)
    uv, _ = project_tensor(X, cam1.R, cam1.t, cam1.focal, resolution)
    flow = uv - pixel_grid(resolution)
    diag = float(np.hypot(H, W))
    mag = np.sqrt(np.sum(flow.data ** 2, axis=1, keepdims=True))
    over = mag > diag
    if np.any(over):
        norm = dc.sqrt(dc.square(flow).sum(axis=1, keepdims=True))
        scale = dc.where(over, diag / dc.where(over, norm, 1.0), 1.0)
        flow = flow * scale
    valid = (opacity >= FLOW_OPACITY_GATE).astype(np.float64)[:, None]
    return flow * valid


def induced_flow(params_t: CinematicParams, params_t1: CinematicParams, scene: DynamicScene,
                 resolution=(64, 64), quadrature: Quadrature | None = None) -> FlowField:
    quad = quadrature or Quadrature()
    cam0 = CameraTensors.build(Tensor(params_t.vector()), params_t.pose)
    cam1 = CameraTensors.build(Tensor(params_t1.vector()), params_t1.pose)
    packed, o, d = render_tensor(cam0, scene, resolution, quad)
    flow = flow_tensor(cam0, cam1, packed, o, d, scene, resolution)
    H, W = resolution
    return FlowField(flow.data.reshape(H, W, 2))


# --- references --------------------------------------------------------------------------------


def make_reference(trajectory, scene: DynamicScene, resolution=(64, 64),
                   quadrature: Quadrature | None = None, sigma_px=None,
                   occlusion: bool = True) -> ReferenceClip:
    """Heatmaps, flows and colours along a ground-truth trajectory (all constants)."""
    params = trajectory.params if hasattr(trajectory, "params") else list(trajectory)
    if len(params) < 2:
        raise ValueError("a reference needs at least two keyframes")
    quad = quadrature or Quadrature()
    H, W = resolution
    heat, flows, colors = [], [], []
    cams = [CameraTensors.build(Tensor(p.vector()), p.pose) for p in params]
    for k, cam in enumerate(cams):
        packed, o, d = render_tensor(cam, scene, resolution, quad)
        colors.append(RenderedFrame.from_packed(packed.data, resolution).color)
        h = heatmap_tensor(cam, scene, resolution, sigma_px, occlusion)
        heat.append(HeatmapStack(h.data, default_sigma(resolution) if sigma_px is None else sigma_px,
                                 tuple(resolution)))
        if k + 1 < len(cams):
            f = flow_tensor(cam, cams[k + 1], packed, o, d, scene, resolution)
            flows.append(FlowField(f.data.reshape(H, W, 2)))
    return ReferenceClip(heat, flows, colors, {"source": "internal-render", "scene": scene.name})


def save_reference(clip: ReferenceClip, path) -> Path:
    """Write the little-endian CTRF tensor archive (see docs/ctrf_format.md)."""
    path = Path(path)
    H, W = clip.resolution
    J = clip.joint_count
    n = len(clip)
    buf = bytearray(MAGIC)
    buf += struct.pack("<5I", VERSION, H, W, J, n)
    for h in clip.heatmaps:
        buf += np.ascontiguousarray(np.moveaxis(h.data, 2, 0), dtype="<f4").tobytes()
    for f in clip.flows:
        buf += np.ascontiguousarray(np.moveaxis(f.data, 2, 0), dtype="<f4").tobytes()
    path.write_bytes(bytes(buf))
    return path


def load_reference(path, expected_joints: int | None = None,
                   expected_resolution=None, sigma_px=None) -> ReferenceClip:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:4] != MAGIC:
        raise ReferenceFormatError(f"{path}: missing CTRF header")
    version, H, W, J, n = struct.unpack("<5I", data[4:24])
    if version != VERSION:
        raise ReferenceFormatError(f"{path}: unsupported version {version}")
    if n < 2:
        raise ReferenceFormatError(f"{path}: need at least 2 frames, header says {n}")
    if expected_joints is not None and J != expected_joints:
        raise ReferenceFormatError(f"{path}: joint count {J} != expected {expected_joints}")
    if expected_resolution is not None and (H, W) != tuple(expected_resolution):
        raise ReferenceFormatError(f"{path}: resolution {(H, W)} != expected {tuple(expected_resolution)}")
    heat_bytes = n * J * H * W * 4
    flow_bytes = (n - 1) * 2 * H * W * 4
    body = data[24:]
    if len(body) < heat_bytes:
        raise ReferenceFormatError(f"{path}: truncated heatmap records")
    if len(body) < heat_bytes + flow_bytes:
        missing = (heat_bytes + flow_bytes - len(body) + 2 * H * W * 4 - 1) // (2 * H * W * 4)
        raise ReferenceFormatError(f"{path}: missing {missing} flow record(s)")
    if len(body) > heat_bytes + flow_bytes:
        raise ReferenceFormatError(f"{path}: trailing bytes after flow records")
    hm = np.frombuffer(body, dtype="<f4", count=n * J * H * W).reshape(n, J, H, W)
    fl = np.frombuffer(body, dtype="<f4", count=(n - 1) * 2 * H * W, offset=heat_bytes)
    fl = fl.reshape(n - 1, 2, H, W)
    sigma = default_sigma((H, W)) if sigma_px is None else sigma_px
    heat = [HeatmapStack(np.moveaxis(h, 0, 2).astype(np.float64), sigma, (H, W)) for h in hm]
    flows = [FlowField(np.moveaxis(f, 0, 2).astype(np.float64)) for f in fl]
    if any(not np.all(np.isfinite(h.data)) or np.any(h.data < 0) for h in heat):
        raise ReferenceFormatError(f"{path}: heatmaps must be finite and nonnegative")
    return ReferenceClip(heat, flows, None, {"source": "external-file", "path": str(path)})
