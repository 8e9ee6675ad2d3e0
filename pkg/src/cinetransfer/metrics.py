"""Trajectory, pixel and joint errors, plus the loss-landscape probe."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .geometry import BehindCameraError, CinematicParams, SE3Pose, Trajectory, project
from .proxies import render_heatmaps
from .renderer import Quadrature, RenderError, render
from .scene import DynamicScene


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    rmse_ate: float | None = None
    pe: float | None = None
    je: float | None = None
    ate_per_frame: list = field(default_factory=list)
    pe_per_frame: list = field(default_factory=list)
    je_per_frame: list = field(default_factory=list)
    joints_excluded: int = 0
    success: bool = True
    failure_stage: str | None = None
    failure_message: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def failed(cls, stage: str, message: str) -> EvalReport:
        return cls(success=False, failure_stage=stage, failure_message=message)


def _positions(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.positions()
    return np.array([p.position for p in traj])


def ate_per_frame(est, gt) -> np.ndarray:
    a, b = _positions(est), _positions(gt)
    if a.shape != b.shape:
        raise MetricError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    return np.linalg.norm(a - b, axis=1)


def rmse_ate(est, gt) -> float:
    """Root mean square camera-position error; no alignment is applied."""
    e = ate_per_frame(est, gt)
    return float(np.sqrt(np.mean(e ** 2)))


def pixel_error(est_frames, ref_frames, per_frame: bool = False):
    """Mean absolute colour difference over pixels, channels and frames."""
    est = [np.asarray(getattr(f, "color", f), dtype=np.float64) for f in est_frames]
    ref = [np.asarray(getattr(f, "color", f), dtype=np.float64) for f in ref_frames]
    if len(est) != len(ref):
        raise MetricError(f"clip lengths differ: {len(est)} vs {len(ref)}")
    errs = []
    for a, b in zip(est, ref):
        if a.shape != b.shape:
            raise MetricError(f"frame resolution mismatch: {a.shape} vs {b.shape}")
        errs.append(float(np.abs(a - b).mean()))
    total = float(np.mean(errs))
    return (total, errs) if per_frame else total


def _project_joints(params: CinematicParams, scene: DynamicScene, resolution):
    pose = params.world_pose()
    pts, ok = [], []
    for j in scene.actor.joints(params.time):
        try:
            pts.append(project(j, pose, params.focal, resolution))
            ok.append(True)
        except BehindCameraError:
            pts.append(np.zeros(2))
            ok.append(False)
    return np.array(pts), np.array(ok)


def joint_error(est, ref, scene: DynamicScene, resolution=(64, 64), details: bool = False):
    """Mean pixel distance between ground-truth joints projected by both cameras.

    Joints behind either camera are excluded and counted. A frame with every
    joint excluded raises :class:`MetricError`.
    """
    est_p = est.params if isinstance(est, Trajectory) else list(est)
    ref_p = ref.params if isinstance(ref, Trajectory) else list(ref)
    if len(est_p) != len(ref_p):
        raise MetricError(f"trajectory lengths differ: {len(est_p)} vs {len(ref_p)}")
    per_frame, excluded, all_d = [], 0, []
    for k, (a, b) in enumerate(zip(est_p, ref_p)):
        ua, oka = _project_joints(a, scene, resolution)
        ub, okb = _project_joints(b, scene, resolution)
        ok = oka & okb
        excluded += int((~ok).sum())
        if not ok.any():
            raise MetricError(f"frame {k}: every joint is behind a camera")
        d = np.linalg.norm(ua[ok] - ub[ok], axis=1)
        per_frame.append(float(d.mean()))
        all_d.append(d)
    je = float(np.concatenate(all_d).mean())
    if details:
        return je, per_frame, excluded
    return je


def evaluate(est: Trajectory, gt: Trajectory, scene: DynamicScene, resolution=(64, 64),
             ref_colors=None, quadrature: Quadrature | None = None) -> EvalReport:
    """All applicable metrics. PE is computed only when ``ref_colors`` is given."""
    rep = EvalReport()
    e = ate_per_frame(est, gt)
    rep.rmse_ate = float(np.sqrt(np.mean(e ** 2)))
    rep.ate_per_frame = e.tolist()
    rep.je, rep.je_per_frame, rep.joints_excluded = joint_error(est, gt, scene, resolution,
                                                                details=True)
    if ref_colors is not None:
        frames = [render(p, scene, resolution, quadrature).color for p in est.params]
        rep.pe, rep.pe_per_frame = pixel_error(frames, ref_colors, per_frame=True)
    return rep


def translate_camera(params: CinematicParams, dx: float, dy: float) -> CinematicParams:
    """Shift the camera by (dx, dy) along its own right and down axes."""
    pose = params.world_pose()
    t = pose.translation + pose.rotation @ np.array([dx, dy, 0.0])
    return CinematicParams(SE3Pose(pose.rotation, t), params.focal, params.time)


LANDSCAPE_KINDS = ("pose", "photometric")


def landscape_probe(kind: str, scene: DynamicScene, ref_frame: dict, gt_params: CinematicParams,
                    deltas, resolution=(64, 64), ot: L.OTConfig | None = None,
                    quadrature: Quadrature | None = None) -> np.ndarray:
    """Loss at ``gt_params`` shifted by each (dx, dy) of a grid, min-max normalized.

    ``deltas`` is a pair of 1-D offset arrays (rows follow dy, columns dx).
    ``ref_frame`` holds ``heat`` (H, W, J) for the pose loss or ``color``
    (H, W, 3) for the photometric loss. Grid points where rendering fails are NaN.
    """
    if kind not in LANDSCAPE_KINDS:
        raise ValueError(f"unknown landscape loss {kind!r}; expected one of {LANDSCAPE_KINDS}")
    dxs, dys = (np.asarray(d, dtype=np.float64) for d in deltas)
    if not (np.all(np.isfinite(dxs)) and np.all(np.isfinite(dys))):
        raise ValueError("landscape offsets must be finite")
    ot = ot or L.OTConfig(grid=16)
    target = L.PoseTarget.build(ref_frame["heat"], ot) if kind == "pose" else None
    out = np.full((len(dys), len(dxs)), np.nan)
    for i, dy in enumerate(dys):
        for j, dx in enumerate(dxs):
            p = translate_camera(gt_params, dx, dy)
            try:
                if kind == "pose":
                    h = render_heatmaps(p, scene, resolution)
                    out[i, j] = L.pose_loss_batch([target], [h.data], ot)[0].item()
                else:
                    if not scene.inside(p.position):
                        raise RenderError("camera outside the scene")
                    img = render(p, scene, resolution, quadrature).color
                    out[i, j] = L.photometric_loss(ref_frame["color"], img)
            except (RenderError, ArithmeticError):
                continue
    finite = np.isfinite(out)
    if finite.any():
        lo, hi = out[finite].min(), out[finite].max()
        out[finite] = (out[finite] - lo) / (hi - lo + 1e-12)
    return out


def argmin_cell(grid: np.ndarray) -> tuple:
    g = np.where(np.isfinite(grid), grid, np.inf)
    return tuple(int(i) for i in np.unravel_index(np.argmin(g), g.shape))


def near_minima(grid: np.ndarray, rel: float = 0.05, exclude_radius: int = 1) -> int:
    """Number of cells farther than ``exclude_radius`` from the argmin that lie within
    ``rel`` of the minimum (after normalization, ``rel`` is a fraction of the range)."""
    i0, j0 = argmin_cell(grid)
    g = np.where(np.isfinite(grid), grid, np.inf)
    lo = g[i0, j0]
    ii, jj = np.indices(g.shape)
    far = np.maximum(np.abs(ii - i0), np.abs(jj - j0)) > exclude_radius
    return int(np.sum(far & (g <= lo + rel)))
