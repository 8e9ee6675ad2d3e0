"""Camera model, SE(3) calculus and cinematic parameters.

Conventions: poses map camera coordinates to world coordinates
(``X_world = R @ X_cam + t``). The camera looks along its +z axis with +x to
the right and +y down the image. Pixel ``(u, v)`` has integer coordinates at
pixel centres, so the principal point ``(W/2, H/2)`` is itself a pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, primitive

Z_MIN = 1e-4
_SMALL = 1e-3


class BehindCameraError(ValueError):
    """Point has camera-frame depth below ``Z_MIN``."""


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _coeffs(theta: float):
    """Rodrigues coefficients and their derivatives divided by theta."""
    t2 = theta * theta
    if theta < _SMALL:
        a = 1 - t2 / 6 + t2 * t2 / 120
        b = 0.5 - t2 / 24 + t2 * t2 / 720
        c = 1 / 6 - t2 / 120 + t2 * t2 / 5040
        da = -1 / 3 + t2 / 30
        db = -1 / 12 + t2 / 180
        dc_ = -1 / 60 + t2 / 1260
    else:
        s, co = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1 - co) / t2
        c = (theta - s) / (t2 * theta)
        da = (theta * co - s) / (t2 * theta)
        db = (theta * s - 2 * (1 - co)) / (t2 * t2)
        dc_ = ((1 - co) * theta - 3 * (theta - s)) / (t2 * t2 * theta)
    return a, b, c, da, db, dc_


_E = [hat(e) for e in np.eye(3)]


def _se3_exp_arrays(xi):
    w, rho = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    a, b, c, *_ = _coeffs(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return R, V @ rho


@primitive("se3_exp")
def _se3_exp_prim(xi):
    """xi (6,) -> (3, 4) matrix [R | t]."""
    if xi.shape != (6,):
        raise dc.ShapeError("se3_exp", [xi.shape])
    w, rho = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    a, b, c, da, db, dcc = _coeffs(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    out = np.concatenate([R, (V @ rho)[:, None]], axis=1)

    def vjp(g):
        gR, gt = g[:, :3], g[:, 3]
        gw = np.zeros(3)
        for k in range(3):
            dW = _E[k]
            dW2 = dW @ W + W @ dW
            dR = da * w[k] * W + a * dW + db * w[k] * W2 + b * dW2
            dV = db * w[k] * W + b * dW + dcc * w[k] * W2 + c * dW2
            gw[k] = np.sum(gR * dR) + gt @ (dV @ rho)
        return (np.concatenate([gw, V.T @ gt]),)

    return out, vjp


@dataclass(frozen=True)
class SE3Pose:
    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> SE3Pose:
        return SE3Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: SE3Pose) -> SE3Pose:
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> SE3Pose:
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1) < tol)


def se3_exp(xi) -> SE3Pose:
    """Closed-form exponential map of a twist ``(omega, rho)``."""
    xi = np.asarray(xi, dtype=np.float64)
    R, t = _se3_exp_arrays(xi)
    return SE3Pose(R, t)


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_t = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos_t)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return v / 2
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return axis * theta
    return v * theta / (2 * np.sin(theta))


def apply_increment(base: SE3Pose, xi) -> SE3Pose:
    """``base`` composed with the local increment ``exp(xi)``."""
    xi = np.asarray(xi, dtype=np.float64)
    if not np.any(xi):
        return base
    return base.compose(se3_exp(xi))


def pose_tensors(base: SE3Pose, xi: Tensor):
    """Differentiable (R, t) of ``base * exp(xi)``."""
    Rt = dc.record("se3_exp", [xi])
    R0 = base.rotation
    R = R0 @ Rt[:, :3]
    t = R0 @ Rt[:, 3] + base.translation
    return R, t


@dataclass(frozen=True)
class CinematicParams:
    """Pose (base pose plus local twist), focal length in pixels, normalized time."""

    pose: SE3Pose = field(default_factory=SE3Pose.identity)
    focal: float = 90.0
    time: float = 0.0
    xi: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {self.time}")
        if not np.all(np.isfinite(self.xi)):
            raise ValueError("xi must be finite")

    def world_pose(self) -> SE3Pose:
        return apply_increment(self.pose, self.xi)

    def anchored(self) -> CinematicParams:
        """Fold ``xi`` into the base pose."""
        return replace(self, pose=self.world_pose(), xi=np.zeros(6))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.xi, [self.focal, self.time]])

    def with_vector(self, v) -> CinematicParams:
        v = np.asarray(v, dtype=np.float64)
        return replace(self, xi=v[:6].copy(), focal=float(v[6]), time=float(v[7]))

    @property
    def position(self) -> np.ndarray:
        return self.world_pose().translation


@dataclass
class Trajectory:
    keyframes: list  # [(frame_index, CinematicParams)]

    def __post_init__(self):
        idx = [k for k, _ in self.keyframes]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("keyframe indices must be strictly increasing")

    def __len__(self):
        return len(self.keyframes)

    def __getitem__(self, i) -> CinematicParams:
        return self.keyframes[i][1]

    @property
    def params(self) -> list:
        return [p for _, p in self.keyframes]

    @property
    def indices(self) -> list:
        return [k for k, _ in self.keyframes]

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.params])

    @classmethod
    def from_params(cls, params) -> Trajectory:
        return cls([(i, p) for i, p in enumerate(params)])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def camera_frame_point(point, pose: SE3Pose) -> np.ndarray:
    return pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.translation)


def project(point, pose: SE3Pose, focal: float, resolution) -> np.ndarray:
    """Pinhole projection of a world point to pixel coordinates ``(u, v)``."""
    H, W = resolution
    x, y, z = camera_frame_point(point, pose)
    if z <= Z_MIN:
        raise BehindCameraError(f"camera-frame depth {z:.3g} <= {Z_MIN}")
    return np.array([focal * x / z + W / 2, focal * y / z + H / 2])


def project_tensor(points, R, t, focal, resolution):
    """Differentiable projection of ``(N, 3)`` world points.

    Returns ``(uv, z)``; ``z`` is the raw camera depth, ``uv`` uses ``max(z, Z_MIN)``.
    """
    H, W = resolution
    cam = (points - t) @ R
    z = cam[:, 2]
    zs = dc.clip(z, Z_MIN, None)
    u = focal * cam[:, 0] / zs + W / 2
    v = focal * cam[:, 1] / zs + H / 2
    return dc.stack([u, v], axis=1), z


def pixel_grid(resolution) -> np.ndarray:
    """(H*W, 2) array of ``(u, v)`` pixel coordinates, row-major."""
    H, W = resolution
    vv, uu = np.mgrid[0:H, 0:W]
    return np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)


def generate_ray(pixel, pose: SE3Pose, focal: float, resolution) -> Ray:
    H, W = resolution
    u, v = pixel
    if not (0 <= u <= W - 1 and 0 <= v <= H - 1):
        raise ValueError(f"pixel {pixel} outside a {H}x{W} image")
    d = np.array([(u - W / 2) / focal, (v - H / 2) / focal, 1.0])
    d = pose.rotation @ (d / np.linalg.norm(d))
    return Ray(pose.translation.copy(), d / np.linalg.norm(d))


def ray_tensors(R, t, focal, resolution):
    """Differentiable origins and unit directions for every pixel, row-major."""
    H, W = resolution
    pix = pixel_grid(resolution)
    cx = (pix[:, 0] - W / 2)[:, None]
    cy = (pix[:, 1] - H / 2)[:, None]
    inv_f = 1.0 / focal
    ones = np.ones((pix.shape[0], 1))
    d_cam = dc.concat([cx * inv_f, cy * inv_f, Tensor(ones)], axis=1)
    norm = dc.sqrt((d_cam * d_cam).sum(axis=1, keepdims=True))
    dirs = (d_cam / norm) @ R.T if isinstance(R, Tensor) else (d_cam / norm) @ dc.as_tensor(R.T)
    origins = dc.as_tensor(t).reshape(1, 3) * ones
    return origins, dirs


def _slerp_rot(R0: np.ndarray, R1: np.ndarray, s: float) -> np.ndarray:
    w = so3_log(R0.T @ R1)
    return R0 @ se3_exp(np.concatenate([w * s, np.zeros(3)])).rotation


def interpolate_trajectory(traj: Trajectory, t: float) -> CinematicParams:
    """Slerp rotation, lerp translation/focal/time between bracketing keyframes."""
    idx = traj.indices
    if not idx or t < idx[0] or t > idx[-1]:
        raise ValueError(f"t={t} outside keyframe range [{idx[0]}, {idx[-1]}]")
    k = int(np.searchsorted(idx, t, side="right")) - 1
    k = min(k, len(idx) - 1)
    if idx[k] == t:
        return traj[k].anchored()
    a, b = traj[k].anchored(), traj[k + 1].anchored()
    s = (t - idx[k]) / (idx[k + 1] - idx[k])
    R = _slerp_rot(a.pose.rotation, b.pose.rotation, s)
    tr = (1 - s) * a.pose.translation + s * b.pose.translation
    return CinematicParams(SE3Pose(R, tr), (1 - s) * a.focal + s * b.focal,
                           float(np.clip((1 - s) * a.time + s * b.time, 0, 1)))


EXPORT_HEADER = ("frame_index r00 r01 r02 r10 r11 r12 r20 r21 r22 "
                 "tx ty tz focal_px time_m")


def export_trajectory(traj: Trajectory, path) -> Path:
    """Write one row per keyframe in the plain-text trajectory exchange format."""
    path = Path(path)
    rows = []
    for k, p in traj.keyframes:
        pose = p.world_pose()
        vals = [*pose.rotation.ravel(), *pose.translation, p.focal, p.time]
        rows.append(f"{k:d} " + " ".join(repr(float(x)) for x in vals))
    path.write_text("# " + EXPORT_HEADER + "\n" + "\n".join(rows) + "\n")
    return path


def load_trajectory(path) -> Trajectory:
    keyframes = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 15:
            raise ValueError(f"{path}:{ln}: expected 15 columns, got {len(parts)}")
        vals = np.array([float(x) for x in parts[1:]])
        pose = SE3Pose(vals[:9].reshape(3, 3), vals[9:12])
        keyframes.append((int(parts[0]), CinematicParams(pose, float(vals[12]), float(vals[13]))))
    if not keyframes:
        raise ValueError(f"{path}: no trajectory rows")
    return Trajectory(keyframes)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> SE3Pose:
    """Pose at ``eye`` whose +z axis points at ``target``; ``up`` is world up (y is down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return SE3Pose(np.stack([x, y, z], axis=1), eye)
