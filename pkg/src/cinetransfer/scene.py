"""Analytic dynamic scene: static density primitives plus an articulated actor.

The actor is a set of Gaussian capsules hung on a skeleton whose joints are
keyframed over normalized time ``m``; joints move piecewise-linearly between
key samples. Scenes are built from a JSON config (see ``docs/scene_config.md``)
and are immutable afterwards.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import _kernels as K
from .diffcore import Tensor, primitive, record

SCHEMA_VERSION = 1

JOINT_NAMES = (
    "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)

SCENE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "name", "bounds", "background_color", "blobs", "slabs", "actor"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "bounds": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                              "minItems": 3, "maxItems": 3},
                   "minItems": 2, "maxItems": 2},
        "background_color": {"$ref": "#/$defs/rgb"},
        "blobs": {"type": "array", "items": {
            "type": "object", "required": ["center", "scale", "amplitude", "color"],
            "properties": {"center": {"$ref": "#/$defs/vec3"},
                           "scale": {"$ref": "#/$defs/pos3"},
                           "amplitude": {"type": "number", "minimum": 0},
                           "color": {"$ref": "#/$defs/rgb"}}}},
        "slabs": {"type": "array", "items": {
            "type": "object", "required": ["lo", "hi", "edge", "amplitude", "color"],
            "properties": {"lo": {"$ref": "#/$defs/vec3"}, "hi": {"$ref": "#/$defs/vec3"},
                           "edge": {"type": "number", "exclusiveMinimum": 0},
                           "amplitude": {"type": "number", "minimum": 0},
                           "color": {"$ref": "#/$defs/rgb"}}}},
        "actor": {
            "type": "object",
            "required": ["key_times", "joints", "bones", "bone_amplitude", "bone_radius", "bone_color"],
            "properties": {
                "joint_names": {"type": "array", "items": {"type": "string"}},
                "key_times": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "joints": {"type": "array", "items": {"type": "array", "items": {"$ref": "#/$defs/vec3"},
                                                      "minItems": 1}},
                "bones": {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                                     "minItems": 2, "maxItems": 2}},
                "bone_amplitude": {"type": ["number", "array"]},
                "bone_radius": {"type": ["number", "array"]},
                "bone_color": {"type": "array"},
            },
        },
    },
    "$defs": {
        "vec3": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "pos3": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                 "minItems": 3, "maxItems": 3},
        "rgb": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                "minItems": 3, "maxItems": 3},
    },
}


class SceneConfigError(ValueError):
    """Scene config violates the schema; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True, eq=False)
class ArticulatedActor:
    key_times: np.ndarray  # (K,)
    joint_keyframes: np.ndarray  # (K, J, 3)
    bones: np.ndarray  # (B, 2) int
    bone_amplitude: np.ndarray  # (B,)
    bone_radius: np.ndarray  # (B,)
    bone_color: np.ndarray  # (B, 3)
    joint_names: tuple = JOINT_NAMES

    @property
    def joint_count(self) -> int:
        return self.joint_keyframes.shape[1]

    @property
    def bone_count(self) -> int:
        return self.bones.shape[0]

    def _segment(self, m: float):
        kt = self.key_times
        k = int(np.clip(np.searchsorted(kt, m, side="right") - 1, 0, len(kt) - 2))
        span = kt[k + 1] - kt[k]
        return k, (m - kt[k]) / span, span

    def joints(self, m: float) -> np.ndarray:
        k, s, _ = self._segment(float(m))
        if s == 0.0:
            return self.joint_keyframes[k].copy()
        if s == 1.0:
            return self.joint_keyframes[k + 1].copy()
        return (1 - s) * self.joint_keyframes[k] + s * self.joint_keyframes[k + 1]

    def joint_velocity(self, m: float) -> np.ndarray:
        k, _, span = self._segment(float(m))
        return (self.joint_keyframes[k + 1] - self.joint_keyframes[k]) / span


@dataclass(frozen=True, eq=False)
class DynamicScene:
    name: str
    bounds: np.ndarray  # (2, 3)
    background_color: np.ndarray
    blob_center: np.ndarray
    blob_scale: np.ndarray
    blob_amplitude: np.ndarray
    blob_color: np.ndarray
    slab_lo: np.ndarray
    slab_hi: np.ndarray
    slab_edge: np.ndarray
    slab_amplitude: np.ndarray
    slab_color: np.ndarray
    actor: ArticulatedActor
    config: dict

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    @property
    def background_count(self) -> int:
        return len(self.blob_amplitude) + len(self.slab_amplitude)

    @cached_property
    def background_table(self):
        nb, ns = len(self.blob_amplitude), len(self.slab_amplitude)
        kind = np.concatenate([np.full(nb, K.BLOB), np.full(ns, K.SLAB)]).astype(np.int64)
        prm = np.zeros((nb + ns, 7))
        if nb:
            prm[:nb, :3] = self.blob_center
            prm[:nb, 3:6] = self.blob_scale
        if ns:
            prm[nb:, :3] = self.slab_lo
            prm[nb:, 3:6] = self.slab_hi
            prm[nb:, 6] = self.slab_edge
        amp = np.concatenate([self.blob_amplitude, self.slab_amplitude])
        col = np.concatenate([self.blob_color.reshape(-1, 3), self.slab_color.reshape(-1, 3)])
        return kind, prm, amp, col

    def primitive_table(self, joints: np.ndarray):
        """Packed (kind, prm, amp, col, is_actor) with capsules placed at ``joints``."""
        kind, prm, amp, col = self.background_table
        a = self.actor
        cap = np.zeros((a.bone_count, 7))
        cap[:, :3] = joints[a.bones[:, 0]]
        cap[:, 3:6] = joints[a.bones[:, 1]]
        cap[:, 6] = a.bone_radius
        kind = np.concatenate([kind, np.full(a.bone_count, K.CAPSULE, dtype=np.int64)])
        is_actor = np.concatenate([np.zeros(len(amp), dtype=np.bool_), np.ones(a.bone_count, dtype=np.bool_)])
        return (kind, np.concatenate([prm, cap]), np.concatenate([amp, a.bone_amplitude]),
                np.concatenate([col, a.bone_color]), is_actor)

    def inside(self, x, margin: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.bounds[0] - margin) and np.all(x <= self.bounds[1] + margin))


def joints_3d(scene: DynamicScene, m) -> np.ndarray:
    """Joint positions ``(J, 3)`` at time ``m``; accepts a Tensor for ``m``."""
    if isinstance(m, Tensor):
        return record("joints_at", [m], actor=scene.actor)
    if not 0.0 <= float(m) <= 1.0:
        raise ValueError(f"time {m} outside [0, 1]")
    return scene.actor.joints(float(m))


@primitive("joints_at")
def _joints_at(m, actor):
    mm = float(np.clip(np.reshape(m, -1)[0], 0.0, 1.0))
    y = actor.joints(mm)
    vel = actor.joint_velocity(mm)
    return y, lambda g: (np.reshape(np.sum(g * vel), np.shape(m)),)


def _field(scene, x, m):
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    kind, prm, amp, col, is_actor = scene.primitive_table(scene.actor.joints(float(m)))
    return K.field_eval(pts, kind, prm, amp, col, is_actor, scene.background_color)


def sample_density(scene: DynamicScene, x, m: float):
    """Density at point(s) ``x`` (shape (3,) or (N, 3)) and time ``m``."""
    sig, _, _ = _field(scene, x, m)
    return float(sig[0]) if np.ndim(x) == 1 else sig


def sample_color(scene: DynamicScene, x, m: float):
    """Density-weighted primitive colour; background colour in empty space."""
    _, rgb, _ = _field(scene, x, m)
    return rgb[0] if np.ndim(x) == 1 else rgb


def actor_fraction(scene: DynamicScene, x, m: float) -> np.ndarray:
    sig, _, act = _field(scene, x, m)
    return np.where(sig > 1e-12, act / np.maximum(sig, 1e-300), 0.0)


def _vec(v, n, name, width=None):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or (width is not None and arr.ndim == 1 and arr.shape == (width,)):
        arr = np.broadcast_to(arr, (n,) if width is None else (n, width)).copy()
    expect = (n,) if width is None else (n, width)
    if arr.shape != expect:
        raise SceneConfigError(name, f"expected shape {expect}, got {arr.shape}")
    return arr


def _validate(config: dict):
    validator = jsonschema.Draft202012Validator(SCENE_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.path) or "<root>"
        raise SceneConfigError(path, e.message)


def build_scene(config) -> DynamicScene:
    """Build a scene from a config dict, a JSON path, or a preset name."""
    if isinstance(config, (str, Path)):
        config = load_scene_config(config)
    _validate(config)
    a = config["actor"]
    key_times = np.asarray(a["key_times"], dtype=np.float64)
    if np.any(np.diff(key_times) <= 0):
        raise SceneConfigError("actor.key_times", "must be strictly increasing")
    if key_times[0] != 0.0 or key_times[-1] != 1.0:
        raise SceneConfigError("actor.key_times", "must start at 0 and end at 1")
    joints = np.asarray(a["joints"], dtype=np.float64)
    if joints.ndim != 3 or joints.shape[0] != len(key_times) or joints.shape[2] != 3:
        raise SceneConfigError("actor.joints", "expected one (J, 3) joint list per key time")
    J = joints.shape[1]
    bones = np.asarray(a["bones"], dtype=np.int64).reshape(-1, 2)
    for i, (p, q) in enumerate(bones):
        if not (0 <= p < J and 0 <= q < J) or p == q:
            raise SceneConfigError(f"actor.bones.{i}", f"invalid joint pair ({p}, {q}) for J={J}")
    nb = len(bones)
    names = tuple(a.get("joint_names", JOINT_NAMES[:J] if J <= len(JOINT_NAMES) else
                        [f"j{i}" for i in range(J)]))
    if len(names) != J:
        raise SceneConfigError("actor.joint_names", f"expected {J} names")
    bone_color = _vec(a["bone_color"], nb, "actor.bone_color", width=3)
    if np.any(bone_color < 0) or np.any(bone_color > 1):
        raise SceneConfigError("actor.bone_color", "colours must lie in [0, 1]")
    actor = ArticulatedActor(
        key_times=key_times,
        joint_keyframes=joints,
        bones=bones,
        bone_amplitude=_vec(a["bone_amplitude"], nb, "actor.bone_amplitude"),
        bone_radius=_vec(a["bone_radius"], nb, "actor.bone_radius"),
        bone_color=bone_color,
        joint_names=names,
    )
    if np.any(actor.bone_radius <= 0) or np.any(actor.bone_amplitude < 0):
        raise SceneConfigError("actor.bone_radius", "radii must be positive, amplitudes nonnegative")
    bounds = np.asarray(config["bounds"], dtype=np.float64)
    if np.any(bounds[1] <= bounds[0]):
        raise SceneConfigError("bounds", "upper corner must exceed lower corner")
    blobs, slabs = config["blobs"], config["slabs"]

    def field(items, key, shape):
        return np.array([it[key] for it in items], dtype=np.float64).reshape(shape)

    scene = DynamicScene(
        name=config["name"],
        bounds=bounds,
        background_color=np.asarray(config["background_color"], dtype=np.float64),
        blob_center=field(blobs, "center", (-1, 3)),
        blob_scale=field(blobs, "scale", (-1, 3)),
        blob_amplitude=field(blobs, "amplitude", (-1,)),
        blob_color=field(blobs, "color", (-1, 3)),
        slab_lo=field(slabs, "lo", (-1, 3)),
        slab_hi=field(slabs, "hi", (-1, 3)),
        slab_edge=field(slabs, "edge", (-1,)),
        slab_amplitude=field(slabs, "amplitude", (-1,)),
        slab_color=field(slabs, "color", (-1, 3)),
        actor=actor,
        config=config,
    )
    for i, c in enumerate(scene.blob_center):
        if not scene.inside(c):
            raise SceneConfigError(f"blobs.{i}.center", "outside scene bounds")
    for i, (lo, hi) in enumerate(zip(scene.slab_lo, scene.slab_hi)):
        if np.any(hi <= lo) or not (scene.inside(lo) and scene.inside(hi)):
            raise SceneConfigError(f"slabs.{i}", "slab must be non-empty and inside bounds")
    if not all(scene.inside(p) for p in joints.reshape(-1, 3)):
        raise SceneConfigError("actor.joints", "joint outside scene bounds")
    return scene


PRESETS = ("scene_a", "scene_b", "scene_a_static", "empty", "blob", "slab")


def load_scene_config(name_or_path) -> dict:
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text())
    name = str(name_or_path)
    if name not in PRESETS:
        raise SceneConfigError("scene", f"unknown preset {name!r}; known: {PRESETS}")
    text = resources.files("cinetransfer.data.scenes").joinpath(f"{name}.json").read_text()
    return json.loads(text)
