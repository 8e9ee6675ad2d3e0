"""Scenario files: which scenes, which ground-truth motion, which init and loss arm."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .. import losses as L
from ..geometry import CinematicParams, SE3Pose, Trajectory, apply_increment, look_at
from ..optimizer import ARMS, OptimConfig
from ..renderer import Quadrature
from ..scene import DynamicScene, build_scene

SCHEMA_VERSION = 1
MOTIONS = ("push-in", "arc", "dolly-zoom", "handheld-jitter", "time-only", "focal-only", "static")
INIT_KINDS = ("same", "perturbed", "random-in-bounds")

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "name", "reference_scene", "target_scene", "motion"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "reference_scene": {"type": "string"},
        "target_scene": {"type": "string"},
        "motion": {
            "type": "object",
            "required": ["kind", "frames"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(MOTIONS)},
                "frames": {"type": "integer", "minimum": 2},
                "distance": {"type": "number", "exclusiveMinimum": 0},
                "focal": {"type": "number", "exclusiveMinimum": 0},
                "azimuth_deg": {"type": "number"},
                "height": {"type": "number"},
                "time_range": {"type": "array", "items": {"type": "number", "minimum": 0,
                                                          "maximum": 1},
                               "minItems": 2, "maxItems": 2},
                "amount": {"type": "number"},
                "focal_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                "minItems": 2, "maxItems": 2},
            },
        },
        "init": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(INIT_KINDS)},
                "translation": {"type": "number", "minimum": 0},
                "rotation_deg": {"type": "number", "minimum": 0},
                "margin": {"type": "number", "minimum": 0},
            },
        },
        "arm": {"enum": list(ARMS)},
        "optim": {"type": "object"},
        "seed": {"type": "integer", "minimum": 0},
        "resolution": {"type": "array", "items": {"type": "integer", "minimum": 4},
                       "minItems": 2, "maxItems": 2},
    },
}

SUBJECT = np.array([0.0, -1.0, 0.0])


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    reference_scene: str
    target_scene: str
    motion: dict
    init: dict = field(default_factory=lambda: {"kind": "same"})
    arm: str = "flow+pose"
    optim: dict = field(default_factory=dict)
    seed: int = 0
    resolution: tuple = (64, 64)

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        try:
            jsonschema.validate(d, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ScenarioError(f"scenario field {where}: {exc.message}") from None
        d = copy.deepcopy(d)
        d.pop("schema_version")
        if "resolution" in d:
            d["resolution"] = tuple(d["resolution"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "name": self.name,
                "reference_scene": self.reference_scene, "target_scene": self.target_scene,
                "motion": copy.deepcopy(self.motion), "init": copy.deepcopy(self.init),
                "arm": self.arm, "optim": copy.deepcopy(self.optim), "seed": self.seed,
                "resolution": list(self.resolution)}

    def with_overrides(self, **kw) -> Scenario:
        d = self.to_dict()
        for k, v in kw.items():
            if v is None:
                continue
            if k == "resolution":
                v = list(v)
            d[k] = v
        return Scenario.from_dict(d)

    @property
    def same_scene(self) -> bool:
        return self.reference_scene == self.target_scene

    def scenes(self) -> tuple[DynamicScene, DynamicScene]:
        ref = build_scene(self.reference_scene)
        tgt = ref if self.same_scene else build_scene(self.target_scene)
        return ref, tgt

    def optim_config(self) -> OptimConfig:
        return build_optim_config(self.optim, arm=self.arm, seed=self.seed,
                                  resolution=self.resolution)


def build_optim_config(overrides: dict, **fixed) -> OptimConfig:
    o = dict(overrides)
    if "ot" in o:
        o["ot"] = L.OTConfig(**o["ot"])
    if "weights_init" in o:
        o["weights_init"] = L.LossWeights(**o["weights_init"])
    if "quadrature" in o:
        o["quadrature"] = Quadrature(**o["quadrature"])
    if "focal_bounds" in o:
        o["focal_bounds"] = tuple(o["focal_bounds"])
    o.update(fixed)
    if "resolution" in o:
        o["resolution"] = tuple(o["resolution"])
    try:
        return OptimConfig(**o)
    except TypeError as exc:
        raise ScenarioError(f"optim: {exc}") from None


def load_scenario(name_or_path) -> Scenario:
    """Load a scenario file, or a shipped scenario by name."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        res = resources.files("cinetransfer.data.scenarios").joinpath(f"{name_or_path}.json")
        if not res.is_file():
            raise ScenarioError(f"no scenario file or shipped scenario named {name_or_path!r}")
        text = res.read_text()
    return Scenario.from_dict(json.loads(text))


def shipped_scenarios() -> list[str]:
    root = resources.files("cinetransfer.data.scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


# --- ground-truth motions ---------------------------------------------------------------------


def _orbit_eye(distance, azimuth, height):
    a = np.radians(azimuth)
    return SUBJECT + np.array([distance * np.sin(a), height, -distance * np.cos(a)])


def gt_trajectory(motion: dict, seed: int = 0) -> Trajectory:
    """Keyframed ground truth for a named motion around the actor."""
    kind = motion["kind"]
    n = int(motion["frames"])
    dist = float(motion.get("distance", 3.0))
    f0 = float(motion.get("focal", 70.0))
    az = float(motion.get("azimuth_deg", 6.0))
    h = float(motion.get("height", -0.1))
    t0, t1 = motion.get("time_range", [0.2, 0.6])
    s = np.linspace(0.0, 1.0, n)
    times = t0 + (t1 - t0) * s
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        focal, m = f0, float(times[k])
        if kind == "push-in":
            d = dist - float(motion.get("amount", 0.8)) * s[k]
            pose = look_at(_orbit_eye(d, az, h), SUBJECT)
        elif kind == "arc":
            pose = look_at(_orbit_eye(dist, az + float(motion.get("amount", 30.0)) * s[k], h),
                           SUBJECT)
        elif kind == "dolly-zoom":
            # forward dolly, zoom out so the subject keeps its size
            d = dist - float(motion.get("amount", 1.0)) * s[k]
            pose = look_at(_orbit_eye(d, az, h), SUBJECT)
            focal = f0 * d / dist
        elif kind == "handheld-jitter":
            amt = float(motion.get("amount", 0.03))
            base = look_at(_orbit_eye(dist, az, h), SUBJECT)
            xi = np.concatenate([rng.normal(0, np.radians(0.5), 3), rng.normal(0, amt, 3)])
            pose = apply_increment(base, xi)
        elif kind == "time-only":
            pose = look_at(_orbit_eye(dist, az, h), SUBJECT)
        elif kind == "focal-only":
            pose = look_at(_orbit_eye(dist, az, h), SUBJECT)
            fa, fb = motion.get("focal_range", [0.85 * f0, 1.15 * f0])
            focal = fa + (fb - fa) * s[k]
            m = float(t0)
        elif kind == "static":
            pose = look_at(_orbit_eye(dist, az, h), SUBJECT)
            m = float(t0)
        else:
            raise ScenarioError(f"unknown motion {kind!r}")
        out.append(CinematicParams(pose, float(focal), float(np.clip(m, 0, 1))))
    return Trajectory.from_params(out)


def _random_rotation_axis(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def initial_params(init: dict, gt0: CinematicParams, scene: DynamicScene, seed: int) -> CinematicParams:
    """First-camera initialisation: the truth, a fixed-size perturbation, or a random pose."""
    kind = init.get("kind", "same")
    rng = np.random.default_rng([seed, 7])
    if kind == "same":
        return gt0
    if kind == "perturbed":
        dt = float(init.get("translation", 0.05)) * scene.diameter
        dr = np.radians(float(init.get("rotation_deg", 5.0)))
        xi = np.concatenate([_random_rotation_axis(rng) * dr, np.zeros(3)])
        rotated = apply_increment(gt0.world_pose(), xi)
        t = rotated.translation + _random_rotation_axis(rng) * dt
        return CinematicParams(SE3Pose(rotated.rotation, t), gt0.focal, gt0.time)
    if kind == "random-in-bounds":
        margin = float(init.get("margin", 0.5))
        lo, hi = scene.bounds[0] + margin, scene.bounds[1] - margin
        for _ in range(1000):
            eye = rng.uniform(lo, hi)
            # keep the subject in front of the camera and outside the actor
            if eye[2] < -1.5 and np.linalg.norm(eye - SUBJECT) > 2.0:
                break
        return CinematicParams(look_at(eye, SUBJECT + rng.normal(0, 0.1, 3)), gt0.focal, gt0.time)
    raise ScenarioError(f"unknown init kind {kind!r}")


def scenario_with_seed(sc: Scenario, seed: int) -> Scenario:
    return replace(sc, seed=int(seed))
