"""Golden cases: build them from the oracles, write them, or check them.

Each case carries a provenance tag ([TRIVIAL] or [DERIVED: ...]), the inputs
needed to recompute it, the expected values and two tolerances: ``tol`` for
checking the library against the golden and ``regen_tol`` for checking a
regenerated golden against the committed one.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

GOLDEN_FILE = "goldens.json"


class GoldenMismatch(AssertionError):
    pass


def _trivial_identity():
    return {"id": "se3_exp_zero", "provenance": "[TRIVIAL]", "inputs": {"xi": [0.0] * 6},
            "expected": np.eye(4).tolist(), "tol": 1e-15, "regen_tol": 0.0}


def _rodrigues_z90():
    # closed form: R = I + sin(th) K + (1 - cos(th)) K^2 with th = pi/2 about z
    K = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    R = np.eye(3) + K + K @ K
    return {"id": "rodrigues_z90", "provenance": "[DERIVED: Rodrigues closed form]",
            "inputs": {"xi": [0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0]},
            "expected": R.tolist(), "tol": 1e-12, "regen_tol": 0.0}


def _pinhole():
    f, x, y, z, W, H = 100.0, 1.0, 0.0, 2.0, 64, 64
    return {"id": "pinhole_point", "provenance": "[DERIVED: pinhole algebra]",
            "inputs": {"point": [x, y, z], "focal": f, "resolution": [H, W]},
            "expected": [f * x / z + W / 2, f * y / z + H / 2], "tol": 1e-12, "regen_tol": 0.0}


def _exact_ot(n_cases=20, side=6, seed=0):
    from ..losses import grid_cost
    from .exact_ot import exact_ot
    rng = np.random.default_rng(seed)
    C = grid_cost(side, side)
    cases = []
    for _ in range(n_cases):
        ab = []
        for _ in range(2):
            m = rng.random(side * side) * (rng.random(side * side) < 0.3)
            m[rng.integers(side * side)] += 0.5
            ab.append(m / m.sum())
        cases.append({"a": ab[0].tolist(), "b": ab[1].tolist(),
                      "cost": exact_ot(ab[0], ab[1], C)})
    return {"id": "exact_ot_6x6", "provenance": "[DERIVED: LP oracle]",
            "inputs": {"side": side, "seed": seed, "epsilon": 1e-3, "iters": 2000},
            "expected": cases, "tol": 0.02, "regen_tol": 1e-9}


def _point_masses(side=16):
    diag = float(np.hypot(side - 1, side - 1))
    return {"id": "point_mass_shift", "provenance": "[DERIVED: exact OT is the point distance]",
            "inputs": {"side": side, "shifts": list(range(1, 9)), "epsilon": 2e-3, "iters": 300},
            "expected": [k / diag for k in range(1, 9)], "tol": 0.05, "regen_tol": 0.0}


def _dense_render():
    from ..harness.scenarios import gt_trajectory
    from ..scene import build_scene
    from .dense_render import render_pixels
    res = (32, 32)
    pix = [(16, 16), (10, 5), (20, 28), (3, 30), (16, 10), (25, 20)]
    p = gt_trajectory({"kind": "static", "frames": 2})[0]
    vals = render_pixels(p, build_scene("scene_a"), pix, res, n=8000)
    return {"id": "dense_render_scene_a", "provenance": "[DERIVED: dense-quadrature oracle]",
            "inputs": {"scene": "scene_a", "motion": {"kind": "static", "frames": 2},
                       "resolution": list(res), "pixels": [list(q) for q in pix],
                       "n_samples": 1024},
            "expected": vals.tolist(), "tol": 5e-3, "regen_tol": 1e-9}


def _fd_window_gradient():
    from ..harness.scenarios import gt_trajectory, initial_params, load_scenario
    from ..geometry import Trajectory
    from ..optimizer import WindowRef, window_objective
    from ..proxies import make_reference
    from .finite_diff import central_gradient
    sc = load_scenario("copy_same")
    cfg = sc.optim_config()
    ref_scene, tgt = sc.scenes()
    gt = gt_trajectory(sc.motion, sc.seed)
    clip = make_reference(Trajectory.from_params(gt.params[:2]), ref_scene, cfg.resolution,
                          cfg.quadrature)
    init = initial_params(sc.init, gt[0], tgt, sc.seed)
    params = (init, init)
    ref = WindowRef.from_clip(clip, 0, cfg.ot)
    x0 = np.concatenate([q.vector() for q in params])
    fd = central_gradient(
        lambda x: window_objective(ref, params, tgt, cfg, x=x, with_grad=False)[0], x0, 1e-4)
    return {"id": "fd_window_gradient", "provenance": "[DERIVED: central finite differences, h=1e-4]",
            "inputs": {"scenario": "copy_same", "window": 0, "h": 1e-4},
            "expected": fd.tolist(), "tol": 1e-3, "regen_tol": 1e-6}


BUILDERS = {
    "se3_exp_zero": _trivial_identity,
    "rodrigues_z90": _rodrigues_z90,
    "pinhole_point": _pinhole,
    "exact_ot_6x6": _exact_ot,
    "point_mass_shift": _point_masses,
    "dense_render_scene_a": _dense_render,
    "fd_window_gradient": _fd_window_gradient,
}


def build_goldens(ids=None) -> list[dict]:
    return [BUILDERS[i]() for i in (ids or BUILDERS)]


def load_goldens(path=None) -> dict:
    if path is None:
        text = resources.files("cinetransfer.data.goldens").joinpath(GOLDEN_FILE).read_text()
    else:
        text = Path(path).read_text()
    cases = json.loads(text)["cases"]
    return {c["id"]: c for c in cases}


def _flat(v):
    if isinstance(v, dict):
        return np.array([v["cost"]])
    if isinstance(v, list) and v and isinstance(v[0], dict):
        return np.array([c["cost"] for c in v])
    return np.asarray(v, dtype=np.float64).ravel()


def compare(new: dict, old: dict) -> float:
    """Largest absolute difference between two versions of one case."""
    a, b = _flat(new["expected"]), _flat(old["expected"])
    if a.shape != b.shape:
        return float("inf")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def regenerate_goldens(path=None, check: bool = False, ids=None) -> list[dict]:
    """Rebuild the goldens from the oracles.

    With ``check`` the committed file is left alone and any case that moved
    by more than its ``regen_tol`` raises :class:`GoldenMismatch`.
    """
    for c in (new := build_goldens(ids)):
        if "provenance" not in c or not c["provenance"].startswith("["):
            raise GoldenMismatch(f"case {c['id']} has no provenance tag")
    if check:
        old = load_goldens(path)
        bad = []
        for c in new:
            d = compare(c, old[c["id"]]) if c["id"] in old else float("inf")
            if d > c["regen_tol"]:
                bad.append(f"{c['id']} (max diff {d:.3g} > {c['regen_tol']})")
        if bad:
            raise GoldenMismatch("divergent golden cases: " + ", ".join(bad))
        return new
    out = Path(path) if path else Path(__file__).resolve().parents[1] / "data" / "goldens" / GOLDEN_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    if ids:
        merged = load_goldens(out) if out.exists() else {}
        merged.update({c["id"]: c for c in new})
        new = list(merged.values())
    out.write_text(json.dumps({"schema_version": 1, "cases": new}, indent=1, sort_keys=True) + "\n")
    return new
