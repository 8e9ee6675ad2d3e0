"""Write the shipped scene presets to src/cinetransfer/data/scenes/."""
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "cinetransfer" / "data" / "scenes"
KEY_TIMES = [0.0, 0.25, 0.5, 0.75, 1.0]
BONES = [[0, 1], [0, 2], [1, 2], [1, 3], [3, 5], [2, 4], [4, 6], [1, 7], [2, 8], [7, 8],
         [7, 9], [9, 11], [8, 10], [10, 12]]
BOUNDS = [[-4.2, -4.2, -6.2], [4.2, 0.6, 3.9]]


def skeleton(m):
    """Joint positions at time m: walking stance, twisted shoulders, two moving arms."""
    head = [0.0, -1.72, -0.08]
    ls, rs = np.array([-0.21, -1.45, 0.12]), np.array([0.21, -1.45, -0.12])
    th = np.radians(15 + 140 * m)
    le = ls + 0.30 * np.array([-np.sin(th), np.cos(th), 0.35])
    lw = le + 0.28 * np.array([-np.sin(th + 0.2), np.cos(th + 0.2), 0.45])
    ph = np.radians(10 + 80 * m)
    re = rs + 0.30 * np.array([0.08, np.cos(ph), -np.sin(ph)])
    rw = re + 0.28 * np.array([0.05, np.cos(ph + 0.35), -np.sin(ph + 0.35)])
    return [head, ls, rs, le, re, lw, rw,
            [-0.13, -0.95, 0.06], [0.13, -0.95, -0.06],
            [-0.15, -0.52, 0.24], [0.15, -0.52, -0.22],
            [-0.16, -0.05, 0.42], [0.16, -0.05, -0.36]]


def actor(static=False, radius=1.0, palette=((0.85, 0.45, 0.35), (0.2, 0.25, 0.6)), amp=60.0):
    joints = [np.round(np.array(skeleton(0.0 if static else m), dtype=float), 6).tolist()
              for m in KEY_TIMES]
    torso = {1, 2, 7, 8, 9}
    radii = [round((0.11 if i in torso else 0.075) * radius, 4) for i in range(len(BONES))]
    colors = [list(palette[0]) if i < 7 else list(palette[1]) for i in range(len(BONES))]
    return {"key_times": KEY_TIMES, "joints": joints, "bones": BONES,
            "bone_amplitude": amp, "bone_radius": radii, "bone_color": colors}


def scene_a(static=False):
    return {
        "schema_version": 1, "name": "scene_a_static" if static else "scene_a",
        "bounds": BOUNDS, "background_color": [0.1, 0.1, 0.15],
        "slabs": [
            {"lo": [-4.0, -4.0, 3.0], "hi": [4.0, 0.4, 3.6], "edge": 0.05, "amplitude": 30.0,
             "color": [0.85, 0.78, 0.62]},
            {"lo": [-4.0, 0.0, -6.0], "hi": [4.0, 0.4, 3.6], "edge": 0.04, "amplitude": 30.0,
             "color": [0.35, 0.5, 0.35]},
        ],
        "blobs": [
            {"center": [-2.2, -1.3, 1.6], "scale": [0.3, 1.1, 0.3], "amplitude": 25.0,
             "color": [0.65, 0.2, 0.2]},
            {"center": [2.0, -2.3, 2.0], "scale": [0.35, 0.35, 0.35], "amplitude": 25.0,
             "color": [0.95, 0.9, 0.3]},
        ],
        "actor": actor(static),
    }


def scene_b():
    return {
        "schema_version": 1, "name": "scene_b",
        "bounds": BOUNDS, "background_color": [0.05, 0.12, 0.08],
        "slabs": [
            {"lo": [-4.0, -4.0, 2.3], "hi": [4.0, 0.4, 2.9], "edge": 0.05, "amplitude": 30.0,
             "color": [0.25, 0.35, 0.7]},
            {"lo": [-4.0, 0.0, -6.0], "hi": [4.0, 0.4, 2.9], "edge": 0.04, "amplitude": 30.0,
             "color": [0.62, 0.52, 0.4]},
        ],
        "blobs": [
            {"center": [-1.7, -0.7, 1.0], "scale": [0.35, 0.6, 0.35], "amplitude": 25.0,
             "color": [0.9, 0.6, 0.1]},
            {"center": [1.6, -1.6, 1.3], "scale": [0.4, 0.4, 0.4], "amplitude": 25.0,
             "color": [0.1, 0.8, 0.8]},
            {"center": [-0.9, -3.0, 1.8], "scale": [0.5, 0.3, 0.3], "amplitude": 25.0,
             "color": [0.95, 0.95, 0.95]},
            {"center": [2.6, -0.6, 0.6], "scale": [0.3, 0.5, 0.3], "amplitude": 25.0,
             "color": [0.5, 0.1, 0.6]},
        ],
        "actor": actor(radius=1.2, palette=((0.3, 0.8, 0.3), (0.9, 0.85, 0.2)), amp=50.0),
    }


def probe(name, blobs=(), slabs=()):
    a = actor(static=True)
    a["bone_amplitude"] = 0.0
    return {"schema_version": 1, "name": name, "bounds": BOUNDS,
            "background_color": [0.1, 0.1, 0.15], "blobs": list(blobs), "slabs": list(slabs),
            "actor": a}


def main():
    presets = {
        "scene_a": scene_a(),
        "scene_a_static": scene_a(static=True),
        "scene_b": scene_b(),
        "empty": probe("empty"),
        "blob": probe("blob", blobs=[{"center": [0.0, -1.0, 0.0], "scale": [0.4, 0.4, 0.4],
                                      "amplitude": 8.0, "color": [0.9, 0.3, 0.2]}]),
        "slab": probe("slab", slabs=[{"lo": [-4.0, -4.0, 2.0], "hi": [4.0, 0.4, 3.0],
                                      "edge": 0.01, "amplitude": 200.0,
                                      "color": [0.2, 0.7, 0.4]}]),
    }
    for name, cfg in presets.items():
        (OUT / f"{name}.json").write_text(json.dumps(cfg, indent=1) + "\n")


if __name__ == "__main__":
    main()
