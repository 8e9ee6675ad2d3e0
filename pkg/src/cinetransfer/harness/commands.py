"""The experiment commands. Each writes RunRecords and returns them."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import metrics as M
from ..geometry import (Trajectory, export_trajectory, interpolate_trajectory, load_trajectory)
from ..optimizer import OptimizationError, transfer_clip
from ..proxies import make_reference, render_heatmaps
from ..renderer import RenderError, dump_frame, render, write_float_grid
from ..scene import build_scene
from .records import RunRecord, write_jsonl
from .scenarios import Scenario, gt_trajectory, initial_params

log = logging.getLogger(__name__)


def _seed_dir(out, name) -> Path:
    p = Path(out) / name
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_copy_task(scenario: Scenario, out_dir, extras: dict | None = None,
                  init_override=None) -> RunRecord:
    """Reference from the reference scene, transfer onto the target scene, evaluate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    cfg = scenario.optim_config()
    ref_scene, tgt_scene = scenario.scenes()
    gt = gt_trajectory(scenario.motion, scenario.seed)
    clip = make_reference(gt, ref_scene, cfg.resolution, cfg.quadrature, cfg.sigma_px,
                          cfg.occlusion)
    init = init_override or initial_params(scenario.init, gt[0], tgt_scene, scenario.seed)
    extras = dict(extras or {})
    iterations = 0
    traj_path = None
    try:
        result = transfer_clip(clip, tgt_scene, init, cfg, return_result=True)
    except (OptimizationError, RenderError) as exc:
        stage = getattr(exc, "stage", type(exc).__name__)
        report = M.EvalReport.failed(stage, str(exc))
        partial = getattr(exc, "partial", None)
        extras["frames_solved"] = len(partial) if partial is not None else 0
    else:
        est = result.trajectory
        iterations = result.iterations
        colors = clip.colors if scenario.same_scene else None
        report = M.evaluate(est, gt, tgt_scene, cfg.resolution, colors, cfg.quadrature)
        traj_path = "trajectory.txt"
        export_trajectory(est, out / traj_path)
        write_jsonl(out / "log.jsonl", result.log)
        extras["peak_adjoint_pixels"] = result.peak_adjoint_pixels
        extras["final_focal"] = [p.focal for p in est.params]
        extras["final_time"] = [p.time for p in est.params]
        extras["final_position"] = est.positions().tolist()
    extras["scene_diameter"] = tgt_scene.diameter
    rec = RunRecord(scenario.to_dict(), report.to_dict(), iterations, traj_path, extras,
                    wall_time=time.perf_counter() - t_start)
    rec.write(out)
    log.info("%s: success=%s ate=%s je=%s", scenario.name, rec.success, report.rmse_ate, report.je)
    return rec


# --- parameter ablation ------------------------------------------------------------------------


def param_ablation_scenario(kind: str, clip_len: int = 6, base: Scenario | None = None) -> Scenario:
    if kind not in ("time", "focal"):
        raise ValueError(f"unsupported ablation kind {kind!r}; expected 'time' or 'focal'")
    motion = {"kind": f"{kind}-only", "frames": int(clip_len)}
    if base is not None:
        keep = {k: v for k, v in base.motion.items() if k in ("distance", "focal", "azimuth_deg",
                                                               "height", "time_range")}
        motion.update(keep)
        return replace(base, name=f"ablate-{kind}", motion=motion, init={"kind": "same"})
    return Scenario(name=f"ablate-{kind}", reference_scene="scene_a", target_scene="scene_a",
                    motion=motion, init={"kind": "same"})


def cmd_ablate_param(kind: str, out_dir, runs: int = 16, clip_len: int = 6, seed: int = 0,
                     base: Scenario | None = None) -> dict:
    """Random init of the studied parameter, method error vs the hold-at-init control."""
    sc = param_ablation_scenario(kind, clip_len, base)
    out = Path(out_dir)
    records = []
    for r in range(runs):
        run_sc = replace(sc, seed=int(seed) * 1000 + r)
        gt = gt_trajectory(run_sc.motion, run_sc.seed)
        tgt_scene = build_scene(run_sc.target_scene)
        rng = np.random.default_rng([int(seed), r, 11])
        cfg = run_sc.optim_config()
        if kind == "time":
            value = float(rng.uniform(0.0, 1.0))
            init = replace(gt[0], time=value)
            truth = np.array([p.time for p in gt.params])
        else:
            lo, hi = cfg.focal_bounds
            f0 = gt[0].focal
            value = float(np.clip(rng.uniform(0.6 * f0, 1.4 * f0), lo, hi))
            init = replace(gt[0], focal=value)
            truth = np.array([p.focal for p in gt.params])
        rec = cmd_copy_task(run_sc, _seed_dir(out, f"{kind}_run{r:02d}"),
                            extras={"ablation": kind, "init_value": value}, init_override=init)
        if rec.success:
            est = np.array(rec.extras["final_time" if kind == "time" else "final_focal"])
            rec.extras["method_errors"] = np.abs(est - truth).tolist()
        rec.extras["control_errors"] = np.abs(value - truth).tolist()
        rec.write(out / f"{kind}_run{r:02d}")
        records.append(rec)
    summary = param_table(records)
    (out / f"ablate_{kind}_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def param_table(records) -> dict:
    """Error distributions of method and control, pooled over runs and frames."""
    method, control, failed = [], [], 0
    kind = None
    for rec in records:
        kind = rec.extras.get("ablation", kind)
        control += rec.extras.get("control_errors", [])
        if rec.success and "method_errors" in rec.extras:
            method += rec.extras["method_errors"]
        else:
            failed += 1
    return {
        "kind": kind, "runs": len(records), "failed_runs": failed,
        "method_errors": method, "control_errors": control,
        "method_median": float(np.median(method)) if method else None,
        "control_median": float(np.median(control)) if control else None,
    }


# --- guidance ablation -------------------------------------------------------------------------


def cmd_ablate_guidance(scenario: Scenario, counts, out_dir, seeds=(0,)) -> list[dict]:
    """Repeat the copy task per sample count and tabulate ATE and adjoint pixel counts."""
    H, W = scenario.resolution
    out = Path(out_dir)
    records = []
    for n in counts:
        n = int(n)
        if not 1 <= n <= H * W:
            raise ValueError(f"sample count {n} outside [1, {H * W}]")
        for s in seeds:
            optim = dict(scenario.optim)
            optim["guidance_n"] = None if n == H * W else n
            sc = replace(scenario, optim=optim, seed=int(s))
            rec = cmd_copy_task(sc, _seed_dir(out, f"n{n:05d}_seed{s}"), extras={"guidance_n": n})
            records.append(rec)
    table = guidance_table(records)
    write_jsonl(out / "guidance_table.jsonl", table)
    return table


def guidance_table(records) -> list[dict]:
    rows = {}
    for rec in records:
        n = rec.extras["guidance_n"]
        row = rows.setdefault(n, {"n": n, "ate": [], "peak_adjoint_pixels": 0, "failed": 0})
        if rec.success:
            row["ate"].append(rec.report["rmse_ate"])
            row["peak_adjoint_pixels"] = max(row["peak_adjoint_pixels"],
                                             rec.extras.get("peak_adjoint_pixels", 0))
        else:
            row["failed"] += 1
    table = []
    for n in sorted(rows):
        r = rows[n]
        a = np.array(r["ate"]) if r["ate"] else np.array([np.nan])
        table.append({"n": n, "ate_mean": float(a.mean()), "ate_std": float(a.std()),
                      "peak_adjoint_pixels": r["peak_adjoint_pixels"], "runs": len(r["ate"]),
                      "failed": r["failed"]})
    return table


# --- arm comparison ----------------------------------------------------------------------------


def cmd_compare_arms(scenario: Scenario, arms, seeds, out_dir) -> list[RunRecord]:
    out = Path(out_dir)
    records = []
    for s in seeds:
        for arm in arms:
            sc = replace(scenario, arm=arm, seed=int(s))
            tag = arm.replace("+", "_")
            records.append(cmd_copy_task(sc, _seed_dir(out, f"seed{s}_{tag}"), extras={"arm": arm}))
    return records


def arm_table(records) -> dict:
    """{seed: {arm: {"success", "ate", "je"}}}."""
    table: dict = {}
    for rec in records:
        seed = rec.scenario["seed"]
        arm = rec.scenario["arm"]
        table.setdefault(seed, {})[arm] = {"success": rec.success,
                                           "ate": rec.report.get("rmse_ate"),
                                           "je": rec.report.get("je")}
    return table


# --- landscape ---------------------------------------------------------------------------------


def cmd_landscape(kind: str, reference_scene: str, target_scene: str, out_dir, grid: int = 9,
                  step: float = 0.15, motion: dict | None = None, seed: int = 0,
                  resolution=(64, 64)) -> dict:
    """Probe the loss around the first ground-truth camera of ``motion``."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    motion = motion or {"kind": "static", "frames": 2}
    gt = gt_trajectory(motion, seed)[0]
    ref = build_scene(reference_scene)
    tgt = ref if target_scene == reference_scene else build_scene(target_scene)
    frame = {"heat": render_heatmaps(gt, ref, resolution).data}
    if kind == "photometric":
        frame["color"] = render(gt, ref, resolution).color
    offsets = (np.arange(grid) - (grid - 1) / 2) * step
    G = M.landscape_probe(kind, tgt, frame, gt, (offsets, offsets), resolution)
    write_float_grid(out / f"landscape_{kind}.pgm", np.nan_to_num(G, nan=-1.0),
                     f"{kind} loss, {reference_scene} -> {target_scene}, step {step}")
    c = (grid - 1) // 2
    summary = {
        "kind": kind, "reference_scene": reference_scene, "target_scene": target_scene,
        "grid": grid, "step": step, "offsets": offsets.tolist(),
        "matrix": [[None if not np.isfinite(v) else float(v) for v in row] for row in G],
        "slice_x": [None if not np.isfinite(v) else float(v) for v in G[c]],
        "slice_y": [None if not np.isfinite(v) else float(v) for v in G[:, c]],
        "argmin": list(M.argmin_cell(G)), "center": [c, c],
        "near_minima": M.near_minima(G),
    }
    (out / f"landscape_{kind}.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


# --- render and export -------------------------------------------------------------------------


def cmd_render_export(trajectory_path, scene_name: str, out_dir, fps_multiplier: int = 1,
                      resolution=(64, 64), render_frames: bool = True) -> dict:
    """Interpolate the keyframes, render every frame and write the export file."""
    if fps_multiplier < 1:
        raise ValueError("fps multiplier must be >= 1")
    traj = load_trajectory(trajectory_path)
    scene = build_scene(scene_name)
    idx = traj.indices
    n = (idx[-1] - idx[0]) * fps_multiplier + 1
    frames = []
    for j in range(n):
        t = idx[0] + j / fps_multiplier
        frames.append((j, interpolate_trajectory(traj, min(t, idx[-1]))))
    dense = Trajectory(frames)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export = export_trajectory(dense, out / "export.txt")
    if render_frames:
        fdir = out / "frames"
        for j, p in frames:
            dump_frame(fdir, render(p, scene, resolution), j, "synth")
    return {"frames": n, "export": str(export)}
