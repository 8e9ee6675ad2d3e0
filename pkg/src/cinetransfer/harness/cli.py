"""Command line entry point: ``cinetransfer <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..renderer import RenderError
from ..scene import SceneConfigError
from . import commands as C
from .scenarios import ScenarioError, load_scenario

log = logging.getLogger("cinetransfer")


def _resolution(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 64x64, got {text!r}") from None
    if h < 4 or w < 4:
        raise argparse.ArgumentTypeError("resolution must be at least 4x4")
    return h, w


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p, scenario_default=None):
    p.add_argument("--scenario", default=scenario_default,
                   help="shipped scenario name or path to a scenario JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--resolution", type=_resolution, default=None, help="HxW, e.g. 64x64")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cinetransfer",
                                 description="Recover camera motion from a reference clip.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("copy-task", help="transfer a reference motion onto a target scene")
    _common(p, "copy_same")
    p.add_argument("--arm", default=None, help="loss arm override")

    p = sub.add_parser("ablate-param", help="time or focal recovery from random inits")
    _common(p, None)
    p.add_argument("--kind", choices=("time", "focal"), required=True)
    p.add_argument("--runs", type=int, default=16)
    p.add_argument("--clip-len", type=int, default=6)

    p = sub.add_parser("ablate-guidance", help="sweep the number of sampled pixels")
    _common(p, "guidance")
    p.add_argument("--counts", type=_int_list, default=[64, 256, 1024, 4096])
    p.add_argument("--seeds", type=_int_list, default=None)

    p = sub.add_parser("landscape", help="probe the loss around a ground-truth camera")
    _common(p, None)
    p.add_argument("--kind", choices=("pose", "photometric"), required=True)
    p.add_argument("--reference-scene", default="scene_a")
    p.add_argument("--target-scene", default="scene_a")
    p.add_argument("--grid", type=int, default=9)
    p.add_argument("--step", type=float, default=0.15)

    p = sub.add_parser("render-export", help="render and export an interpolated trajectory")
    _common(p, None)
    p.add_argument("--trajectory", required=True, help="trajectory file from a copy task")
    p.add_argument("--scene", default="scene_a")
    p.add_argument("--fps-multiplier", type=int, default=1)
    p.add_argument("--no-frames", action="store_true", help="write only the export file")
    return ap


def _scenario(args):
    sc = load_scenario(args.scenario)
    return sc.with_overrides(seed=args.seed, resolution=args.resolution,
                             arm=getattr(args, "arm", None))


def run(args) -> int:
    if args.command == "copy-task":
        rec = C.cmd_copy_task(_scenario(args), args.out)
        print(json.dumps({"success": rec.success, "rmse_ate": rec.report["rmse_ate"],
                          "je": rec.report["je"], "out": str(args.out)}))
    elif args.command == "ablate-param":
        base = _scenario(args) if args.scenario else None
        summary = C.cmd_ablate_param(args.kind, args.out, runs=args.runs, clip_len=args.clip_len,
                                     seed=args.seed or 0, base=base)
        print(json.dumps({k: summary[k] for k in ("kind", "runs", "failed_runs", "method_median",
                                                   "control_median")}))
    elif args.command == "ablate-guidance":
        sc = _scenario(args)
        seeds = args.seeds if args.seeds else [sc.seed]
        for row in C.cmd_ablate_guidance(sc, args.counts, args.out, seeds):
            print(json.dumps(row))
    elif args.command == "landscape":
        motion, res, seed = None, args.resolution or (64, 64), args.seed or 0
        if args.scenario:
            sc = _scenario(args)
            motion, res, seed = sc.motion, sc.resolution, sc.seed
        s = C.cmd_landscape(args.kind, args.reference_scene, args.target_scene, args.out,
                            grid=args.grid, step=args.step, motion=motion, seed=seed,
                            resolution=res)
        print(json.dumps({k: s[k] for k in ("kind", "argmin", "center", "near_minima")}))
    elif args.command == "render-export":
        r = C.cmd_render_export(args.trajectory, args.scene, args.out, args.fps_multiplier,
                                args.resolution or (64, 64), render_frames=not args.no_frames)
        print(json.dumps(r))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ScenarioError, SceneConfigError, RenderError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
