"""Command-line entry point ``drcp``."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .estimators import DRCPDetector
from .geometry import build_sampling_grid
from .io import save_tensor
from .sim.pipeline import PipelineParams, run_frame, scene_config
from .sim.scene import default_cameras, generate_scene
from .sim.sweep import SWEEP_PARAMS, Suite, sweep, timing_path, train_scenes, write_sweep
from .tensor import RngStream
from .validation import ContractViolation, FormatError

DETECTION_COLUMNS = ("frame_id", "x", "y", "z", "h", "w", "l", "theta", "score", "dir_bin")


def _load_config(path):
    return PipelineConfig() if path is None else PipelineConfig.from_file(path)


def write_detections(path, frames):
    """``frames`` is a list of (frame_id, detections)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_COLUMNS)
        for fid, dets in frames:
            for d in dets:
                w.writerow([fid] + [f"{v:.6f}" for v in (d.x, d.y, d.z, d.h, d.w, d.l, d.theta, d.score)]
                           + [d.direction_bin])


def cmd_generate_scene(args):
    cfg = _load_config(args.config)
    scene = generate_scene(cfg.grid, args.agents, RngStream(args.seed), scene_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, agent in enumerate(scene.agents):
        save_tensor(out / f"agent{k}_lidar.drcp", agent.lidar)
        for j, feat in enumerate(agent.camera_feats):
            save_tensor(out / f"agent{k}_cam{j}.drcp", feat)
    write_detections(out / "ground_truth.csv", [(0, scene.ground_truth())])
    with open(out / "agents.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("agent", "x", "y", "yaw", "n_visible"))
        for k, a in enumerate(scene.agents):
            w.writerow((k, f"{a.pose.x:.6f}", f"{a.pose.y:.6f}", f"{a.pose.yaw:.6f}", int(a.visible.sum())))
    print(f"scene seed={args.seed} agents={args.agents} boxes={len(scene.boxes)} "
          f"ground_truth={len(scene.ground_truth())} -> {out}")
    return 0


def _detector(cfg, args):
    det = DRCPDetector(cfg, n_iter=cfg.n_iter, learning_rate=cfg.learning_rate)
    if getattr(args, "params", None):
        det.params_ = PipelineParams.load(args.params, cfg)
    else:
        det.fit(train_scenes(cfg))
    if getattr(args, "save_params", None):
        det.params_.save(args.save_params)
    return det


def cmd_run(args):
    cfg = _load_config(args.config)
    changes = {}
    if args.no_mdma:
        changes["use_mdma"] = False
    if args.mdma_t is not None:
        changes["mdma_t"] = args.mdma_t
    if args.mdma_seed is not None:
        changes["mdma_seed"] = args.mdma_seed
    cfg = cfg.replace(**changes)
    suite = Suite.build(cfg, detector=_detector(cfg, args))
    res = suite.evaluate()
    if args.out:
        write_detections(args.out, [(f.frame_id, f.detections) for f in res.frames])
    if args.dump_intermediates:
        dump = Path(args.dump_intermediates)
        dump.mkdir(parents=True, exist_ok=True)
        f0 = run_frame(suite.scenes[0], suite.detector.params_, cfg, frame_id=suite.frame_ids[0],
                       messages=suite.messages[0], keep_intermediates=True)
        for name, arr in f0.intermediates.items():
            save_tensor(dump / f"{name}.drcp", np.asarray(arr, np.float32))
    mode = "ppxx+mdma" if cfg.use_mdma else "ppxx_only"
    print(f"mode={mode} frames={len(res.frames)} "
          + " ".join(f"AP@{t}={v:.4f}" for t, v in res.ap.items()))
    print("stage_ms " + " ".join(f"{k}={v:.1f}" for k, v in res.stage_ms.items()))
    return 0


def _parse_grid(text, param):
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise ContractViolation("empty grid")
    return [float(v) for v in vals] if param == "pose" else [int(v) for v in vals]


def cmd_sweep(args):
    cfg = _load_config(args.config)
    grid = _parse_grid(args.grid, args.param)
    rows, timing = sweep(args.param, grid, cfg)
    write_sweep(rows, timing, args.out)
    for r in rows:
        print(f"{r['param']}={r['value']} AP30={r['AP30']:.4f} AP50={r['AP50']:.4f} AP70={r['AP70']:.4f}")
    print(f"wrote {args.out} and {timing_path(args.out)}")
    return 0


def cmd_grid_dump(args):
    cfg = _load_config(args.config)
    cams = default_cameras()
    if not 0 <= args.camera < len(cams):
        raise ContractViolation(f"camera index must be in [0, {len(cams)})")
    grid = build_sampling_grid(cams[args.camera], cfg.grid, cfg.camera_width)
    if args.out:
        save_tensor(args.out, grid.coords.transpose(2, 0, 1).astype(np.float32))
        print(f"wrote {args.out}")
        return 0
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("column", "radial", "theta", "radius", "x_cell", "y_cell"))
    for m in range(grid.columns):
        for n in range(grid.radial_bins):
            x, y = grid.coords[n, m]
            w.writerow((m, n, f"{grid.thetas[m]:.9f}", f"{grid.radii[n]:.6f}", f"{x:.6f}", f"{y:.6f}"))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="drcp", description="Cooperative BEV perception simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scene", help="render one synthetic scene to DRCP tensors")
    g.add_argument("--agents", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate_scene)

    r = sub.add_parser("run", help="fit heads and evaluate on the configured suite")
    r.add_argument("--config")
    r.add_argument("--no-mdma", action="store_true")
    r.add_argument("--mdma-t", type=int)
    r.add_argument("--mdma-seed", type=int)
    r.add_argument("--out", help="detections CSV")
    r.add_argument("--params", help="load a parameter bundle instead of fitting")
    r.add_argument("--save-params", help="write the fitted parameter bundle")
    r.add_argument("--dump-intermediates", metavar="DIR", help="write first-frame intermediates as DRCP tensors")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="robustness sweep to CSV")
    s.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    s.add_argument("--grid", required=True, help="comma-separated values")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_sweep)

    gr = sub.add_parser("grid", help="sampling-grid utilities")
    gsub = gr.add_subparsers(dest="grid_command", required=True)
    d = gsub.add_parser("dump", help="print a camera's polar sampling grid")
    d.add_argument("--camera", type=int, required=True)
    d.add_argument("--config")
    d.add_argument("--out", help="write coords as a (2, H1, W2) DRCP tensor instead")
    d.set_defaults(func=cmd_grid_dump)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except (ContractViolation, FormatError, OSError) as exc:
        print(f"drcp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
