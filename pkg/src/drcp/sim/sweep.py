"""Robustness sweeps over agent count, pose noise and compression ratio.

A :class:`Suite` fixes the fitted detector and the evaluation scenes, so
every grid point sees the same frames and the same noise draws. Results are
reduced in grid order. The results CSV holds only deterministic columns;
wall-clock figures go to a ``.timing.csv`` sidecar.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..estimators import DRCPDetector
from ..tensor import RngStream
from ..validation import ContractViolation
from .channel import ChannelConfig
from .pipeline import STAGES, encode_scene, evaluate, run_frame, scene_config
from .scene import generate_scene

SWEEP_PARAMS = ("agents", "pose", "compression")
RESULT_COLUMNS = ("param", "value", "AP30", "AP50", "AP70", "n_frames")
FRAMES_PER_SEED = 100_000


def train_scenes(cfg):
    sc = scene_config(cfg)
    return [generate_scene(cfg.grid, cfg.n_agents, RngStream(cfg.seed, (1, i)), sc) for i in range(cfg.train_frames)]


@dataclass
class Suite:
    """Fitted detector plus cached evaluation scenes and agent encodings."""

    cfg: object
    detector: DRCPDetector
    n_agents: int
    scenes: list = field(default_factory=list)
    frame_ids: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    encode_s: list = field(default_factory=list)

    @classmethod
    def build(cls, cfg, n_agents=None, detector=None):
        n_agents = cfg.n_agents if n_agents is None else n_agents
        if detector is None:
            detector = DRCPDetector(cfg, n_iter=cfg.n_iter, learning_rate=cfg.learning_rate).fit(train_scenes(cfg))
        suite = cls(cfg, detector, n_agents)
        sc_cfg = scene_config(cfg)
        for j in range(cfg.n_seeds):
            for i in range(cfg.eval_frames):
                scene = generate_scene(cfg.grid, n_agents, RngStream(cfg.seed + j, (0, i)), sc_cfg)
                suite.scenes.append(scene)
                suite.frame_ids.append(j * FRAMES_PER_SEED + i)
                t0 = time.perf_counter()
                suite.messages.append(encode_scene(scene, detector.params_))
                suite.encode_s.append(time.perf_counter() - t0)
        return suite

    def evaluate(self, channel=None, n_agents=None, ground_truth=None, use_mdma=None):
        """Run every cached frame with the given link and participation."""
        n = self.n_agents if n_agents is None else n_agents
        if not 1 <= n <= self.n_agents:
            raise ContractViolation(f"suite holds {self.n_agents} agents, asked for {n}")
        mode = self.cfg.ground_truth if ground_truth is None else ground_truth
        ids = list(range(n))
        frames = []
        for scene, fid, msgs, enc in zip(self.scenes, self.frame_ids, self.messages, self.encode_s):
            gt = scene.ground_truth() if mode == "scene" else scene.ground_truth(ids)
            fr = run_frame(scene, self.detector.params_, self.cfg, channel, use_mdma, ids, fid,
                           messages=msgs[:n], ground_truth=gt)
            # encodings are cached, so report the time they took when built
            fr.timings["encode"] = enc * n / len(msgs)
            frames.append(fr)
        return evaluate(frames, {"n_agents": n, "ground_truth": mode})


def point_channel(param, value, cfg):
    """Channel and agent count for one grid point."""
    base = ChannelConfig(cfg.pose_noise_xy, cfg.pose_noise_yaw, cfg.compression_ratio, cfg.compression_basis,
                         cfg.channel_seed)
    if param == "agents":
        return base, int(value)
    if param == "pose":
        # one sigma drives both: metres for x/y, degrees for yaw
        return ChannelConfig(float(value), math.radians(float(value)), base.compression_ratio, base.basis,
                             base.seed), cfg.n_agents
    if param == "compression":
        return ChannelConfig(base.pose_noise_sigma_xy, base.pose_noise_sigma_yaw, int(value), base.basis,
                             base.seed), cfg.n_agents
    raise ContractViolation(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")


def sweep(param, grid, cfg, suite=None):
    """Evaluate every grid value; returns (rows, timing_rows) in grid order."""
    if not grid:
        raise ContractViolation("sweep grid is empty")
    if param not in SWEEP_PARAMS:
        raise ContractViolation(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    if suite is None:
        need = max(int(v) for v in grid) if param == "agents" else cfg.n_agents
        suite = Suite.build(cfg, need)
    rows, timing = [], []
    for value in grid:
        channel, n = point_channel(param, value, cfg)
        t0 = time.perf_counter()
        res = suite.evaluate(channel, n)
        elapsed = time.perf_counter() - t0
        n_frames = len(res.frames)
        rows.append({"param": param, "value": value, "AP30": res.ap[0.3], "AP50": res.ap[0.5],
                     "AP70": res.ap[0.7], "n_frames": n_frames})
        trow = {"param": param, "value": value, "ms_per_frame": 1000.0 * elapsed / max(n_frames, 1)}
        trow.update({f"{s}_ms": res.stage_ms[s] for s in STAGES})
        timing.append(trow)
    return rows, timing


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_csv(rows, path, columns=RESULT_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def timing_path(path):
    p = Path(path)
    return p.with_name(p.stem + ".timing.csv")


def write_sweep(rows, timing, path):
    write_csv(rows, path)
    cols = ("param", "value", "ms_per_frame") + tuple(f"{s}_ms" for s in STAGES)
    write_csv(timing, timing_path(path), cols)
