"""Flat ``key = value`` configuration for the simulation CLI.

Blank lines and ``#`` comments are ignored. Tuple-valued keys take
comma-separated numbers. Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .geometry import BevGridSpec
from .validation import ContractViolation

ALLOWED_RATIOS = (1, 2, 4, 8, 16, 32)


@dataclass(frozen=True)
class PipelineConfig:
    # BEV raster
    grid_height: int = 64
    grid_width: int = 128
    x_min: float = -102.4
    x_max: float = 102.4
    y_min: float = -51.2
    y_max: float = 51.2
    # sensors / synthetic scenes
    lidar_channels: int = 32
    camera_channels: int = 16
    camera_height: int = 8
    camera_width: int = 32
    n_agents: int = 2
    occlusion: bool = True
    seed: int = 0
    train_frames: int = 16
    eval_frames: int = 20
    n_seeds: int = 1
    ground_truth: str = "participants"
    # fusion
    attn_heads: int = 4
    attn_out_gain: float = 0.2
    pyramid_channels: tuple = (16, 16, 16)
    desk_noise: float = 0.05
    param_seed: int = 0
    # diffusion refinement
    use_mdma: bool = True
    mdma_t: int = 10
    mdma_steps: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mdma_candidates: int = 1
    mdma_keep_bias: float = 3.0
    mdma_seed: int = 0
    # detection
    n_anchor: int = 6
    score_thresh: float = 0.2
    iou_thresh: float = 0.15
    n_iter: int = 300
    learning_rate: float = 0.01
    # V2X channel
    pose_noise_xy: float = 0.0
    pose_noise_yaw: float = 0.0
    compression_ratio: int = 1
    compression_basis: str = "random"
    channel_seed: int = 0

    def __post_init__(self):
        if self.compression_ratio not in ALLOWED_RATIOS:
            raise ContractViolation(f"compression_ratio must be one of {ALLOWED_RATIOS}")
        if self.compression_basis not in ("random", "pca"):
            raise ContractViolation("compression_basis must be 'random' or 'pca'")
        if not 1 <= self.n_agents <= 5:
            raise ContractViolation("n_agents must be in [1, 5]")
        if self.ground_truth not in ("participants", "scene"):
            raise ContractViolation("ground_truth must be 'participants' or 'scene'")
        if len(self.pyramid_channels) != 3:
            raise ContractViolation("pyramid_channels needs three entries")

    @property
    def grid(self):
        return BevGridSpec.from_range((self.x_min, self.x_max), (self.y_min, self.y_max),
                                      self.grid_height, self.grid_width)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        defaults = {f.name: f.default for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in types:
                raise ContractViolation(f"unknown config key {key!r}")
            try:
                parsed[key] = _coerce(raw, defaults[key])
            except ValueError as exc:
                raise ContractViolation(f"bad value for {key!r}: {raw!r}") from exc
        return cls(**parsed)

    @classmethod
    def from_file(cls, path):
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_dict(values)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractViolation(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
