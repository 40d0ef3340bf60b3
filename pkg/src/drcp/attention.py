"""Column-to-column cross-modal attention between LiDAR BEV and camera features.

Each camera column m is a batch entry: its queries are the H1 polar samples of
the BEV along column m's ray and its keys/values are the H2 rows of camera
column m. Camera tokens are channel-aligned (C2 -> C1) before the sinusoidal
row embedding is added. The attention output is scattered back along the rays
and added to the BEV.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import build_sampling_grid, grid_sector_sample, grid_sector_unsample
from .tensor import AttentionWeights, LinearProjection, multi_head_attention
from .validation import ContractViolation, check_feature_map


@dataclass(frozen=True)
class RgAttnConfig:
    c1: int
    c2: int
    heads: int = 4
    h1: int | None = None
    h2: int | None = None
    columns: int | None = None

    def __post_init__(self):
        if self.c1 % self.heads:
            raise ContractViolation(f"model dim {self.c1} not divisible by {self.heads} heads")

    @property
    def model_dim(self):
        return self.c1


@dataclass
class RgAttnParams:
    align: LinearProjection
    attn: AttentionWeights

    @classmethod
    def seeded(cls, cfg, rng, out_gain=1.0):
        """Xavier-uniform initialisation; ``out_gain`` scales the output projection."""
        return cls(LinearProjection.xavier(cfg.c1, cfg.c2, rng),
                   AttentionWeights.xavier(cfg.c1, rng, out_gain=out_gain))

    def to_tensors(self, prefix="rg_attn"):
        out = {f"{prefix}.align.weight": self.align.weights, f"{prefix}.align.bias": self.align.bias}
        for name in "qkvo":
            proj = getattr(self.attn, name)
            out[f"{prefix}.{name}.weight"] = proj.weights
            out[f"{prefix}.{name}.bias"] = proj.bias
        return out

    @classmethod
    def from_tensors(cls, tensors, prefix="rg_attn"):
        def proj(name):
            return LinearProjection(tensors[f"{prefix}.{name}.weight"], tensors[f"{prefix}.{name}.bias"])
        return cls(proj("align"), AttentionWeights(proj("q"), proj("k"), proj("v"), proj("o")))


def sinusoidal_embedding(n_positions, dim):
    """Fixed sin/cos table of shape (n_positions, dim) over token index."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2 + dim % 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(angle)[:, : (dim + 1) // 2]
    table[:, 1::2] = np.cos(angle)[:, : dim // 2]
    return table


def _check_inputs(bev, cam_feat, cfg):
    bev = check_feature_map(bev, "bev", channels=cfg.c1)
    cam_feat = check_feature_map(cam_feat, "camera features", channels=cfg.c2)
    if cfg.h1 is not None and bev.shape[1] != cfg.h1:
        raise ContractViolation(f"bev height {bev.shape[1]} != configured H1 {cfg.h1}")
    if cfg.h2 is not None and cam_feat.shape[1] != cfg.h2:
        raise ContractViolation(f"camera height {cam_feat.shape[1]} != configured H2 {cfg.h2}")
    if cfg.columns is not None and cam_feat.shape[2] != cfg.columns:
        raise ContractViolation(f"camera width {cam_feat.shape[2]} != configured W2 {cfg.columns}")
    return bev, cam_feat


def rg_attn_on_grid(bev, cam_feat, grid, params, cfg):
    """Attention fusion along a precomputed sampling grid."""
    bev, cam_feat = _check_inputs(bev, cam_feat, cfg)
    if grid.columns != cam_feat.shape[2]:
        raise ContractViolation(f"grid has {grid.columns} columns, camera has {cam_feat.shape[2]}")
    sub = grid_sector_sample(bev, grid)
    h1, h2 = sub.shape[1], cam_feat.shape[1]
    query = sub.transpose(2, 1, 0).astype(np.float64) + sinusoidal_embedding(h1, cfg.c1)
    kv = params.align(cam_feat.transpose(2, 1, 0)) + sinusoidal_embedding(h2, cfg.c1)
    fused = multi_head_attention(query, kv, kv, cfg.heads, params.attn)
    back = grid_sector_unsample(fused.transpose(2, 1, 0), grid, bev.shape[1:])
    return bev + back


def intrin_rg_attn(bev, cam_feat, cam, params, cfg, spec):
    """Fuse one camera's features into the LiDAR BEV; output has the BEV's shape."""
    cam_feat = check_feature_map(cam_feat, "camera features")
    grid = build_sampling_grid(cam, spec, cam_feat.shape[2], bev.shape[1])
    return rg_attn_on_grid(bev, cam_feat, grid, params, cfg)


def multi_camera_fuse(bev, cams, params, cfg, spec):
    """Apply :func:`intrin_rg_attn` for each (camera, features) pair in order."""
    out = check_feature_map(bev, "bev", channels=cfg.c1)
    for cam, feat in cams:
        out = intrin_rg_attn(out, feat, cam, params, cfg, spec)
    return out
