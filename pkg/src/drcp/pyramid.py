"""Multi-scale, occupancy-weighted cross-agent BEV fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Kernel2D, concat_channels, conv2d, sigmoid, upsample_bilinear
from .validation import ContractViolation, check_feature_map

FUSE_EPS = 1e-8
N_SCALES = 3


@dataclass
class PyramidParams:
    """Level-1 refinement (``None`` = identity) and two stride-2 3x3 downsamplers."""

    level1: Kernel2D | None
    down: list

    @property
    def channels(self):
        c1 = self.level1.out_channels if self.level1 is not None else self.down[0].in_channels
        return (c1, self.down[0].out_channels, self.down[1].out_channels)

    @classmethod
    def seeded(cls, in_channels, channels, rng, noise=0.05):
        """Averaging downsamplers plus small seeded perturbations.

        Output channel i of each stage starts as the (box-averaged) copy of input
        channel i, so untrained pyramids pass the input signal through.
        """
        c1, c2, c3 = channels
        level1 = None
        if c1 != in_channels:
            level1 = _passthrough(c1, in_channels, 1, rng, noise)
        down = [_passthrough(c2, c1, 3, rng, noise, average=True),
                _passthrough(c3, c2, 3, rng, noise, average=True)]
        return cls(level1, down)


def _passthrough(out_c, in_c, k, rng, noise, average=False):
    kern = Kernel2D.xavier(out_c, in_c, k, rng, gain=noise)
    n = min(out_c, in_c)
    if average:
        kern.weights[np.arange(n), np.arange(n)] += 1.0 / (k * k)
    else:
        kern.weights[np.arange(n), np.arange(n), k // 2, k // 2] += 1.0
    return kern


def build_pyramid(fused_bev, params):
    """Three levels: the (optionally refined) input, then two stride-2 halvings."""
    x = check_feature_map(fused_bev, "fused BEV")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ContractViolation(f"pyramid base dims {x.shape[1:]} must be divisible by 4")
    level1 = x if params.level1 is None else conv2d(x, params.level1, padding=params.level1.k_h // 2)
    levels = [level1]
    for kern in params.down:
        levels.append(conv2d(levels[-1], kern, padding=kern.k_h // 2, stride=2))
    return levels


def occupancy_head(level, head):
    """Sigmoid occupancy score per cell from a 1-channel conv head."""
    if head.out_channels != 1:
        raise ContractViolation("occupancy head must have one output channel")
    logits = conv2d(level, head, padding=head.k_h // 2)[0]
    return sigmoid(logits).astype(np.float32)


def agent_weights(occs, eps=FUSE_EPS):
    """Per-agent cell weights occ_k / (sum_l occ_l + eps), shape (N, H, W)."""
    occs = np.asarray(occs, np.float64)
    if occs.ndim != 3 or occs.shape[0] == 0:
        raise ContractViolation("need at least one (H, W) occupancy map")
    return occs / (occs.sum(axis=0) + eps)


def fuse_agents_at_scale(levels, occs, eps=FUSE_EPS):
    """Occupancy-weighted sum of per-agent feature maps at one scale."""
    if len(levels) == 0:
        raise ContractViolation("fusion needs at least one agent")
    feats = np.stack([check_feature_map(f) for f in levels]).astype(np.float64)
    occs = np.stack([np.asarray(o, np.float64) for o in occs])
    if occs.shape[0] != feats.shape[0] or occs.shape[1:] != feats.shape[2:]:
        raise ContractViolation("occupancy maps must match agents and spatial dims")
    if feats.shape[0] == 1:
        return feats[0].astype(np.float32)
    alpha = agent_weights(occs, eps)
    return (alpha[:, None] * feats).sum(axis=0).astype(np.float32)


def pyramid_concat(per_scale, target_hw):
    """Upsample every scale to ``target_hw`` and stack along channels."""
    th, tw = target_hw
    ups = []
    for f in per_scale:
        f = check_feature_map(f)
        ups.append(f if f.shape[1:] == (th, tw) else upsample_bilinear(f, th, tw))
    return concat_channels(ups)


def box_corners(x, y, length, width, yaw):
    """Footprint corners (4, 2) of a BEV box, counter-clockwise."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def points_in_box(px, py, x, y, length, width, yaw):
    """Boolean mask of metric points inside a rotated rectangle."""
    c, s = math.cos(yaw), math.sin(yaw)
    dx = np.asarray(px) - x
    dy = np.asarray(py) - y
    along = c * dx + s * dy
    across = -s * dx + c * dy
    return (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)


def occupancy_labels_from_boxes(boxes, spec, scale=1):
    """Binary (H, W) mask of cells whose centre lies inside any box footprint.

    ``boxes`` carry metric ``x, y, l, w, theta`` attributes in the grid's frame;
    ``scale`` selects the pyramid level (1 = full resolution).
    """
    grid = spec.downscaled(2 ** (scale - 1)) if scale > 1 else spec
    cx, cy = grid.cell_centers()
    mask = np.zeros(grid.shape, np.uint8)
    for b in boxes:
        mask |= points_in_box(cx, cy, b.x, b.y, b.l, b.w, b.theta).astype(np.uint8)
    return mask
