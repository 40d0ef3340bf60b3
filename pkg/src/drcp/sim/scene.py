"""Synthetic multi-agent scenes standing in for LiDAR and camera backbones.

LiDAR BEV channels of an agent (rasterised in its own frame) for every box it
can see; geometric channels use world axes so a rigid warp keeps them
meaningful for the ego:

    0  centre heat: exp(-d^2 / 2 s^2), s = one cell
    1  footprint coverage (fraction of 4x4 sub-samples inside the box)
    2  heat * cos(2 theta)        3  heat * sin(2 theta)
    4  heat * dx / cell           5  heat * dy / cell   (cell centre -> box centre)
    6  heat * cos(theta)          7  heat * sin(theta)
    8  heat * (z - z_anchor)      9-11 heat * log(l, w, h / anchor size)
    12 occluder (building) coverage
    13+ fixed random mixtures of heat and coverage

Every channel carries N(0, noise^2) sensor noise. Boxes are visible when they
are within LiDAR range and the line of sight to their centre, or to at least
two corners, is not blocked by another box or a building.

Camera features are column stripes: column m carries the embedding of the
nearest visible object whose bearing interval contains the column's ray,
scaled by proximity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..detect import AnchorConfig, Detection
from ..geometry import BevGridSpec, CameraModel, Pose2D, column_angles, camera_axis_in_bev
from ..pyramid import box_corners, points_in_box
from ..tensor import RngStream
from ..validation import ContractViolation

N_GEOMETRIC = 13
# channel semantics (mixtures, camera embeddings) are shared by every scene
SEMANTIC_SEED = 20251


@dataclass(frozen=True)
class SceneConfig:
    lidar_channels: int = 32
    camera_channels: int = 16
    camera_height: int = 8
    camera_width: int = 32
    n_boxes: tuple = (18, 26)
    n_occluders: tuple = (6, 10)
    lidar_range: float = 60.0
    camera_range: float = 90.0
    noise: float = 0.03
    occlusion: bool = True
    agent_spread: tuple = (60.0, 35.0)
    min_agent_distance: float = 25.0

    def __post_init__(self):
        if self.lidar_channels < N_GEOMETRIC + 1:
            raise ContractViolation(f"need at least {N_GEOMETRIC + 1} LiDAR channels")


@dataclass
class AgentView:
    pose: Pose2D
    cameras: list
    lidar: np.ndarray
    camera_feats: list
    visible: np.ndarray

    @property
    def camera_pairs(self):
        return list(zip(self.cameras, self.camera_feats))


@dataclass
class Scene:
    spec: BevGridSpec
    agents: list
    boxes: list
    occluders: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def ego(self):
        return self.agents[0]

    def visible_to(self, agent_ids):
        """Indices of boxes seen by at least one of ``agent_ids``."""
        mask = np.zeros(len(self.boxes), bool)
        for k in agent_ids:
            mask |= self.agents[k].visible
        return np.flatnonzero(mask)

    def ground_truth(self, agent_ids=None):
        """Boxes in the ego frame visible to the participating agents and inside the grid."""
        agent_ids = range(len(self.agents)) if agent_ids is None else agent_ids
        (x0, x1), (y0, y1) = self.spec.x_range, self.spec.y_range
        out = []
        for i in self.visible_to(agent_ids):
            b = self.boxes[i]
            if x0 <= b.x < x1 and y0 <= b.y < y1:
                out.append(b)
        return out


def default_cameras(n=4):
    return [CameraModel.mounted(2 * math.pi * i / n, x=0.5 * math.cos(2 * math.pi * i / n),
                                y=0.5 * math.sin(2 * math.pi * i / n)) for i in range(n)]


def _segment_hits_rect(p0, p1, rect, eps=1e-9):
    """Liang-Barsky test of segment p0->p1 against a rotated rectangle (x, y, l, w, yaw)."""
    x, y, length, width, yaw = rect
    c, s = math.cos(yaw), math.sin(yaw)

    def local(p):
        dx, dy = p[0] - x, p[1] - y
        return c * dx + s * dy, -s * dx + c * dy

    (ax, ay), (bx, by) = local(p0), local(p1)
    dx, dy = bx - ax, by - ay
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, ax + length / 2), (dx, length / 2 - ax), (-dy, ay + width / 2), (dy, width / 2 - ay)):
        if abs(p) < eps:
            if q < 0:
                return False
        else:
            t = q / p
            if p < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
            if t0 > t1:
                return False
    return True


def box_footprint(b):
    return (b.x, b.y, b.l, b.w, b.theta)


def visibility(origin, boxes, occluders, max_range):
    """Boolean visibility of every box from a world-frame origin."""
    obstacles = [box_footprint(b) for b in boxes] + list(occluders)
    vis = np.zeros(len(boxes), bool)
    for i, b in enumerate(boxes):
        if math.hypot(b.x - origin[0], b.y - origin[1]) > max_range:
            continue
        others = [r for j, r in enumerate(obstacles) if j != i]
        targets = [(b.x, b.y)] + [tuple(p) for p in box_corners(*box_footprint(b))]
        clear = [not any(_segment_hits_rect(origin, t, r) for r in others) for t in targets]
        vis[i] = clear[0] or sum(clear[1:]) >= 2
    return vis


def _coverage(spec, cx, cy, rect, sub=4):
    """Fraction of each cell covered by a rectangle, via sub-sampling."""
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    cov = np.zeros(spec.shape)
    for ox in offs:
        for oy in offs:
            cov += points_in_box(cx + ox * spec.cell_size, cy + oy * spec.cell_size, *rect)
    return cov / (sub * sub)


def synthesize_lidar(spec, pose, boxes, visible, occluders, cfg, rng, anchors=AnchorConfig()):
    """LiDAR BEV features of one agent, rasterised in its local frame."""
    c = cfg.lidar_channels
    bev = np.zeros((c, *spec.shape))
    lx, ly = spec.cell_centers()
    wx, wy = pose.to_world(lx, ly)
    sigma = spec.cell_size
    for i in np.flatnonzero(visible):
        b = boxes[i]
        d2 = (wx - b.x) ** 2 + (wy - b.y) ** 2
        near = d2 < (3 * sigma + max(b.l, b.w)) ** 2
        if not near.any():
            continue
        heat = np.where(near, np.exp(-d2 / (2 * sigma * sigma)), 0.0)
        cov = _coverage(spec, wx, wy, box_footprint(b))
        bev[0] += heat
        bev[1] += cov
        bev[2] += heat * math.cos(2 * b.theta)
        bev[3] += heat * math.sin(2 * b.theta)
        bev[4] += heat * (b.x - wx) / spec.cell_size
        bev[5] += heat * (b.y - wy) / spec.cell_size
        bev[6] += heat * math.cos(b.theta)
        bev[7] += heat * math.sin(b.theta)
        bev[8] += heat * (b.z - anchors.z)
        bev[9] += heat * math.log(b.l / anchors.length)
        bev[10] += heat * math.log(b.w / anchors.width)
        bev[11] += heat * math.log(b.h / anchors.height)
    origin = (pose.x, pose.y)
    for rect in occluders:
        if math.hypot(rect[0] - origin[0], rect[1] - origin[1]) <= cfg.lidar_range + max(rect[2], rect[3]):
            bev[12] += _coverage(spec, wx, wy, rect, sub=2)
    mix = RngStream(SEMANTIC_SEED, (1,)).normal((c - N_GEOMETRIC, 2), 0.5)
    bev[N_GEOMETRIC:] = np.tensordot(mix, bev[[0, 1]], axes=1)
    bev += rng.spawn(2).normal(bev.shape, cfg.noise)
    return bev.astype(np.float32)


def _bearing_interval(cam_xy, rect):
    corners = box_corners(*rect)
    ang = np.arctan2(corners[:, 1] - cam_xy[1], corners[:, 0] - cam_xy[0])
    ref = ang[0]
    rel = np.array([math.remainder(a - ref, 2 * math.pi) for a in ang])
    return ref + rel.min(), ref + rel.max()


def synthesize_camera(cam, pose, boxes, visible, occluders, cfg, rng, embeddings):
    """Column-stripe camera features of shape (C2, H2, W2)."""
    c2, h2, w2 = cfg.camera_channels, cfg.camera_height, cfg.camera_width
    feat = np.zeros((c2, h2, w2))
    thetas = column_angles(cam, w2)
    cam_pos, _ = camera_axis_in_bev(cam)
    cam_world = pose.to_world(cam_pos[0], cam_pos[1])
    cam_world = (float(cam_world[0]), float(cam_world[1]))
    objects = [(box_footprint(boxes[i]), embeddings[0]) for i in np.flatnonzero(visible)]
    objects += [(r, embeddings[1]) for r in occluders]
    rows = np.arange(h2) - (h2 - 1) / 2
    for m, theta in enumerate(thetas):
        world_theta = theta + pose.yaw
        best = None
        for rect, emb in objects:
            dist = math.hypot(rect[0] - cam_world[0], rect[1] - cam_world[1])
            if dist > cfg.camera_range or (best is not None and dist >= best[0]):
                continue
            lo, hi = _bearing_interval(cam_world, rect)
            rel = math.remainder(world_theta - lo, 2 * math.pi)
            if 0 <= rel <= hi - lo:
                best = (dist, emb)
        if best is None:
            continue
        dist, emb = best
        spread = max(0.5, h2 * 4.0 / max(dist, 1.0))
        profile = np.exp(-rows ** 2 / (2 * spread ** 2))
        feat[:, :, m] += emb[:, None] * profile[None, :] * (10.0 / (10.0 + dist))
    feat += rng.normal(feat.shape, cfg.noise)
    return feat.astype(np.float32)


def _place_boxes(spec, rng, n, agents, occluders):
    (x0, x1), (y0, y1) = spec.x_range, spec.y_range
    gen = rng.generator
    boxes = []
    tries = 0
    while len(boxes) < n and tries < 50 * n:
        tries += 1
        x = gen.uniform(x0 + 3, x1 - 3)
        y = gen.uniform(y0 + 3, y1 - 3)
        if any(math.hypot(x - b.x, y - b.y) < 6.0 for b in boxes):
            continue
        if any(math.hypot(x - p.x, y - p.y) < 6.0 for p in agents):
            continue
        if any(points_in_box(x, y, r[0], r[1], r[2] + 5, r[3] + 5, r[4]) for r in occluders):
            continue
        boxes.append(Detection(x, y, -0.8 + gen.uniform(-0.2, 0.2), gen.uniform(1.4, 1.7),
                               gen.uniform(1.7, 2.0), gen.uniform(3.9, 4.7), gen.uniform(-math.pi, math.pi)))
    return boxes


def _place_agents(rng, n_agents, cfg):
    gen = rng.generator
    poses = [Pose2D(0.0, 0.0, 0.0)]
    sx, sy = cfg.agent_spread
    while len(poses) < n_agents:
        x, y = gen.uniform(-sx, sx), gen.uniform(-sy, sy)
        if all(math.hypot(x - p.x, y - p.y) >= cfg.min_agent_distance for p in poses):
            poses.append(Pose2D(x, y, gen.uniform(-math.pi, math.pi)))
    return poses


def _place_occluders(spec, rng, n, agents):
    gen = rng.generator
    (x0, x1), (y0, y1) = spec.x_range, spec.y_range
    out = []
    while len(out) < n:
        rect = (gen.uniform(0.8 * x0, 0.8 * x1), gen.uniform(0.8 * y0, 0.8 * y1),
                gen.uniform(6, 14), gen.uniform(6, 14), gen.uniform(-math.pi, math.pi))
        if all(math.hypot(rect[0] - p.x, rect[1] - p.y) > 12 for p in agents):
            out.append(rect)
    return out


def build_scene(spec, poses, boxes, occluders, cfg=SceneConfig(), rng=0, cameras=None):
    """Render agent features for an explicit layout (ego must be ``poses[0]``)."""
    rng = rng if isinstance(rng, RngStream) else RngStream(rng)
    embeddings = [e / np.linalg.norm(e) for e in RngStream(SEMANTIC_SEED, (2,)).normal((2, cfg.camera_channels))]
    agents = []
    for k, pose in enumerate(poses):
        vis = visibility((pose.x, pose.y), boxes, occluders, cfg.lidar_range)
        arng = rng.spawn(1, k)
        lidar = synthesize_lidar(spec, pose, boxes, vis, occluders, cfg, arng.spawn(0))
        cams = default_cameras() if cameras is None else cameras
        cvis = visibility((pose.x, pose.y), boxes, occluders, cfg.camera_range)
        feats = [synthesize_camera(cam, pose, boxes, cvis, occluders, cfg, arng.spawn(1, j), embeddings)
                 for j, cam in enumerate(cams)]
        agents.append(AgentView(pose, cams, lidar, feats, vis))
    return Scene(spec, agents, boxes, occluders, rng.seed, {"key": rng.key})


def generate_scene(spec, n_agents, rng_or_seed, cfg=SceneConfig()):
    """Random layout with ``n_agents`` agents (1..5); agent 0 is the ego at the origin."""
    if not 1 <= n_agents <= 5:
        raise ContractViolation(f"n_agents must be in [1, 5], got {n_agents}")
    rng = rng_or_seed if isinstance(rng_or_seed, RngStream) else RngStream(rng_or_seed)
    poses = _place_agents(rng.spawn(0), n_agents, cfg)
    n_occ = int(rng.spawn(1).generator.integers(cfg.n_occluders[0], cfg.n_occluders[1] + 1)) if cfg.occlusion else 0
    occluders = _place_occluders(spec, rng.spawn(2), n_occ, poses)
    n_boxes = int(rng.spawn(3).generator.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))
    boxes = _place_boxes(spec, rng.spawn(4), n_boxes, poses, occluders)
    return build_scene(spec, poses, boxes, occluders, cfg, rng.spawn(5))
