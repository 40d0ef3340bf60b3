"""Anchor-based detection heads, box coding, rotated NMS and the training losses.

Boxes are (x, y, z, h, w, l, theta) in metres/radians; ``l`` runs along the
heading. Residuals follow the usual anchor-relative coding:

    dx = (x - xa) / d, dy = (y - ya) / d, dz = (z - za) / ha,
    dh = log(h / ha), dw = log(w / wa), dl = log(l / la), dtheta = theta - theta_a

with d the anchor's footprint diagonal. ``dtheta`` is wrapped to [-pi/2, pi/2)
and the 2-bin direction head says whether pi must be added back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pyramid import box_corners
from .tensor import Kernel2D, conv2d, sigmoid, softmax
from .validation import ContractViolation, check_feature_map


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int = 256
    n_anchor: int = 6

    @property
    def head_channels(self):
        return {"cls": self.n_anchor, "reg": 7 * self.n_anchor, "dir": 2 * self.n_anchor, "occ": 1}


@dataclass
class HeadParams:
    cls: Kernel2D
    reg: Kernel2D
    dir: Kernel2D
    occ: Kernel2D

    @classmethod
    def zeros(cls, cfg):
        ch = cfg.head_channels
        return cls(*(Kernel2D.zeros(ch[k], cfg.in_channels, 1) for k in ("cls", "reg", "dir", "occ")))

    @classmethod
    def seeded(cls, cfg, rng, gain=0.1):
        ch = cfg.head_channels
        return cls(*(Kernel2D.xavier(ch[k], cfg.in_channels, 1, rng, gain=gain)
                     for k in ("cls", "reg", "dir", "occ")))

    def items(self):
        return (("cls", self.cls), ("reg", self.reg), ("dir", self.dir), ("occ", self.occ))


@dataclass
class Detection:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float
    score: float = 1.0
    direction_bin: int = 0

    def __post_init__(self):
        if min(self.h, self.w, self.l) <= 0:
            raise ContractViolation("box dims must be positive")

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.theta])

    @property
    def footprint(self):
        return (self.x, self.y, self.l, self.w, self.theta)


@dataclass(frozen=True)
class LossWeights:
    reg: float = 2.0
    cls: float = 1.0
    dir: float = 0.4
    occ: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0
    sigma: float = 3.0


@dataclass(frozen=True)
class AnchorConfig:
    """One anchor size repeated over ``n_anchor`` yaw bins in [0, pi)."""

    length: float = 4.5
    width: float = 2.0
    height: float = 1.6
    z: float = -0.8
    n_anchor: int = 6

    @property
    def yaws(self):
        return np.arange(self.n_anchor) * math.pi / self.n_anchor


def make_anchors(spec, cfg=AnchorConfig()):
    """Anchor boxes at every cell centre, shape (H, W, A, 7)."""
    x, y = spec.cell_centers()
    h, w = spec.shape
    a = cfg.n_anchor
    anchors = np.zeros((h, w, a, 7))
    anchors[..., 0] = x[..., None]
    anchors[..., 1] = y[..., None]
    anchors[..., 2] = cfg.z
    anchors[..., 3] = cfg.height
    anchors[..., 4] = cfg.width
    anchors[..., 5] = cfg.length
    anchors[..., 6] = cfg.yaws
    return anchors


def _half_turn_wrap(d):
    """Wrap to [-pi/2, pi/2) and report whether a half turn was removed."""
    full = (np.asarray(d, np.float64) + math.pi) % (2 * math.pi) - math.pi
    flipped = (full >= math.pi / 2) | (full < -math.pi / 2)
    wrapped = np.where(flipped, (full + math.pi / 2) % math.pi - math.pi / 2, full)
    return wrapped, flipped.astype(np.int64)


def encode_boxes(boxes, anchors):
    """Residuals (..., 7) and direction bins of ``boxes`` relative to ``anchors``."""
    b = np.asarray(boxes, np.float64)
    a = np.asarray(anchors, np.float64)
    diag = np.hypot(a[..., 4], a[..., 5])
    dtheta, dirbin = _half_turn_wrap(b[..., 6] - a[..., 6])
    res = np.stack([(b[..., 0] - a[..., 0]) / diag, (b[..., 1] - a[..., 1]) / diag,
                    (b[..., 2] - a[..., 2]) / a[..., 3], np.log(b[..., 3] / a[..., 3]),
                    np.log(b[..., 4] / a[..., 4]), np.log(b[..., 5] / a[..., 5]), dtheta], axis=-1)
    return res, dirbin


def decode_boxes(residuals, anchors, dirbin=None):
    r = np.asarray(residuals, np.float64)
    a = np.asarray(anchors, np.float64)
    diag = np.hypot(a[..., 4], a[..., 5])
    theta = a[..., 6] + r[..., 6]
    if dirbin is not None:
        theta = theta + math.pi * np.asarray(dirbin)
    theta = (theta + math.pi) % (2 * math.pi) - math.pi
    return np.stack([a[..., 0] + r[..., 0] * diag, a[..., 1] + r[..., 1] * diag,
                     a[..., 2] + r[..., 2] * a[..., 3], a[..., 3] * np.exp(r[..., 3]),
                     a[..., 4] * np.exp(r[..., 4]), a[..., 5] * np.exp(r[..., 5]), theta], axis=-1)


def run_heads(bev, params):
    """Four 1x1 conv heads: cls (A), reg (7A), dir (2A), occ (1) raw maps."""
    bev = check_feature_map(bev, channels=params.cls.in_channels)
    return {name: conv2d(bev, k) for name, k in params.items()}


# --- losses ---------------------------------------------------------------


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid_focal_loss(logits, labels, alpha=0.25, gamma=2.0, weights=None, normalizer=None):
    """Sigmoid focal loss and its gradient with respect to ``logits``.

    The summed loss is divided by ``normalizer`` (default: max(1, #positives
    with non-zero weight)).
    """
    x = np.asarray(logits, np.float64)
    y = np.asarray(labels, np.float64)
    wt = np.ones_like(x) if weights is None else np.asarray(weights, np.float64)
    if x.shape != y.shape or wt.shape != x.shape:
        raise ContractViolation("focal loss: logits, labels and weights must share a shape")
    p = sigmoid(x)
    logp = _log_sigmoid(x)
    log1mp = _log_sigmoid(-x)
    if normalizer is None:
        normalizer = max(1.0, float(((y == 1) & (wt > 0)).sum()))
    pos = -alpha * (1 - p) ** gamma * logp
    neg = -(1 - alpha) * p ** gamma * log1mp
    loss = np.where(y == 1, pos, neg)
    # d/dx of the positive and negative branches
    gpos = alpha * (1 - p) ** gamma * (gamma * p * logp - (1 - p))
    gneg = (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log1mp)
    grad = np.where(y == 1, gpos, gneg)
    return float((wt * loss).sum() / normalizer), wt * grad / normalizer


def smooth_l1(d, sigma=3.0):
    d = np.asarray(d, np.float64)
    s2 = sigma * sigma
    ad = np.abs(d)
    return np.where(ad < 1.0 / s2, 0.5 * s2 * d * d, ad - 0.5 / s2)


def weighted_smooth_l1(pred, target, sigma=3.0, weights=None):
    """Sum of weighted smooth-L1 terms and the gradient with respect to ``pred``."""
    d = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    wt = np.ones_like(d) if weights is None else np.broadcast_to(np.asarray(weights, np.float64), d.shape)
    s2 = sigma * sigma
    grad = np.where(np.abs(d) < 1.0 / s2, s2 * d, np.sign(d))
    return float((wt * smooth_l1(d, sigma)).sum()), wt * grad


def direction_ce_loss(logits, labels, weights=None):
    """Weighted mean 2-bin softmax cross-entropy; ``logits`` is (..., 2)."""
    x = np.asarray(logits, np.float64)
    y = np.asarray(labels, np.int64)
    if x.shape[-1] != 2 or x.shape[:-1] != y.shape:
        raise ContractViolation("direction loss expects logits (..., 2) and labels (...)")
    wt = np.ones(y.shape) if weights is None else np.asarray(weights, np.float64)
    total = wt.sum()
    if total <= 0:
        return 0.0, np.zeros_like(x)
    logz = np.logaddexp(x[..., 0], x[..., 1])
    picked = np.take_along_axis(x, y[..., None], axis=-1)[..., 0]
    ce = logz - picked
    onehot = np.eye(2)[y]
    grad = (softmax(x, axis=-1) - onehot) * (wt / total)[..., None]
    return float((wt * ce).sum() / total), grad


def total_loss(components, weights=LossWeights()):
    """lambda-weighted sum of the reg, cls, dir and occ component losses."""
    return (weights.reg * components["reg"] + weights.cls * components["cls"]
            + weights.dir * components["dir"] + weights.occ * components["occ"])


# --- targets --------------------------------------------------------------


@dataclass
class DetectionTargets:
    cls_labels: np.ndarray      # (H, W, A) in {0, 1}
    cls_weights: np.ndarray     # (H, W, A); 0 marks ignored anchors
    reg_targets: np.ndarray     # (H, W, A, 7)
    reg_weights: np.ndarray     # (H, W, A)
    dir_labels: np.ndarray      # (H, W, A)
    occ_labels: np.ndarray      # (H, W)
    n_pos: int = field(default=0)


def assign_targets(gt_boxes, anchors, spec, occ_labels=None, ignore_radius=1):
    """Nearest-yaw anchor at each ground-truth centre cell is the positive.

    Anchors within ``ignore_radius`` cells of a centre are ignored for the
    classification loss; everything else is negative.
    """
    h, w, a, _ = anchors.shape
    cls = np.zeros((h, w, a))
    cls_w = np.ones((h, w, a))
    reg_t = np.zeros((h, w, a, 7))
    reg_w = np.zeros((h, w, a))
    dirl = np.zeros((h, w, a), np.int64)
    positives = []
    for b in gt_boxes:
        col, row = spec.metric_to_cell(b.x, b.y)
        c, r = int(round(float(col))), int(round(float(row)))
        if not (0 <= r < h and 0 <= c < w):
            continue
        cls_w[max(0, r - ignore_radius):r + ignore_radius + 1, max(0, c - ignore_radius):c + ignore_radius + 1] = 0
        yaw_err = np.abs(_half_turn_wrap(b.theta - anchors[r, c, :, 6])[0])
        positives.append((r, c, int(np.argmin(yaw_err)), b))
    for r, c, k, b in positives:
        res, d = encode_boxes(b.as_array(), anchors[r, c, k])
        cls[r, c, k] = 1
        cls_w[r, c, k] = 1
        reg_t[r, c, k] = res
        reg_w[r, c, k] = 1
        dirl[r, c, k] = d
    if occ_labels is None:
        occ_labels = np.zeros((h, w))
    return DetectionTargets(cls, cls_w, reg_t, reg_w, dirl, np.asarray(occ_labels, np.float64),
                            int(reg_w.sum()))


def detection_loss(outputs, targets, weights=LossWeights()):
    """Total loss, per-component losses and gradients w.r.t. the raw head maps."""
    a = outputs["cls"].shape[0]
    cls_logits = np.moveaxis(outputs["cls"], 0, -1)
    h, w = cls_logits.shape[:2]
    reg = np.moveaxis(outputs["reg"], 0, -1).reshape(h, w, a, 7)
    dirl = np.moveaxis(outputs["dir"], 0, -1).reshape(h, w, a, 2)
    norm = max(1.0, float(targets.n_pos))
    l_cls, g_cls = sigmoid_focal_loss(cls_logits, targets.cls_labels, weights.alpha, weights.gamma,
                                      targets.cls_weights, normalizer=norm)
    l_reg, g_reg = weighted_smooth_l1(reg, targets.reg_targets, weights.sigma,
                                      targets.reg_weights[..., None] / norm)
    l_dir, g_dir = direction_ce_loss(dirl, targets.dir_labels, targets.reg_weights)
    l_occ, g_occ = sigmoid_focal_loss(outputs["occ"][0], targets.occ_labels, weights.alpha, weights.gamma)
    comps = {"reg": l_reg, "cls": l_cls, "dir": l_dir, "occ": l_occ}
    grads = {
        "cls": np.moveaxis(g_cls, -1, 0) * weights.cls,
        "reg": np.moveaxis(g_reg.reshape(h, w, 7 * a), -1, 0) * weights.reg,
        "dir": np.moveaxis(g_dir.reshape(h, w, 2 * a), -1, 0) * weights.dir,
        "occ": g_occ[None] * weights.occ,
    }
    return total_loss(comps, weights), comps, grads


# --- rotated IoU and NMS --------------------------------------------------


def _clip(subject, a, b):
    """Keep the part of polygon ``subject`` left of the directed edge a -> b."""
    out = []
    n = len(subject)
    if n == 0:
        return out

    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_iou(a, b):
    """Rotated-rectangle IoU of two (x, y, l, w, theta) footprints."""
    if math.hypot(a[0] - b[0], a[1] - b[1]) > 0.5 * (math.hypot(a[2], a[3]) + math.hypot(b[2], b[3])):
        return 0.0
    pa = [tuple(p) for p in box_corners(*a)]
    pb = [tuple(p) for p in box_corners(*b)]
    inter = pa
    for i in range(4):
        inter = _clip(inter, pb[i], pb[(i + 1) % 4])
        if not inter:
            return 0.0
    ia = polygon_area(inter)
    union = a[2] * a[3] + b[2] * b[3] - ia
    return ia / union if union > 0 else 0.0


def nms(footprints, scores, iou_thresh):
    """Greedy NMS in descending score order; returns kept indices."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    for i in order:
        if all(bev_iou(footprints[i], footprints[j]) <= iou_thresh for j in keep):
            keep.append(int(i))
    return keep


def decode_and_nms(outputs, anchors, score_thresh=0.2, iou_thresh=0.15, max_candidates=300):
    """Turn raw head maps into scored, direction-resolved, suppressed detections."""
    a = anchors.shape[2]
    h, w = anchors.shape[:2]
    scores = sigmoid(np.moveaxis(outputs["cls"], 0, -1)).reshape(-1)
    cand = np.flatnonzero(scores > score_thresh)
    if cand.size == 0:
        return []
    if cand.size > max_candidates:
        cand = cand[np.argsort(-scores[cand], kind="stable")[:max_candidates]]
    reg = np.moveaxis(outputs["reg"], 0, -1).reshape(h * w * a, 7)[cand]
    dirl = np.moveaxis(outputs["dir"], 0, -1).reshape(h * w * a, 2)[cand]
    dirbin = np.argmax(dirl, axis=-1)
    boxes = decode_boxes(reg, anchors.reshape(-1, 7)[cand], dirbin)
    footprints = [(b[0], b[1], b[5], b[4], b[6]) for b in boxes]
    keep = nms(footprints, scores[cand], iou_thresh)
    return [Detection(*boxes[i], score=float(scores[cand][i]), direction_bin=int(dirbin[i])) for i in keep]
