"""Adam micro-fit of the 1x1 occupancy and detection heads on frozen features.

Only the heads are fitted; every other stage keeps its desk initialisation.
All heads are 1x1 convolutions, so each cell is one training row and the
gradient of a head is ``grad_map @ features^T``. Negative cells are
subsampled and reweighted by the inverse keep fraction.
"""
from __future__ import annotations

import math

import numpy as np

from ..detect import (AnchorConfig, Detection, LossWeights, assign_targets, direction_ce_loss, make_anchors,
                      sigmoid_focal_loss, total_loss, weighted_smooth_l1)
from ..pyramid import N_SCALES, occupancy_labels_from_boxes
from ..tensor import Kernel2D, RngStream

PRIOR_PROB = 0.01


class Adam:
    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _local_boxes(boxes, pose):
    """Boxes re-expressed in an agent's frame (only x, y, theta change)."""
    out = []
    for b in boxes:
        x, y = pose.from_world(b.x, b.y)
        out.append(Detection(float(x), float(y), b.z, b.h, b.w, b.l, b.theta - pose.yaw))
    return out


def _select_cells(positive, frac, rng):
    """Indices of all positive cells plus a random ``frac`` of the rest, with weights."""
    pos = np.flatnonzero(positive)
    neg = np.flatnonzero(~positive)
    n_keep = min(neg.size, max(1, int(math.ceil(frac * neg.size))))
    keep = rng.generator.choice(neg, n_keep, replace=False) if neg.size else neg
    idx = np.concatenate([pos, np.sort(keep)])
    w = np.ones(idx.size)
    w[pos.size:] = neg.size / max(n_keep, 1)
    return idx, w


def fit_occupancy_heads(samples, spec, n_iter=200, lr=0.01, neg_fraction=0.1, seed=0,
                        weights=LossWeights()):
    """Fit one logistic 1x1 head per pyramid scale.

    ``samples`` is a list of (message, visible_boxes) pairs, the boxes in
    world coordinates. Returns a list of three :class:`Kernel2D`.
    """
    rng = RngStream(seed, (7,))
    heads = []
    for s in range(N_SCALES):
        rows, labels, wts = [], [], []
        for i, (msg, boxes) in enumerate(samples):
            feat = msg.levels[s]
            lab = occupancy_labels_from_boxes(_local_boxes(boxes, msg.pose), spec, scale=s + 1).ravel() > 0
            idx, w = _select_cells(lab, neg_fraction, rng.spawn(s, i))
            rows.append(feat.reshape(feat.shape[0], -1)[:, idx].T)
            labels.append(lab[idx])
            wts.append(w)
        X = np.concatenate(rows).astype(np.float64)
        y = np.concatenate(labels).astype(np.float64)
        w = np.concatenate(wts)
        heads.append(_fit_logistic(X, y, w, n_iter, lr, weights))
    return heads


def _fit_logistic(X, y, w, n_iter, lr, weights):
    c = X.shape[1]
    W = np.zeros(c)
    b = np.array([-math.log((1 - PRIOR_PROB) / PRIOR_PROB)])
    opt = Adam([W, b], lr)
    norm = max(1.0, float(y.sum()))
    for _ in range(n_iter):
        logits = X @ W + b[0]
        _, g = sigmoid_focal_loss(logits, y, weights.alpha, weights.gamma, w, normalizer=norm)
        opt.step([X.T @ g, np.array([g.sum()])])
    return Kernel2D(W.reshape(1, c, 1, 1), b)


def fit_detection_heads(frames, spec, heads, anchor_cfg=AnchorConfig(), n_iter=300, lr=0.01,
                        neg_fraction=0.05, seed=0, weights=LossWeights(), near_radius=2):
    """Fit cls/reg/dir/occ heads in place on (final_bev, ground_truth) frames.

    Cells within ``near_radius`` of a ground-truth centre or inside a box are
    always kept; a ``neg_fraction`` of the others is sampled. The loss equals
    :func:`detection_loss` on the kept cells, except that the occupancy term
    also carries the negative reweighting. Returns the loss history.
    """
    anchors = make_anchors(spec, anchor_cfg)
    h, w = spec.shape
    a = anchors.shape[2]
    rng = RngStream(seed, (8,))
    rows, parts = [], []
    for i, (bev, gts) in enumerate(frames):
        occ = occupancy_labels_from_boxes(gts, spec)
        t = assign_targets(gts, anchors, spec, occ)
        near = occ > 0
        for b in gts:
            col, row = spec.metric_to_cell(b.x, b.y)
            c, r = int(round(float(col))), int(round(float(row)))
            near[max(0, r - near_radius):r + near_radius + 1, max(0, c - near_radius):c + near_radius + 1] = True
        idx, wt = _select_cells(near.ravel(), neg_fraction, rng.spawn(i))
        rows.append(bev.reshape(bev.shape[0], -1)[:, idx].T)
        parts.append((t.cls_labels.reshape(-1, a)[idx], t.cls_weights.reshape(-1, a)[idx] * wt[:, None],
                      t.reg_targets.reshape(-1, a, 7)[idx], t.reg_weights.reshape(-1, a)[idx],
                      t.dir_labels.reshape(-1, a)[idx], t.occ_labels.reshape(-1)[idx], wt))
    X = np.concatenate(rows).astype(np.float64)
    cls_y, cls_w, reg_t, reg_w, dir_y, occ_y, row_w = (np.concatenate(c) for c in zip(*parts))
    # regression and direction terms only see rows holding a positive anchor
    has_pos = reg_w.sum(axis=1) > 0
    Xp, reg_t, reg_w, dir_y = X[has_pos], reg_t[has_pos], reg_w[has_pos], dir_y[has_pos]
    norm = max(1.0, float(reg_w.sum()))
    names = ("cls", "reg", "dir", "occ")
    kernels = dict(heads.items())
    Ws = [kernels[n].weights[:, :, 0, 0].astype(np.float64) for n in names]
    bs = [kernels[n].bias.astype(np.float64) for n in names]
    prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    bs[0][:] = prior
    bs[3][:] = prior
    opt = Adam(Ws + bs, lr)
    history = []
    for _ in range(n_iter):
        cls_out = X @ Ws[0].T + bs[0]
        reg_out = (Xp @ Ws[1].T + bs[1]).reshape(-1, a, 7)
        dir_out = (Xp @ Ws[2].T + bs[2]).reshape(-1, a, 2)
        occ_out = X @ Ws[3][0] + bs[3][0]
        l_cls, g_cls = sigmoid_focal_loss(cls_out, cls_y, weights.alpha, weights.gamma, cls_w, normalizer=norm)
        l_reg, g_reg = weighted_smooth_l1(reg_out, reg_t, weights.sigma, reg_w[..., None] / norm)
        l_dir, g_dir = direction_ce_loss(dir_out, dir_y, reg_w)
        l_occ, g_occ = sigmoid_focal_loss(occ_out, occ_y, weights.alpha, weights.gamma, row_w)
        history.append(total_loss({"reg": l_reg, "cls": l_cls, "dir": l_dir, "occ": l_occ}, weights))
        g = [weights.cls * g_cls, weights.reg * g_reg.reshape(len(Xp), -1),
             weights.dir * g_dir.reshape(len(Xp), -1), weights.occ * g_occ[:, None]]
        inputs = (X, Xp, Xp, X)
        opt.step([gi.T @ xi for gi, xi in zip(g, inputs)] + [gi.sum(axis=0) for gi in g])
    for n, Wm, b in zip(names, Ws, bs):
        k = kernels[n]
        k.weights[:] = Wm[:, :, None, None]
        k.bias[:] = b
    return history
