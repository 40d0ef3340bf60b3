"""scikit-learn style facades over the functional kernels.

The kernels in :mod:`drcp.adaptive`, :mod:`drcp.mdma` and the simulation
modules stay pure functions of explicit parameters; these classes only hold
the parameters, seed them in ``fit`` and expose ``transform``/``predict``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .adaptive import AdaptiveConvParams, adaptive_conv
from .config import PipelineConfig
from .detect import LossWeights
from .mdma import MdmaParams, make_schedule, mdma_refine
from .pyramid import occupancy_head
from .sim.channel import FeatureCompressor
from .sim.metrics import average_precision
from .sim.pipeline import PipelineParams, encode_scene, frame_features, run_frame
from .sim.training import _fit_logistic, _select_cells, fit_detection_heads, fit_occupancy_heads
from .tensor import RngStream
from .validation import ContractViolation, check_feature_batch

__all__ = ["FeatureCompressor", "AdaptiveConvolution", "MDMARefiner", "OccupancyScorer", "DRCPDetector"]

TRAIN_FRAME_OFFSET = 1_000_000


def _batch(X):
    X = np.asarray(X)
    single = X.ndim == 3
    return check_feature_batch(X), single


class AdaptiveConvolution(TransformerMixin, BaseEstimator):
    """Per-pixel blend of 3x3/5x5/7x7 branches with identity-centred seeding."""

    def __init__(self, noise=0.05, random_state=0):
        self.noise = noise
        self.random_state = random_state

    def fit(self, X, y=None):
        X, _ = _batch(X)
        self.params_ = AdaptiveConvParams.seeded(X.shape[1], RngStream(self.random_state), self.noise)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X, single = _batch(X)
        out = np.stack([adaptive_conv(x, self.params_) for x in X])
        return out[0] if single else out


class MDMARefiner(TransformerMixin, BaseEstimator):
    """Seed mask, one-step denoise and masked residual fusion.

    Each map of a batch gets its own noise stream derived from
    ``noise_seed`` and the map's index, so results do not depend on batching.
    """

    def __init__(self, t=None, steps=20, beta_start=1e-4, beta_end=0.02, candidates=1, keep_bias=3.0,
                 random_state=0, noise_seed=0):
        self.t = t
        self.steps = steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.candidates = candidates
        self.keep_bias = keep_bias
        self.random_state = random_state
        self.noise_seed = noise_seed

    def fit(self, X, y=None):
        X, _ = _batch(X)
        self.schedule_ = make_schedule(self.steps, self.beta_start, self.beta_end)
        self.params_ = MdmaParams.seeded(X.shape[1], RngStream(self.random_state), self.steps, self.keep_bias)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X, single = _batch(X)
        out = np.stack([mdma_refine(x, self.params_, self.schedule_, RngStream(self.noise_seed, (i,)),
                                    self.t, self.candidates).final for i, x in enumerate(X)])
        return out[0] if single else out


class OccupancyScorer(BaseEstimator):
    """Logistic 1x1 occupancy head fitted with focal loss.

    ``fit(X, y)`` takes feature maps (N, C, H, W) and binary label maps
    (N, H, W); ``predict_proba`` returns (N, H, W) scores in [0, 1].
    """

    def __init__(self, n_iter=200, learning_rate=0.01, neg_fraction=0.1, random_state=0):
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.neg_fraction = neg_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, _ = _batch(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],) + X.shape[2:]:
            raise ContractViolation(f"labels {y.shape} do not match features {X.shape}")
        if not np.isin(y, (0, 1)).all():
            raise ContractViolation("occupancy labels must be 0/1")
        rows, labels, wts = [], [], []
        rng = RngStream(self.random_state, (7,))
        for i, (x, lab) in enumerate(zip(X, y)):
            lab = lab.ravel() > 0
            idx, w = _select_cells(lab, self.neg_fraction, rng.spawn(i))
            rows.append(x.reshape(x.shape[0], -1)[:, idx].T)
            labels.append(lab[idx])
            wts.append(w)
        self.head_ = _fit_logistic(np.concatenate(rows).astype(np.float64), np.concatenate(labels).astype(float),
                                   np.concatenate(wts), self.n_iter, self.learning_rate, LossWeights())
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        X, single = _batch(X)
        out = np.stack([occupancy_head(x, self.head_) for x in X])
        return out[0] if single else out

    def predict(self, X):
        return (self.predict_proba(X) > 0.5).astype(np.uint8)


class DRCPDetector(BaseEstimator):
    """Full cooperative pipeline with heads fitted on synthetic scenes.

    ``fit`` seeds every fusion stage at its desk initialisation, then fits
    the per-scale occupancy heads and the detection heads by Adam on the
    loss suite. ``predict`` returns one detection list per scene and
    ``score`` the AP at IoU 0.3 against each scene's default ground truth.
    """

    def __init__(self, config=None, n_iter=300, learning_rate=0.01, occ_iter=200, neg_fraction=0.05,
                 use_mdma=None):
        self.config = config
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.occ_iter = occ_iter
        self.neg_fraction = neg_fraction
        self.use_mdma = use_mdma

    @property
    def config_(self):
        cfg = PipelineConfig() if self.config is None else self.config
        return cfg if self.use_mdma is None else cfg.replace(use_mdma=self.use_mdma)

    def fit(self, scenes, y=None):
        if not scenes:
            raise ContractViolation("fit needs at least one scene")
        cfg = self.config_
        params = PipelineParams.seeded(cfg)
        spec = scenes[0].spec
        samples = []
        messages = []
        for sc in scenes:
            msgs = encode_scene(sc, params)
            messages.append(msgs)
            for k, m in enumerate(msgs):
                samples.append((m, [sc.boxes[i] for i in np.flatnonzero(sc.agents[k].visible)]))
        params.occ_heads = fit_occupancy_heads(samples, spec, self.occ_iter, self.learning_rate,
                                               seed=cfg.param_seed)
        frames = []
        for i, (sc, msgs) in enumerate(zip(scenes, messages)):
            # features are unchanged; only the occupancy maps need the fitted heads
            for m in msgs:
                m.occs = [occupancy_head(lv, h) for lv, h in zip(m.levels, params.occ_heads)]
            final = frame_features(sc, params, cfg, frame_id=TRAIN_FRAME_OFFSET + i, messages=msgs)[0]
            frames.append((final, sc.ground_truth()))
        self.loss_history_ = fit_detection_heads(frames, spec, params.heads, params.anchors, self.n_iter,
                                                 self.learning_rate, self.neg_fraction, cfg.param_seed)
        self.params_ = params
        return self

    def predict(self, scenes, channel=None, agent_ids=None):
        check_is_fitted(self, "params_")
        return [run_frame(sc, self.params_, self.config_, channel, agent_ids=agent_ids, frame_id=i).detections
                for i, sc in enumerate(scenes)]

    def score(self, scenes, y=None):
        dets = self.predict(scenes)
        return average_precision([(d, sc.ground_truth()) for d, sc in zip(dets, scenes)], 0.3)
