"""Simulated V2X link: pose noise and a linear feature bottleneck.

Compression projects each cell's channel vector onto ``ceil(C / ratio)``
orthonormal directions and back. The basis is either a seeded random
orthonormal frame or the leading eigenvectors of the uncentred channel
second-moment matrix of training features (the optimal linear autoencoder).
Payload is accounted as ``C * H * W * 4 / ratio`` bytes per shared tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..config import ALLOWED_RATIOS
from ..geometry import Pose2D
from ..tensor import RngStream
from ..validation import ContractViolation, check_feature_batch


@dataclass(frozen=True)
class ChannelConfig:
    pose_noise_sigma_xy: float = 0.0
    pose_noise_sigma_yaw: float = 0.0
    compression_ratio: int = 1
    basis: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.compression_ratio not in ALLOWED_RATIOS:
            raise ContractViolation(f"compression_ratio must be one of {ALLOWED_RATIOS}")
        if self.pose_noise_sigma_xy < 0 or self.pose_noise_sigma_yaw < 0:
            raise ContractViolation("noise sigmas must be non-negative")

    @property
    def is_identity(self):
        return self.compression_ratio == 1 and self.pose_noise_sigma_xy == 0 and self.pose_noise_sigma_yaw == 0


def payload_bytes(shape, ratio=1):
    """Bytes to ship a float32 tensor of ``shape`` at the given compression ratio."""
    return int(np.prod(shape)) * 4 / ratio


class FeatureCompressor(TransformerMixin, BaseEstimator):
    """Per-cell channel bottleneck with an orthonormal basis.

    Parameters
    ----------
    ratio : int
        Nominal compression ratio; ``ceil(C / ratio)`` channels are kept.
    basis : {"random", "pca"}
        Seeded random orthonormal frame, or the leading eigenvectors of the
        uncentred channel second moment of the data passed to ``fit``.
    random_state : int
        Seed of the random basis.
    """

    def __init__(self, ratio=1, basis="random", random_state=0):
        self.ratio = ratio
        self.basis = basis
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.ratio not in ALLOWED_RATIOS:
            raise ContractViolation(f"ratio must be one of {ALLOWED_RATIOS}")
        X = check_feature_batch(X)
        c = X.shape[1]
        k = max(1, math.ceil(c / self.ratio))
        if self.basis == "random":
            g = RngStream(self.random_state, (c,)).generator.standard_normal((c, c))
            q, r = np.linalg.qr(g)
            q = q * np.sign(np.diag(r))
            comps = q[:, :k].T
        elif self.basis == "pca":
            flat = X.transpose(1, 0, 2, 3).reshape(c, -1).astype(np.float64)
            vals, vecs = np.linalg.eigh(flat @ flat.T)
            comps = vecs[:, np.argsort(vals)[::-1][:k]].T
        else:
            raise ContractViolation(f"unknown basis {self.basis!r}")
        self.components_ = comps
        self.n_features_in_ = c
        self.n_components_ = k
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_feature_batch(X)
        if X.shape[1] != self.n_features_in_:
            raise ContractViolation(f"expected {self.n_features_in_} channels, got {X.shape[1]}")
        return np.einsum("kc,nchw->nkhw", self.components_, X.astype(np.float64)).astype(np.float32)

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        Z = np.asarray(Z, np.float64)
        return np.einsum("kc,nkhw->nchw", self.components_, Z).astype(np.float32)

    def roundtrip(self, x):
        """Compress and restore one (C, H, W) map; ratio 1 is an exact pass-through."""
        if self.ratio == 1:
            return np.asarray(x, np.float32)
        return self.inverse_transform(self.transform(x))[0]


def noisy_pose(pose, cfg, rng):
    """Pose plus Gaussian noise; draws do not depend on the sigmas."""
    z = rng.generator.standard_normal(3)
    return Pose2D(pose.x + cfg.pose_noise_sigma_xy * z[0], pose.y + cfg.pose_noise_sigma_xy * z[1],
                  pose.yaw + cfg.pose_noise_sigma_yaw * z[2])


def apply_channel(features, occs, pose, cfg, rng, compressors=None):
    """Send one agent's per-scale features, occupancy maps and pose over the link.

    ``compressors`` maps scale index to a fitted :class:`FeatureCompressor`;
    missing random-basis entries are created (and cached) on first use, while
    a PCA basis must be fitted beforehand. Returns (features', occs', pose',
    payload) where payload lists the bytes accounted per feature tensor.
    """
    compressors = {} if compressors is None else compressors
    out = []
    payload = []
    for s, f in enumerate(features):
        f = np.asarray(f, np.float32)
        payload.append(payload_bytes(f.shape, cfg.compression_ratio))
        if cfg.compression_ratio == 1:
            out.append(f)
            continue
        comp = compressors.get(s)
        if comp is None:
            if cfg.basis != "random":
                raise ContractViolation(f"no fitted {cfg.basis} compressor for scale {s}")
            comp = FeatureCompressor(cfg.compression_ratio, "random", cfg.seed).fit(f[None])
            compressors[s] = comp
        if comp.ratio != cfg.compression_ratio or comp.n_features_in_ != f.shape[0]:
            raise ContractViolation(f"compressor for scale {s} does not match ratio/channels")
        out.append(comp.roundtrip(f))
    new_pose = pose if cfg.pose_noise_sigma_xy == 0 and cfg.pose_noise_sigma_yaw == 0 else noisy_pose(pose, cfg, rng)
    return out, [np.asarray(o, np.float32) for o in occs], new_pose, payload
