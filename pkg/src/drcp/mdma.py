"""Mask-diffusion-mask-aggregation refinement of a BEV feature map.

The refinement runs once per frame: a channel-wise seed mask conditions a
compact U-Net that denoises a Gaussian-perturbed copy of the input in one
deterministic pass, and a second mask interpolates between the input and the
denoised map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import sinusoidal_embedding
from .tensor import Kernel2D, LinearProjection, concat_channels, conv2d, sigmoid, upsample_bilinear
from .validation import ContractViolation, check_feature_map, check_same_shape


@dataclass
class DiffusionSchedule:
    """Noise schedule with ``alpha_bars[t-1]`` holding the cumulative product at step t."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, np.float64)
        self.alpha_bars = np.asarray(self.alpha_bars, np.float64)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ContractViolation("betas must lie in (0, 1)")
        if len(self.alpha_bars) != len(self.betas):
            raise ContractViolation("alpha_bars and betas lengths differ")

    @property
    def steps(self):
        return len(self.betas)

    def alpha_bar(self, t):
        """Cumulative signal fraction at step t; step 0 is the clean input (1.0)."""
        if not 0 <= t <= self.steps:
            raise ContractViolation(f"timestep {t} outside [0, {self.steps}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_schedule(steps=20, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule and its running product of (1 - beta)."""
    if steps < 1 or not 0 < beta_start <= beta_end < 1:
        raise ContractViolation(f"invalid schedule: T={steps}, beta=[{beta_start}, {beta_end}]")
    if steps == 1:
        betas = np.array([beta_start], np.float64)
    else:
        betas = beta_start + (beta_end - beta_start) * np.arange(steps, dtype=np.float64) / (steps - 1)
    return DiffusionSchedule(betas, np.cumprod(1.0 - betas))


def silu(x):
    x = np.asarray(x, np.float64)
    return (x * sigmoid(x)).astype(np.float32)


@dataclass
class DenoiserParams:
    """Two-level U-Net: widths C -> 2C -> 4C and back, concat skips."""

    enc: Kernel2D
    down1: Kernel2D
    down2: Kernel2D
    time_proj: LinearProjection
    up1: Kernel2D
    up2: Kernel2D
    out: Kernel2D
    steps: int = 20

    @property
    def channels(self):
        return self.out.out_channels

    @classmethod
    def zeros(cls, channels, steps=20, emb_dim=None):
        c = channels
        emb_dim = c if emb_dim is None else emb_dim
        return cls(Kernel2D.zeros(c, 2 * c, 3), Kernel2D.zeros(2 * c, c, 3), Kernel2D.zeros(4 * c, 2 * c, 3),
                   LinearProjection.zeros(4 * c, emb_dim), Kernel2D.zeros(2 * c, 6 * c, 3),
                   Kernel2D.zeros(c, 3 * c, 3), Kernel2D.zeros(c, c, 1), steps)

    @classmethod
    def seeded(cls, channels, rng, steps=20, emb_dim=None):
        c = channels
        emb_dim = c if emb_dim is None else emb_dim
        return cls(Kernel2D.xavier(c, 2 * c, 3, rng), Kernel2D.xavier(2 * c, c, 3, rng),
                   Kernel2D.xavier(4 * c, 2 * c, 3, rng), LinearProjection.xavier(4 * c, emb_dim, rng),
                   Kernel2D.xavier(2 * c, 6 * c, 3, rng), Kernel2D.xavier(c, 3 * c, 3, rng),
                   Kernel2D.xavier(c, c, 1, rng), steps)

    def time_embedding(self, t):
        return sinusoidal_embedding(self.steps + 1, self.time_proj.in_dim)[t]


@dataclass
class MdmaParams:
    mask1: Kernel2D
    mask2: Kernel2D
    denoiser: DenoiserParams

    def __post_init__(self):
        c = self.denoiser.channels
        for name in ("mask1", "mask2"):
            k = getattr(self, name)
            if (k.in_channels, k.out_channels, k.k_h) != (c, c, 1):
                raise ContractViolation(f"{name} must be a 1x1 conv {c} -> {c}")

    @classmethod
    def zeros(cls, channels, steps=20, keep_bias=0.0):
        return cls(Kernel2D.zeros(channels, channels, 1), Kernel2D.zeros(channels, channels, 1, bias=keep_bias),
                   DenoiserParams.zeros(channels, steps))

    @classmethod
    def seeded(cls, channels, rng, steps=20, keep_bias=3.0):
        """Xavier init; ``keep_bias`` on mask 2 keeps most of the original map."""
        mask2 = Kernel2D.xavier(channels, channels, 1, rng)
        mask2.bias[:] = keep_bias
        return cls(Kernel2D.xavier(channels, channels, 1, rng), mask2,
                   DenoiserParams.seeded(channels, rng, steps))

    def to_tensors(self, prefix="mdma"):
        out = {}
        out.update(self.mask1.to_tensors(f"{prefix}.mask1"))
        out.update(self.mask2.to_tensors(f"{prefix}.mask2"))
        d = self.denoiser
        for name in ("enc", "down1", "down2", "up1", "up2", "out"):
            out.update(getattr(d, name).to_tensors(f"{prefix}.unet.{name}"))
        out[f"{prefix}.unet.time_proj.weight"] = d.time_proj.weights
        out[f"{prefix}.unet.time_proj.bias"] = d.time_proj.bias
        out[f"{prefix}.unet.steps"] = np.array([d.steps], np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors, prefix="mdma"):
        k = {name: Kernel2D.from_tensors(tensors, f"{prefix}.unet.{name}")
             for name in ("enc", "down1", "down2", "up1", "up2", "out")}
        tp = LinearProjection(tensors[f"{prefix}.unet.time_proj.weight"], tensors[f"{prefix}.unet.time_proj.bias"])
        steps = int(tensors[f"{prefix}.unet.steps"][0])
        den = DenoiserParams(k["enc"], k["down1"], k["down2"], tp, k["up1"], k["up2"], k["out"], steps)
        return cls(Kernel2D.from_tensors(tensors, f"{prefix}.mask1"),
                   Kernel2D.from_tensors(tensors, f"{prefix}.mask2"), den)


@dataclass
class MdmaOutput:
    final: np.ndarray
    seed: np.ndarray
    perturbed: np.ndarray
    denoised: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def channel_mask(x, kernel):
    return sigmoid(conv2d(x, kernel)).astype(np.float32)


def seed_mask(x, params):
    """Return (seed, w1) with w1 = sigmoid(conv1(x)) and seed = x * w1."""
    x = check_feature_map(x, channels=params.mask1.in_channels)
    w1 = channel_mask(x, params.mask1)
    return (x * w1).astype(np.float32), w1


def perturb(x, alpha_bar, noise):
    """sqrt(a) * x + sqrt(1 - a) * noise."""
    x = np.asarray(x, np.float64)
    return (math.sqrt(alpha_bar) * x + math.sqrt(1.0 - alpha_bar) * np.asarray(noise, np.float64)).astype(np.float32)


def forward_perturb(x, schedule, t, rng):
    """Gaussian corruption of ``x`` to step t (1 <= t <= T) with noise from ``rng``."""
    if not 1 <= t <= schedule.steps:
        raise ContractViolation(f"timestep {t} outside [1, {schedule.steps}]")
    x = check_feature_map(x)
    return perturb(x, schedule.alpha_bar(t), rng.normal(x.shape))


def denoise_once(perturbed, t, seed, params):
    """One deterministic U-Net pass conditioned on the seed (channel concat)."""
    perturbed = check_feature_map(perturbed, "perturbed", channels=params.channels)
    seed = check_feature_map(seed, "seed", channels=params.channels)
    check_same_shape(perturbed, seed, ("perturbed", "seed"))
    _, h, w = perturbed.shape
    if h % 4 or w % 4:
        raise ContractViolation(f"denoiser needs spatial dims divisible by 4, got {(h, w)}")
    x = concat_channels([perturbed, seed])
    e0 = silu(conv2d(x, params.enc, padding=1))
    d1 = silu(conv2d(e0, params.down1, padding=1, stride=2))
    d2 = silu(conv2d(d1, params.down2, padding=1, stride=2))
    d2 = d2 + params.time_proj(params.time_embedding(t)).astype(np.float32)[:, None, None]
    u1 = upsample_bilinear(d2, d1.shape[1], d1.shape[2])
    u1 = silu(conv2d(concat_channels([u1, d1]), params.up1, padding=1))
    u2 = upsample_bilinear(u1, e0.shape[1], e0.shape[2])
    u2 = silu(conv2d(concat_channels([u2, e0]), params.up2, padding=1))
    return conv2d(u2, params.out)


def residual_fuse(x, denoised, w2, form="interpolate"):
    """Combine input and denoised maps under mask w2.

    ``interpolate``: x * w2 + denoised * (1 - w2)
    ``residual``:    x + (denoised - x) * (1 - w2)
    """
    x = np.asarray(x, np.float64)
    d = np.asarray(denoised, np.float64)
    w2 = np.asarray(w2, np.float64)
    if form == "interpolate":
        out = x * w2 + d * (1.0 - w2)
    elif form == "residual":
        out = x + (d - x) * (1.0 - w2)
    else:
        raise ValueError(f"unknown form {form!r}")
    return out.astype(np.float32)


def mdma_refine(x, params, schedule, rng, t=None, candidates=1):
    """Full seed -> perturb -> denoise -> fuse pass.

    ``t`` defaults to T // 2. With ``candidates > 1`` the denoised maps of
    independent noise draws are averaged before fusion.
    """
    x = check_feature_map(x, channels=params.denoiser.channels)
    t = schedule.steps // 2 if t is None else t
    seed, w1 = seed_mask(x, params)
    denoised_sum = np.zeros(x.shape, np.float64)
    first = None
    for k in range(candidates):
        perturbed = forward_perturb(x, schedule, t, rng)
        first = perturbed if first is None else first
        denoised_sum += denoise_once(perturbed, t, seed, params.denoiser)
    denoised = (denoised_sum / candidates).astype(np.float32)
    w2 = channel_mask(x, params.mask2)
    final = residual_fuse(x, denoised, w2)
    return MdmaOutput(final, seed, first, denoised, w1, w2)
