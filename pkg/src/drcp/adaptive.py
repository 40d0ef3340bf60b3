"""Per-pixel softmax blend of 3x3, 5x5 and 7x7 convolution branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Kernel2D, conv2d, softmax
from .validation import ContractViolation, check_feature_map

KERNEL_SIZES = (3, 5, 7)


@dataclass
class AdaptiveConvParams:
    conv3: Kernel2D
    conv5: Kernel2D
    conv7: Kernel2D
    weight_gen: Kernel2D

    def __post_init__(self):
        branches = (self.conv3, self.conv5, self.conv7)
        for kern, k in zip(branches, KERNEL_SIZES):
            if (kern.k_h, kern.k_w) != (k, k):
                raise ContractViolation(f"branch expected {k}x{k}, got {kern.k_h}x{kern.k_w}")
        if len({(b.in_channels, b.out_channels) for b in branches}) != 1:
            raise ContractViolation("branch convolutions must share in/out channel counts")
        if self.weight_gen.out_channels != 3 or self.weight_gen.k_h != 1:
            raise ContractViolation("weight generator must be a 1x1 conv with 3 outputs")
        if self.weight_gen.in_channels != self.conv3.in_channels:
            raise ContractViolation("weight generator input channels must match branches")

    @property
    def channels(self):
        return self.conv3.in_channels

    @property
    def branches(self):
        return (self.conv3, self.conv5, self.conv7)

    @classmethod
    def seeded(cls, channels, rng, noise=0.05, out_channels=None):
        """Identity-centred branches with small Xavier perturbations.

        ``noise`` is the Xavier gain of the perturbation.
        """
        out_channels = channels if out_channels is None else out_channels
        kerns = []
        for k in KERNEL_SIZES:
            kern = Kernel2D.xavier(out_channels, channels, k, rng, gain=noise)
            n = min(channels, out_channels)
            kern.weights[np.arange(n), np.arange(n), k // 2, k // 2] += 1.0
            kerns.append(kern)
        gen = Kernel2D.xavier(3, channels, 1, rng, gain=noise)
        return cls(*kerns, gen)


def branch_outputs(x, params):
    """The three same-padded branch responses f3, f5, f7."""
    return [conv2d(x, k, padding=k.k_h // 2) for k in params.branches]


def blend_weights(x, params):
    """Softmax over the 3-channel weight map at every pixel, shape (3, H, W)."""
    logits = conv2d(x, params.weight_gen)
    return softmax(logits, axis=0)


def adaptive_conv(x, params, return_parts=False):
    """Blend the branches with per-pixel weights shared across channels."""
    x = check_feature_map(x, channels=params.channels)
    f3, f5, f7 = branch_outputs(x, params)
    w = blend_weights(x, params)
    out = (w[0] * f3.astype(np.float64) + w[1] * f5 + w[2] * f7).astype(np.float32)
    if return_parts:
        return out, w, (f3, f5, f7)
    return out
