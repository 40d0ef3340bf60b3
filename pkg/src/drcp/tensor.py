"""Dense feature-map kernels.

Feature maps are float32 numpy arrays of shape (C, H, W). Reductions inside
convolution, sampling and attention run in float64 and are cast back on exit.

Conventions:

* ``conv2d`` is a cross-correlation (no kernel flip), as in deep-learning
  frameworks.
* Sampling coordinates are ``(x, y)`` pairs in cell units where ``x`` indexes
  columns and ``y`` indexes rows; integer coordinates hit cell centres.
* Out-of-bounds bilinear taps read zero.
* ``upsample_bilinear`` uses the align-corners=False convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import ContractViolation, check_feature_map

SCATTER_EPS = 1e-6


class RngStream:
    """Explicit, seedable random stream.

    Child streams derived with :meth:`spawn` depend only on the root seed and
    the key path, so draws do not depend on call order elsewhere.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *key):
        return RngStream(self.seed, self.key + tuple(key))

    @property
    def generator(self):
        return self._gen

    def normal(self, shape, scale=1.0):
        return (self._gen.standard_normal(shape) * scale).astype(np.float32)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


def gaussian_draw(rng, shape):
    """Standard-normal float32 draw of the given shape."""
    return rng.normal(shape)


@dataclass
class Kernel2D:
    """Convolution weights (out, in, kh, kw) with a per-output bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        if self.weights.ndim != 4:
            raise ContractViolation(f"kernel weights must be 4-D, got {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ContractViolation("kernel bias length must equal out_channels")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def k_h(self):
        return self.weights.shape[2]

    @property
    def k_w(self):
        return self.weights.shape[3]

    @classmethod
    def zeros(cls, out_channels, in_channels, k_h=1, k_w=None, bias=0.0):
        k_w = k_h if k_w is None else k_w
        return cls(np.zeros((out_channels, in_channels, k_h, k_w), np.float32),
                   np.full(out_channels, bias, np.float32))

    @classmethod
    def xavier(cls, out_channels, in_channels, k_h, rng, k_w=None, gain=1.0):
        """Xavier-uniform weights with zero bias."""
        k_w = k_h if k_w is None else k_w
        fan_in = in_channels * k_h * k_w
        fan_out = out_channels * k_h * k_w
        limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, (out_channels, in_channels, k_h, k_w))
        return cls(w, np.zeros(out_channels))

    def to_tensors(self, prefix):
        return {f"{prefix}.weight": self.weights, f"{prefix}.bias": self.bias}

    @classmethod
    def from_tensors(cls, tensors, prefix):
        return cls(tensors[f"{prefix}.weight"], tensors[f"{prefix}.bias"])

    @classmethod
    def delta(cls, channels, k=1, scale=1.0):
        """Identity-at-centre kernel: output channel i copies input channel i."""
        w = np.zeros((channels, channels, k, k), np.float32)
        c = k // 2
        w[np.arange(channels), np.arange(channels), c, c] = scale
        return cls(w, np.zeros(channels))


def conv2d(x, kernel, padding=0, stride=1):
    """2-D cross-correlation with zero padding."""
    x = check_feature_map(x)
    if kernel.in_channels != x.shape[0]:
        raise ContractViolation(
            f"conv2d: kernel expects {kernel.in_channels} input channels, got {x.shape[0]}")
    kh, kw = kernel.k_h, kernel.k_w
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation("conv2d: kernel dims must be odd")
    c, h, w = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ContractViolation("conv2d: kernel larger than padded input")
    # (kh, kw, out, in) so each tap is a contiguous matrix; strided views skip BLAS
    wts = np.ascontiguousarray(kernel.weights.astype(np.float64).transpose(2, 3, 0, 1))
    out = np.zeros((kernel.out_channels, oh * ow))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            out += wts[i, j] @ patch.reshape(c, -1)
    out += kernel.bias.astype(np.float64)[:, None]
    return out.reshape(kernel.out_channels, oh, ow).astype(np.float32)


def _bilinear_taps(coords, h, w):
    """Yield (flat_index, weight, valid) for the four neighbours of each coordinate."""
    x = coords[..., 0].astype(np.float64).ravel()
    y = coords[..., 1].astype(np.float64).ravel()
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        yield idx, np.where(valid, wt, 0.0), valid


def bilinear_sample(x, coords):
    """Sample ``x`` at continuous (x, y) coordinates of shape (..., 2).

    Returns an array of shape (C, *coords.shape[:-1]).
    """
    x = check_feature_map(x)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != 2 or not np.isfinite(coords).all():
        raise ContractViolation("bilinear_sample: coords must be finite (..., 2)")
    c, h, w = x.shape
    flat = x.reshape(c, -1).astype(np.float64)
    out = np.zeros((c, coords[..., 0].size))
    for idx, wt, _ in _bilinear_taps(coords, h, w):
        out += flat[:, idx] * wt
    return out.reshape((c,) + coords.shape[:-1]).astype(np.float32)


def bilinear_scatter(values, coords, out_shape, normalize=True, eps=SCATTER_EPS):
    """Adjoint of :func:`bilinear_sample`.

    Each value is splatted to its four neighbours with the bilinear weights.
    With ``normalize`` the result is divided by the accumulated weight where
    that weight exceeds ``eps`` and set to zero elsewhere; without it this is
    the exact transpose of sampling.
    """
    values = np.asarray(values, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    h, w = out_shape
    c = values.shape[0]
    n = coords[..., 0].size
    if values[0].size != n:
        raise ContractViolation("bilinear_scatter: values and coords disagree in size")
    vals = values.reshape(c, n)
    acc = np.zeros(c * h * w)
    wsum = np.zeros(h * w)
    offsets = (np.arange(c) * h * w)[:, None]
    for idx, wt, _ in _bilinear_taps(coords, h, w):
        acc += np.bincount((offsets + idx[None, :]).ravel(), weights=(vals * wt).ravel(),
                           minlength=c * h * w)
        wsum += np.bincount(idx, weights=wt, minlength=h * w)
    acc = acc.reshape(c, h, w)
    if normalize:
        wsum = wsum.reshape(h, w)
        touched = wsum > eps
        acc = np.where(touched, acc / np.where(touched, wsum, 1.0), 0.0)
    return acc.astype(np.float32)


def _resize_axis(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def upsample_bilinear(x, target_h, target_w):
    """Bilinear resize with align-corners=False and edge clamping."""
    x = check_feature_map(x)
    c, h, w = x.shape
    if target_h < h or target_w < w:
        raise ContractViolation("upsample_bilinear: target dims must be >= input dims")
    xd = x.astype(np.float64)
    r0, r1, fr = _resize_axis(h, target_h)
    c0, c1, fc = _resize_axis(w, target_w)
    rows = xd[:, r0, :] * (1 - fr)[None, :, None] + xd[:, r1, :] * fr[None, :, None]
    out = rows[:, :, c0] * (1 - fc) + rows[:, :, c1] * fc
    return out.astype(np.float32)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def add(a, b):
    if np.shape(a) != np.shape(b):
        raise ContractViolation(f"add: shape mismatch {np.shape(a)} vs {np.shape(b)}")
    return (np.asarray(a, np.float32) + np.asarray(b, np.float32)).astype(np.float32)


def mul(a, b):
    if np.shape(a) != np.shape(b):
        raise ContractViolation(f"mul: shape mismatch {np.shape(a)} vs {np.shape(b)}")
    return (np.asarray(a, np.float32) * np.asarray(b, np.float32)).astype(np.float32)


def concat_channels(maps):
    maps = [check_feature_map(m) for m in maps]
    if len({m.shape[1:] for m in maps}) != 1:
        raise ContractViolation("concat_channels: spatial dims differ")
    return np.concatenate(maps, axis=0)


@dataclass
class LinearProjection:
    """Affine map ``y = x @ weights.T + bias`` with weights of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if self.weights.ndim != 2 or self.bias.shape[0] != self.weights.shape[0]:
            raise ContractViolation("LinearProjection: inconsistent weight/bias shapes")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ContractViolation(f"LinearProjection expects last dim {self.in_dim}, got {x.shape[-1]}")
        return x @ self.weights.T.astype(np.float64) + self.bias.astype(np.float64)

    @classmethod
    def xavier(cls, out_dim, in_dim, rng, gain=1.0):
        limit = gain * np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-limit, limit, (out_dim, in_dim)), np.zeros(out_dim))

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def zeros(cls, out_dim, in_dim):
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))


@dataclass
class AttentionWeights:
    """Query/key/value/output projections of one multi-head attention block."""

    q: LinearProjection
    k: LinearProjection
    v: LinearProjection
    o: LinearProjection

    @property
    def dim(self):
        return self.q.out_dim

    @classmethod
    def xavier(cls, dim, rng, out_gain=1.0):
        return cls(LinearProjection.xavier(dim, dim, rng), LinearProjection.xavier(dim, dim, rng),
                   LinearProjection.xavier(dim, dim, rng),
                   LinearProjection.xavier(dim, dim, rng, gain=out_gain))

    @classmethod
    def identity(cls, dim):
        return cls(*(LinearProjection.identity(dim) for _ in range(4)))


def multi_head_attention(query, key, value, heads, weights, return_weights=False):
    """Scaled dot-product attention over the last two axes.

    ``query`` is (..., Lq, D); ``key`` and ``value`` are (..., Lk, D). Leading
    axes are treated as independent batch entries.
    """
    query = np.asarray(query, np.float64)
    key = np.asarray(key, np.float64)
    value = np.asarray(value, np.float64)
    d = weights.dim
    if d % heads != 0:
        raise ContractViolation(f"model dim {d} not divisible by {heads} heads")
    if key.shape[-2] != value.shape[-2]:
        raise ContractViolation("key and value sequences must have equal length")
    dh = d // heads
    q = weights.q(query)
    k = weights.k(key)
    v = weights.v(value)

    def split(t):
        return t.reshape(t.shape[:-1] + (heads, dh)).swapaxes(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.swapaxes(-1, -2) / np.sqrt(dh)
    attn = softmax(scores, axis=-1)
    ctx = (attn @ vh).swapaxes(-2, -3)
    ctx = ctx.reshape(ctx.shape[:-2] + (d,))
    out = weights.o(ctx).astype(np.float32)
    if return_weights:
        return out, attn
    return out
