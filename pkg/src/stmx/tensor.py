"""Dense tensor kernels shared by every block.

Activations are ``(T, H, W, C)`` float32 arrays ("token grids"); embeddings
are ``(N, D)`` float32 arrays. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels

F32 = np.float32


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


def as_grid(x) -> np.ndarray:
    """Validate and return ``x`` as a contiguous float32 (T, H, W, C) grid."""
    x = np.ascontiguousarray(x, dtype=F32)
    if x.ndim != 4:
        raise ShapeError(f"token grid must be 4-D (T, H, W, C), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"token grid dimensions must be >= 1, got {x.shape}")
    return x


def _channels(name, arr, c):
    arr = np.ascontiguousarray(arr, dtype=F32)
    if arr.shape[0] != c:
        raise ShapeError(f"{name} has {arr.shape[0]} channels, input has {c}")
    return arr


@dataclass(frozen=True, eq=False)
class BNStats:
    """Per-channel evaluation-mode batch-norm statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = np.shape(self.gamma)[0]
        for name in ("gamma", "beta", "mean", "var"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=F32)
            if arr.shape != (c,):
                raise ShapeError(f"BN {name} has shape {arr.shape}, expected ({c},)")
            object.__setattr__(self, name, arr)
        if np.any(self.var < 0):
            raise ValueError("BN variance must be non-negative")
        if self.eps < 0 or np.any(self.var.astype(np.float64) + self.eps <= 0):
            raise ValueError("BN requires var + eps > 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, c: int) -> "BNStats":
        return cls(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), eps=0.0)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(s, b)`` with ``bn(x) = s * x + b``; derived in float64."""
        s = self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)
        b = self.beta.astype(np.float64) - self.mean.astype(np.float64) * s
        return s.astype(F32), b.astype(F32)


def batchnorm(x, stats: BNStats) -> np.ndarray:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` per channel."""
    x = np.asarray(x, dtype=F32)
    if x.shape[-1] != stats.channels:
        raise ShapeError(f"BN has {stats.channels} channels, input has {x.shape[-1]}")
    s, b = stats.scale_shift()
    return x * s + b


def _check_kernel(kernel, ndim, c):
    kernel = np.ascontiguousarray(kernel, dtype=F32)
    if kernel.ndim != ndim:
        raise ShapeError(f"depthwise kernel must be {ndim}-D, got shape {kernel.shape}")
    if kernel.shape[0] != c:
        raise ShapeError(f"kernel has {kernel.shape[0]} channels, input has {c}")
    if any(k % 2 == 0 for k in kernel.shape[1:]):
        raise ShapeError(f"kernel sizes must be odd, got {kernel.shape[1:]}")
    return kernel


def _pad(x, widths, pad_value):
    """Pad with zeros, or with a per-channel constant if ``pad_value`` is given."""
    if pad_value is None:
        return np.pad(x, widths)
    shape = tuple(n + lo + hi for n, (lo, hi) in zip(x.shape, widths))
    out = np.empty(shape, dtype=F32)
    out[...] = pad_value
    out[tuple(slice(lo, lo + n) for n, (lo, _) in zip(x.shape, widths))] = x
    return out


def dwconv2d(x, kernel, bias, pad_value=None) -> np.ndarray:
    """Per-frame depthwise 2D convolution with "same" padding.

    ``kernel`` is (C, kh, kw). Padding is zero unless ``pad_value`` (C,) is set.
    """
    x = as_grid(x)
    c = x.shape[3]
    kernel = _check_kernel(kernel, 3, c)
    bias = _channels("bias", bias, c)
    ph, pw = (kernel.shape[1] - 1) // 2, (kernel.shape[2] - 1) // 2
    xpad = _pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), pad_value)
    return kernels.dwconv2d_valid(np.ascontiguousarray(xpad), kernel, bias)


def temporal_major(x) -> np.ndarray:
    """Rearrange (T, H, W, C) into (H*W, T, C) so each row is one pixel's time line."""
    t, h, w, c = x.shape
    return np.ascontiguousarray(x.reshape(t, h * w, c).transpose(1, 0, 2))


def spatial_major(lines, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`temporal_major`."""
    m, t, c = lines.shape
    if m != h * w:
        raise ShapeError(f"{m} time lines cannot form a {h}x{w} grid")
    return np.ascontiguousarray(lines.transpose(1, 0, 2).reshape(t, h, w, c))


def dwconv1d_temporal(x, kernel, bias, pad_value=None) -> np.ndarray:
    """Depthwise convolution along the frame axis with "same" padding.

    ``kernel`` is (C, kt).
    """
    x = as_grid(x)
    t, h, w, c = x.shape
    kernel = _check_kernel(kernel, 2, c)
    bias = _channels("bias", bias, c)
    p = (kernel.shape[1] - 1) // 2
    lines = _pad(temporal_major(x), ((0, 0), (p, p), (0, 0)), pad_value)
    out = kernels.dwconv1d_valid(np.ascontiguousarray(lines), kernel, bias)
    return spatial_major(out, h, w)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    m = np.asarray(m, dtype=F32)
    z = m - m.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def gelu(x) -> np.ndarray:
    """Exact (erf) GELU."""
    x = np.asarray(x, dtype=F32)
    return (F32(0.5) * x * (F32(1.0) + erf(x * F32(1.0 / np.sqrt(2.0))))).astype(F32, copy=False)


def layernorm(x, scale, shift, eps: float = 1e-5) -> np.ndarray:
    """Normalize each token over its channels, then apply a per-channel affine map."""
    x = np.asarray(x, dtype=F32)
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    return d / np.sqrt(var + F32(eps)) * scale + shift


def l2_normalize_rows(e) -> tuple[np.ndarray, np.ndarray]:
    """Scale rows to unit L2 norm.

    Returns ``(normalized, zero_rows)``; zero rows stay zero and are flagged
    in the boolean mask.
    """
    e = np.asarray(e, dtype=F32)
    if e.ndim != 2:
        raise ShapeError(f"embedding matrix must be 2-D, got shape {e.shape}")
    norms = np.sqrt((e.astype(np.float64) ** 2).sum(axis=1))
    zero = norms == 0
    out = e / np.where(zero, 1.0, norms)[:, None]
    return out.astype(F32), zero
