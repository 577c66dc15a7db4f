"""Multi-branch train-time blocks, their fused inference forms, and the folding rules.

A :class:`FusableConv` is a depthwise convolution that may carry a batch-norm
applied to its *input* and an identity skip around it::

    y = conv(bn(x)) + x

Folding happens in two steps: :func:`fold_bn` pushes the BN affine map into the
kernel and bias, then :func:`fold_skip` absorbs the identity into the center
tap. The result is a single plain convolution.

Border convention: the BN'd conv input is padded with ``bn(0)`` rather than
with zeros, i.e. the raw input is zero-padded before normalization. Under
that convention the folded kernel is exact everywhere, borders included,
because every tap (in-bounds or padded) receives the BN shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .tensor import (
    F32,
    BNStats,
    ShapeError,
    as_grid,
    batchnorm,
    dwconv1d_temporal,
    dwconv2d,
    gelu,
    layernorm,
    softmax_rows,
)

Mode = Literal["train", "fused"]
MODES = ("train", "fused")


class FoldError(ValueError):
    """Raised when a fold or fused forward is requested in an invalid state."""


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass(frozen=True, eq=False)
class FusableConv:
    kind: Literal["temporal", "spatial"]
    kernel: np.ndarray
    bias: np.ndarray
    bn: BNStats | None = None
    skip: bool = False

    def __post_init__(self):
        kernel = np.ascontiguousarray(self.kernel, dtype=F32)
        want = {"temporal": 2, "spatial": 3}.get(self.kind)
        if want is None:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if kernel.ndim != want:
            raise ShapeError(f"{self.kind} kernel must be {want}-D, got {kernel.shape}")
        if any(k % 2 == 0 for k in kernel.shape[1:]):
            raise ShapeError(f"kernel sizes must be odd, got {kernel.shape[1:]}")
        c = kernel.shape[0]
        bias = np.ascontiguousarray(self.bias, dtype=F32)
        if bias.shape != (c,):
            raise ShapeError(f"bias shape {bias.shape} does not match {c} channels")
        if self.bn is not None and self.bn.channels != c:
            raise ShapeError(f"BN has {self.bn.channels} channels, kernel has {c}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)

    @property
    def channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def is_folded(self) -> bool:
        return self.bn is None and not self.skip

    def conv(self, x, pad_value=None):
        if self.kind == "temporal":
            return dwconv1d_temporal(x, self.kernel, self.bias, pad_value)
        return dwconv2d(x, self.kernel, self.bias, pad_value)

    def forward(self, x):
        x = as_grid(x)
        if self.bn is None:
            y = self.conv(x)
        else:
            # padded taps read bn(0), see module docstring
            _, shift = self.bn.scale_shift()
            y = self.conv(batchnorm(x, self.bn), pad_value=shift)
        if self.skip:
            y = y + x
        return y

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"kernel": self.kernel, "bias": self.bias}
        if self.bn is not None:
            out.update({"bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta,
                        "bn.mean": self.bn.mean, "bn.var": self.bn.var})
        return out


def fold_bn(conv: FusableConv) -> FusableConv:
    """Absorb the input batch-norm into kernel and bias.

    ``kernel' = s * kernel`` and ``bias' = bias + shift * sum(kernel)`` per
    channel. Without BN the same object is returned (a no-op).
    """
    if conv.bn is None:
        return conv
    s, shift = conv.bn.scale_shift()
    k64 = conv.kernel.astype(np.float64)
    axes = tuple(range(1, k64.ndim))
    bshape = (-1,) + (1,) * (k64.ndim - 1)
    kernel = k64 * s.astype(np.float64).reshape(bshape)
    bias = conv.bias.astype(np.float64) + shift.astype(np.float64) * k64.sum(axis=axes)
    return replace(conv, kernel=kernel.astype(F32), bias=bias.astype(F32), bn=None)


def fold_skip(conv: FusableConv) -> FusableConv:
    """Absorb the identity skip by adding 1.0 to each channel's center tap.

    Requires the BN to be folded first. Without a skip the same object is
    returned (a no-op).
    """
    if conv.bn is not None:
        raise FoldError("fold the batch-norm before the skip connection")
    if not conv.skip:
        return conv
    kernel = conv.kernel.copy()
    center = (slice(None),) + tuple(k // 2 for k in kernel.shape[1:])
    kernel[center] += F32(1.0)
    return replace(conv, kernel=kernel, skip=False)


def fold(conv: FusableConv) -> FusableConv:
    return fold_skip(fold_bn(conv))


def _require_folded(*convs):
    for conv in convs:
        if not conv.is_folded:
            raise FoldError("fused mode needs fully folded convolutions; call reparameterize_block first")


def identity_temporal(c: int, kt: int = 3) -> FusableConv:
    """Temporal branch whose output equals its input (zero conv plus the skip).

    Its fused form is the identity center tap.
    """
    return FusableConv("temporal", np.zeros((c, kt)), np.zeros(c), BNStats.identity(c), skip=True)


# --------------------------------------------------------------------------
# spatiotemporal RepMixer


@dataclass(frozen=True, eq=False)
class STRepMixerParams:
    temporal: FusableConv
    spatial: FusableConv

    def __post_init__(self):
        if self.temporal.kind != "temporal" or self.spatial.kind != "spatial":
            raise ValueError("STRepMixer needs a temporal and a spatial conv")
        if self.temporal.channels != self.spatial.channels:
            raise ShapeError("temporal and spatial convs disagree on channel count")

    @property
    def channels(self):
        return self.spatial.channels

    @property
    def is_folded(self):
        return self.temporal.is_folded and self.spatial.is_folded

    def tensors(self):
        out = {}
        for part in ("temporal", "spatial"):
            out.update({f"{part}.{k}": v for k, v in getattr(self, part).tensors().items()})
        return out


def st_repmixer_forward(x, p: STRepMixerParams, mode: Mode = "train"):
    """Temporal depthwise mixing followed by spatial depthwise mixing.

    train: ``X' = DWConv1D(BN(X)) + X``, ``Y = DWConv2D(BN(X')) + X'``
    fused: ``X' = DWConv1D(X)``, ``Y = DWConv2D(X')`` with folded parameters.
    """
    _check_mode(mode)
    x = as_grid(x)
    if x.shape[3] != p.channels:
        raise ShapeError(f"input has {x.shape[3]} channels, block has {p.channels}")
    if mode == "train":
        return p.spatial.forward(p.temporal.forward(x))
    _require_folded(p.temporal, p.spatial)
    xt = dwconv1d_temporal(x, p.temporal.kernel, p.temporal.bias)
    return dwconv2d(xt, p.spatial.kernel, p.spatial.bias)


def repmixer_forward(x, spatial: FusableConv, mode: Mode = "train"):
    """Frame-wise spatial RepMixer, ``Y = DWConv2D(BN(X)) + X`` (the image baseline)."""
    _check_mode(mode)
    if mode == "train":
        return spatial.forward(x)
    _require_folded(spatial)
    return dwconv2d(x, spatial.kernel, spatial.bias)


# --------------------------------------------------------------------------
# spatiotemporal attention


@dataclass(frozen=True, eq=False)
class STAttentionParams:
    tpe: np.ndarray          # (T, C)
    cpe: FusableConv         # spatial, skip, no BN
    heads: int
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln_scale: np.ndarray
    ln_shift: np.ndarray
    ln_eps: float = field(default=1e-5)

    def __post_init__(self):
        tpe = np.ascontiguousarray(self.tpe, dtype=F32)
        if tpe.ndim != 2:
            raise ShapeError(f"TPE must be (T, C), got {tpe.shape}")
        c = tpe.shape[1]
        if self.cpe.kind != "spatial" or self.cpe.channels != c:
            raise ShapeError("CPE must be a spatial conv with the block's channel count")
        if self.heads < 1 or c % self.heads:
            raise ValueError(f"channels {c} not divisible by heads {self.heads}")
        object.__setattr__(self, "tpe", tpe)
        for name in ("wq", "wk", "wv", "wo"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=F32)
            if arr.shape != (c, c):
                raise ShapeError(f"{name} must be ({c}, {c}), got {arr.shape}")
            object.__setattr__(self, name, arr)
        for name in ("bq", "bk", "bv", "bo", "ln_scale", "ln_shift"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=F32)
            if arr.shape != (c,):
                raise ShapeError(f"{name} must be ({c},), got {arr.shape}")
            object.__setattr__(self, name, arr)

    @property
    def channels(self):
        return self.tpe.shape[1]

    @property
    def frames(self):
        return self.tpe.shape[0]

    @property
    def is_folded(self):
        return self.cpe.is_folded

    def tensors(self):
        out = {"tpe": self.tpe}
        out.update({f"cpe.{k}": v for k, v in self.cpe.tensors().items()})
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_scale", "ln_shift"):
            out[name] = getattr(self, name)
        return out


def multihead_attention(tokens, p: STAttentionParams):
    """Pre-normalized multi-head self-attention over all rows of ``tokens`` (N, C).

    Returns the attention branch output (before the residual add).
    """
    n, c = tokens.shape
    d = c // p.heads
    h = layernorm(tokens, p.ln_scale, p.ln_shift, p.ln_eps)
    q = (h @ p.wq + p.bq) * F32(1.0 / np.sqrt(d))
    k = h @ p.wk + p.bk
    v = h @ p.wv + p.bv
    out = np.empty((n, c), dtype=F32)
    for i in range(p.heads):
        sl = slice(i * d, (i + 1) * d)
        scores = softmax_rows(q[:, sl] @ k[:, sl].T)
        out[:, sl] = scores @ v[:, sl]
    return out @ p.wo + p.bo


def _cpe_stage(x, p: STAttentionParams, mode):
    if mode == "train":
        return p.cpe.forward(x)
    _require_folded(p.cpe)
    return dwconv2d(x, p.cpe.kernel, p.cpe.bias)


def add_tpe(x, tpe):
    """``X + TPE`` broadcast over the spatial grid."""
    x = as_grid(x)
    tpe = np.asarray(tpe, dtype=F32)
    if tpe.shape != (x.shape[0], x.shape[3]):
        raise ShapeError(f"TPE {tpe.shape} does not match {x.shape[0]} frames x {x.shape[3]} channels")
    return x + tpe[:, None, None, :]


def st_attention_forward(x, p: STAttentionParams, mode: Mode = "train"):
    """TPE, CPE, then joint self-attention over all T*H*W tokens with a residual."""
    _check_mode(mode)
    x = as_grid(x)
    if x.shape[0] != p.frames:
        raise ShapeError(f"input has {x.shape[0]} frames, TPE was built for {p.frames}")
    if x.shape[3] != p.channels:
        raise ShapeError(f"input has {x.shape[3]} channels, block has {p.channels}")
    x2 = _cpe_stage(add_tpe(x, p.tpe), p, mode)
    tokens = x2.reshape(-1, p.channels)
    return (tokens + multihead_attention(tokens, p)).reshape(x.shape)


def attention_forward(x, p: STAttentionParams, mode: Mode = "train"):
    """Image baseline: CPE then self-attention within each frame; TPE is unused."""
    _check_mode(mode)
    x = as_grid(x)
    x2 = _cpe_stage(x, p, mode)
    t, h, w, c = x2.shape
    out = np.empty_like(x2)
    for i in range(t):
        tokens = x2[i].reshape(h * w, c)
        out[i] = (tokens + multihead_attention(tokens, p)).reshape(h, w, c)
    return out


# --------------------------------------------------------------------------
# channel mixers


@dataclass(frozen=True, eq=False)
class ConvFFNParams:
    dw: FusableConv
    w1: np.ndarray  # (C, rC)
    b1: np.ndarray
    w2: np.ndarray  # (rC, C)
    b2: np.ndarray

    def __post_init__(self):
        c = self.dw.channels
        if self.dw.kind != "spatial":
            raise ValueError("ConvFFN depthwise stage must be spatial")
        w1 = np.ascontiguousarray(self.w1, dtype=F32)
        w2 = np.ascontiguousarray(self.w2, dtype=F32)
        if w1.ndim != 2 or w1.shape[0] != c or w2.shape != (w1.shape[1], c):
            raise ShapeError(f"ConvFFN weights {w1.shape}, {w2.shape} inconsistent with C={c}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)
        for name, n in (("b1", w1.shape[1]), ("b2", c)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=F32)
            if arr.shape != (n,):
                raise ShapeError(f"{name} must be ({n},), got {arr.shape}")
            object.__setattr__(self, name, arr)

    @property
    def channels(self):
        return self.dw.channels

    @property
    def ratio(self):
        return self.w1.shape[1] // self.channels

    @property
    def is_folded(self):
        return self.dw.is_folded

    def tensors(self):
        out = {f"dw.{k}": v for k, v in self.dw.tensors().items()}
        out.update({"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2})
        return out


def convffn_forward(x, p: ConvFFNParams, mode: Mode = "train"):
    """``x + W2 gelu(W1 dw(x))`` with the depthwise stage in train or fused form."""
    _check_mode(mode)
    x = as_grid(x)
    if x.shape[3] != p.channels:
        raise ShapeError(f"input has {x.shape[3]} channels, block has {p.channels}")
    if mode == "train":
        z = p.dw.forward(x)
    else:
        _require_folded(p.dw)
        z = dwconv2d(x, p.dw.kernel, p.dw.bias)
    hidden = gelu(z.reshape(-1, p.channels) @ p.w1 + p.b1)
    return x + (hidden @ p.w2 + p.b2).reshape(x.shape)


@dataclass(frozen=True, eq=False)
class FFNParams:
    """Transformer feed-forward block, the channel mixer of plain ViTs."""

    ln_scale: np.ndarray
    ln_shift: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self):
        return {k: getattr(self, k) for k in ("ln_scale", "ln_shift", "w1", "b1", "w2", "b2")}


def ffn_forward(x, p: FFNParams, mode: Mode = "train"):
    _check_mode(mode)
    x = as_grid(x)
    c = x.shape[3]
    tokens = x.reshape(-1, c)
    hidden = gelu(layernorm(tokens, p.ln_scale, p.ln_shift) @ p.w1 + p.b1)
    return x + (hidden @ p.w2 + p.b2).reshape(x.shape)


# --------------------------------------------------------------------------
# reparameterization


def reparameterize_block(params):
    """Fold every BN and skip in a block parameter bundle.

    Returns ``(fused_params, changed)``. Already-fused input is returned
    unchanged with ``changed=False``.
    """
    if params.is_folded:
        return params, False
    if isinstance(params, STRepMixerParams):
        return replace(params, temporal=fold(params.temporal), spatial=fold(params.spatial)), True
    if isinstance(params, STAttentionParams):
        return replace(params, cpe=fold(params.cpe)), True
    if isinstance(params, ConvFFNParams):
        return replace(params, dw=fold(params.dw)), True
    raise TypeError(f"cannot reparameterize {type(params).__name__}")


# --------------------------------------------------------------------------
# random parameter draws (tests, benchmarks, model init)


def random_bn(rng, c) -> BNStats:
    return BNStats(
        gamma=rng.uniform(0.5, 1.5, c),
        beta=rng.uniform(-0.5, 0.5, c),
        mean=rng.uniform(-0.5, 0.5, c),
        var=rng.uniform(0.5, 2.0, c),
        eps=1e-5,
    )


def random_conv(rng, kind, c, size=3, bn=True, skip=True, scale=1.0) -> FusableConv:
    shape = (c, size) if kind == "temporal" else (c, size, size)
    taps = int(np.prod(shape[1:]))
    kernel = rng.uniform(-1.0, 1.0, shape) * (scale / np.sqrt(taps))
    bias = rng.uniform(-0.1, 0.1, c) * scale
    return FusableConv(kind, kernel, bias, random_bn(rng, c) if bn else None, skip)


def _linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out) * 0.1


def random_repmixer(rng, c, kt=3, k=3) -> STRepMixerParams:
    return STRepMixerParams(random_conv(rng, "temporal", c, kt), random_conv(rng, "spatial", c, k))


def random_attention(rng, t, c, heads, cpe_size=7, tpe="random") -> STAttentionParams:
    ws = {}
    for name in ("q", "k", "v", "o"):
        ws[f"w{name}"], ws[f"b{name}"] = _linear(rng, c, c)
    tpe_arr = rng.normal(0.0, 0.1, (t, c)) if tpe == "random" else np.zeros((t, c))
    return STAttentionParams(
        tpe=tpe_arr,
        cpe=random_conv(rng, "spatial", c, cpe_size, bn=False, skip=True),
        heads=heads,
        ln_scale=rng.uniform(0.8, 1.2, c),
        ln_shift=rng.uniform(-0.1, 0.1, c),
        **ws,
    )


def random_convffn(rng, c, ratio=3, k=3) -> ConvFFNParams:
    w1, b1 = _linear(rng, c, ratio * c)
    w2, b2 = _linear(rng, ratio * c, c)
    return ConvFFNParams(random_conv(rng, "spatial", c, k), w1, b1, w2, b2)


def random_ffn(rng, c, ratio=4) -> FFNParams:
    w1, b1 = _linear(rng, c, ratio * c)
    w2, b2 = _linear(rng, ratio * c, c)
    return FFNParams(np.ones(c, F32), np.zeros(c, F32), w1.astype(F32), b1.astype(F32),
                     w2.astype(F32), b2.astype(F32))
