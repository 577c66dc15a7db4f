"""Desk-scale video encoder built from the spatiotemporal blocks.

Pipeline: patch-embedding stem, stages of (token mixer + ConvFFN) blocks with
pointwise channel projections between stages, per-frame global average
pooling, a linear head to the embedding dimension, and temporal mean pooling
to the video embedding.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import weights as wio
from .reparam import (
    ConvFFNParams,
    FoldError,
    FusableConv,
    STAttentionParams,
    STRepMixerParams,
    convffn_forward,
    random_attention,
    random_convffn,
    random_repmixer,
    reparameterize_block,
    st_attention_forward,
    st_repmixer_forward,
)
from .tensor import F32, BNStats, ShapeError, as_grid, l2_normalize_rows

BLOCK_KINDS = ("st-repmixer", "st-attention")


class ConfigError(ValueError):
    pass


class FusedStoreError(ValueError):
    """A fused weight store was loaded where a train-form model is required."""


@dataclass(frozen=True)
class StageConfig:
    kind: str
    repeat: int
    channels: int
    heads: int = 0

    def __post_init__(self):
        kind = self.kind.removesuffix("+convffn")
        object.__setattr__(self, "kind", kind)
        if kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.repeat < 1 or self.channels < 1:
            raise ConfigError("stage repeat and channels must be >= 1")
        if kind == "st-attention":
            if self.heads < 1 or self.channels % self.heads:
                raise ConfigError(f"attention stage needs heads dividing {self.channels}, got {self.heads}")


@dataclass(frozen=True)
class ModelConfig:
    t: int = 8
    h: int = 16
    w: int = 16
    patch: int = 2
    embed_dim: int = 64
    stages: tuple[StageConfig, ...] = field(default_factory=tuple)
    temporal_kernel: int = 3
    spatial_kernel: int = 3
    cpe_kernel: int = 7
    ffn_ratio: int = 3
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if min(self.t, self.h, self.w, self.patch) < 1:
            raise ConfigError("t, h, w and patch must be >= 1")
        if self.h % self.patch or self.w % self.patch:
            raise ConfigError(f"input {self.h}x{self.w} not divisible by patch {self.patch}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        chans = [s.channels for s in self.stages]
        if any(b < a for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"stage channels must be non-decreasing, got {chans}")
        for k in (self.temporal_kernel, self.spatial_kernel, self.cpe_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        if self.ffn_ratio < 1:
            raise ConfigError("ffn_ratio must be >= 1")

    @property
    def grid(self):
        return self.t, self.h // self.patch, self.w // self.patch

    def to_text(self) -> str:
        stages = ", ".join(
            f"({s.kind}, {s.repeat}, {s.channels}" + (f", {s.heads})" if s.kind == "st-attention" else ")")
            for s in self.stages
        )
        keys = ("t", "h", "w", "patch", "embed_dim", "temporal_kernel", "spatial_kernel",
                "cpe_kernel", "ffn_ratio", "bn_eps")
        lines = [f"{k} = {getattr(self, k)}" for k in keys]
        lines.append(f"stages = {stages}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_INT_KEYS = {"t", "h", "w", "patch", "embed_dim", "temporal_kernel", "spatial_kernel", "cpe_kernel", "ffn_ratio"}
_STAGE_RE = re.compile(r"\(([^()]*)\)")


def parse_stages(text: str) -> tuple[StageConfig, ...]:
    rest = _STAGE_RE.sub("", text).replace(",", "").strip()
    if rest:
        raise ConfigError(f"stray text in stage list: {rest!r}")
    stages = []
    for group in _STAGE_RE.findall(text):
        parts = [p.strip() for p in group.split(",")]
        if len(parts) not in (3, 4):
            raise ConfigError(f"stage tuple must be (kind, repeat, channels[, heads]), got ({group})")
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError:
            raise ConfigError(f"non-integer field in stage ({group})") from None
        stages.append(StageConfig(parts[0], *nums))
    return tuple(stages)


def parse_config(text: str) -> ModelConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        try:
            if key == "stages":
                values[key] = parse_stages(value)
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key == "bn_eps":
                values[key] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    return ModelConfig(**values)


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def tiny_desk() -> ModelConfig:
    """Default config: 8x16x16 clips, 2x stem to 8x8 tokens, two RepMixer blocks at C=32,
    one attention block at C=64, D=64."""
    text = resources.files("stmx").joinpath("data/tiny-desk.cfg").read_text()
    return parse_config(text)


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class Block:
    mixer: STRepMixerParams | STAttentionParams
    ffn: ConvFFNParams


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    fused: bool
    stem_w: np.ndarray
    stem_b: np.ndarray
    proj: tuple  # per stage: (w, b) or None
    blocks: tuple  # per stage: tuple[Block, ...]
    head_w: np.ndarray
    head_b: np.ndarray

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"stem.weight": self.stem_w, "stem.bias": self.stem_b}
        for i, (proj, blocks) in enumerate(zip(self.proj, self.blocks)):
            if proj is not None:
                out[f"s{i}.proj.weight"], out[f"s{i}.proj.bias"] = proj
            for j, blk in enumerate(blocks):
                for part in ("mixer", "ffn"):
                    for k, v in getattr(blk, part).tensors().items():
                        out[f"s{i}.b{j}.{part}.{k}"] = v
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict, fused: bool) -> "Model":
        """Rebuild a model from a name -> array map; names must match exactly."""
        expected = set(_expected_names(config, fused))
        got = set(tensors)
        if got != expected:
            missing = sorted(expected - got)[:5]
            extra = sorted(got - expected)[:5]
            raise wio.ShapeTableError(f"tensor names do not match config: missing {missing}, unexpected {extra}")
        try:
            return _build(config, tensors, fused)
        except (ShapeError, ValueError) as exc:
            if isinstance(exc, wio.WeightFormatError):
                raise
            raise wio.ShapeTableError(f"tensor shapes inconsistent with config: {exc}") from None

    def with_tensors(self, updates: dict) -> "Model":
        tensors = self.named_tensors()
        tensors.update(updates)
        return Model.from_tensors(self.config, tensors, self.fused)


def _expected_names(config, fused):
    names = ["stem.weight", "stem.bias"]
    prev = None
    for i, st in enumerate(config.stages):
        if prev is not None and st.channels != prev:
            names += [f"s{i}.proj.weight", f"s{i}.proj.bias"]
        prev = st.channels
        bn = [] if fused else ["bn.gamma", "bn.beta", "bn.mean", "bn.var"]
        for j in range(st.repeat):
            p = f"s{i}.b{j}"
            if st.kind == "st-repmixer":
                for part in ("temporal", "spatial"):
                    names += [f"{p}.mixer.{part}.{k}" for k in ["kernel", "bias"] + bn]
            else:
                names += [f"{p}.mixer.{k}" for k in ("tpe", "cpe.kernel", "cpe.bias", "wq", "bq", "wk", "bk",
                                                      "wv", "bv", "wo", "bo", "ln_scale", "ln_shift")]
            names += [f"{p}.ffn.dw.{k}" for k in ["kernel", "bias"] + bn]
            names += [f"{p}.ffn.{k}" for k in ("w1", "b1", "w2", "b2")]
    return names + ["head.weight", "head.bias"]


def _conv(tensors, prefix, kind, skip, fused, eps, has_bn=True):
    bn = None
    if has_bn and not fused:
        bn = BNStats(*(tensors[f"{prefix}.bn.{k}"] for k in ("gamma", "beta", "mean", "var")), eps=eps)
    return FusableConv(kind, tensors[f"{prefix}.kernel"], tensors[f"{prefix}.bias"], bn, skip and not fused)


def _build(config, tensors, fused):
    eps = config.bn_eps
    proj, stages = [], []
    prev = None
    for i, st in enumerate(config.stages):
        if prev is not None and st.channels != prev:
            proj.append((tensors[f"s{i}.proj.weight"], tensors[f"s{i}.proj.bias"]))
        else:
            proj.append(None)
        prev = st.channels
        blocks = []
        for j in range(st.repeat):
            p = f"s{i}.b{j}"
            if st.kind == "st-repmixer":
                mixer = STRepMixerParams(
                    _conv(tensors, f"{p}.mixer.temporal", "temporal", True, fused, eps),
                    _conv(tensors, f"{p}.mixer.spatial", "spatial", True, fused, eps),
                )
            else:
                m = f"{p}.mixer"
                mixer = STAttentionParams(
                    tpe=tensors[f"{m}.tpe"],
                    cpe=_conv(tensors, f"{m}.cpe", "spatial", True, fused, eps, has_bn=False),
                    heads=st.heads,
                    **{k: tensors[f"{m}.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                                                         "ln_scale", "ln_shift")},
                )
                if mixer.frames != config.t:
                    raise ShapeError(f"{m}.tpe has {mixer.frames} rows, config has t={config.t}")
            ffn = ConvFFNParams(
                _conv(tensors, f"{p}.ffn.dw", "spatial", True, fused, eps),
                *(tensors[f"{p}.ffn.{k}"] for k in ("w1", "b1", "w2", "b2")),
            )
            if mixer.channels != st.channels or ffn.channels != st.channels:
                raise ShapeError(f"stage {i} block {j} channels differ from config {st.channels}")
            blocks.append(Block(mixer, ffn))
        stages.append(tuple(blocks))

    def arr(name, shape):
        a = np.ascontiguousarray(tensors[name], dtype=F32)
        if a.shape != shape:
            raise ShapeError(f"{name} has shape {a.shape}, expected {shape}")
        return a

    c0, cl = config.stages[0].channels, config.stages[-1].channels
    pin = config.patch * config.patch * 3
    for i, pr in enumerate(proj):
        if pr is not None:
            cin, cout = config.stages[i - 1].channels, config.stages[i].channels
            proj[i] = (arr(f"s{i}.proj.weight", (cin, cout)), arr(f"s{i}.proj.bias", (cout,)))
    return Model(
        config=config,
        fused=fused,
        stem_w=arr("stem.weight", (pin, c0)),
        stem_b=arr("stem.bias", (c0,)),
        proj=tuple(proj),
        blocks=tuple(stages),
        head_w=arr("head.weight", (cl, config.embed_dim)),
        head_b=arr("head.bias", (config.embed_dim,)),
    )


def init_model(config: ModelConfig, seed: int = 0, tpe: str = "zeros") -> Model:
    """Random train-form model. ``tpe="zeros"`` (default) or ``"random"``."""
    rng = np.random.default_rng(seed)

    def linear(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return (rng.uniform(-bound, bound, (fan_in, fan_out)).astype(F32),
                rng.uniform(-bound, bound, fan_out).astype(F32) * F32(0.1))

    t = {}
    c0 = config.stages[0].channels
    t["stem.weight"], t["stem.bias"] = linear(config.patch * config.patch * 3, c0)
    prev = None
    for i, st in enumerate(config.stages):
        if prev is not None and st.channels != prev:
            t[f"s{i}.proj.weight"], t[f"s{i}.proj.bias"] = linear(prev, st.channels)
        prev = st.channels
        for j in range(st.repeat):
            p = f"s{i}.b{j}"
            if st.kind == "st-repmixer":
                mixer = random_repmixer(rng, st.channels, config.temporal_kernel, config.spatial_kernel)
            else:
                mixer = random_attention(rng, config.t, st.channels, st.heads, config.cpe_kernel, tpe=tpe)
            ffn = random_convffn(rng, st.channels, config.ffn_ratio, config.spatial_kernel)
            t.update({f"{p}.mixer.{k}": v for k, v in mixer.tensors().items()})
            t.update({f"{p}.ffn.{k}": v for k, v in ffn.tensors().items()})
    t["head.weight"], t["head.bias"] = linear(config.stages[-1].channels, config.embed_dim)
    return Model.from_tensors(config, t, fused=False)


def reparameterize_model(model: Model) -> tuple[Model, bool]:
    """Fold every block. Returns ``(fused_model, changed)``; idempotent."""
    if model.fused:
        return model, False
    blocks = tuple(
        tuple(Block(reparameterize_block(b.mixer)[0], reparameterize_block(b.ffn)[0]) for b in stage)
        for stage in model.blocks
    )
    return replace(model, blocks=blocks, fused=True), True


# --------------------------------------------------------------------------
# forward


def _resolve_mode(model, mode):
    if mode is None:
        return "fused" if model.fused else "train"
    if mode == "fused" and not model.fused:
        raise FoldError("model is in train form; reparameterize it before running fused")
    return mode


def stem_forward(v, model: Model):
    cfg = model.config
    t, h, w, _ = v.shape
    p = cfg.patch
    patches = v.reshape(t, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(t, h // p, w // p, p * p * 3)
    return patches @ model.stem_w + model.stem_b


def features(v, model: Model, mode=None) -> np.ndarray:
    """Final-stage token grid for clip ``v`` of shape (T, H, W, 3)."""
    mode = _resolve_mode(model, mode)
    cfg = model.config
    v = as_grid(v)
    if v.shape != (cfg.t, cfg.h, cfg.w, 3):
        raise ShapeError(f"clip shape {v.shape} does not match config {(cfg.t, cfg.h, cfg.w, 3)}")
    x = stem_forward(v, model)
    for proj, blocks in zip(model.proj, model.blocks):
        if proj is not None:
            x = x @ proj[0] + proj[1]
        for blk in blocks:
            if isinstance(blk.mixer, STRepMixerParams):
                x = st_repmixer_forward(x, blk.mixer, mode)
            else:
                x = st_attention_forward(x, blk.mixer, mode)
            x = convffn_forward(x, blk.ffn, mode)
    return x


def frame_features(v, model: Model, mode=None) -> np.ndarray:
    """Per-frame global average pool of the final stage, shape (T, C_last)."""
    return features(v, model, mode).mean(axis=(1, 2), dtype=F32)


def head_forward(feats, head_w, head_b) -> np.ndarray:
    return feats @ head_w + head_b


def temporal_pool(frames) -> np.ndarray:
    """Column-wise mean of a (T, D) frame embedding matrix, returned as (1, D)."""
    frames = np.asarray(frames, dtype=F32)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ShapeError(f"frame embeddings must be (T>=1, D), got {frames.shape}")
    return frames.mean(axis=0, keepdims=True, dtype=F32)


def encode_video(v, model: Model, mode=None, normalize_frames=False):
    """Encode one clip. Returns ``(frames (T, D), video (1, D))``; video is L2-normalized."""
    frames = head_forward(frame_features(v, model, mode), model.head_w, model.head_b)
    video, _ = l2_normalize_rows(temporal_pool(frames))
    if normalize_frames:
        frames, _ = l2_normalize_rows(frames)
    return frames, video


# --------------------------------------------------------------------------
# serialization


def save_weights(model: Model) -> bytes:
    meta = {"kind": "model", "fused": int(model.fused), "config_hash": model.config.digest()}
    return wio.pack(model.named_tensors(), meta, model.config.to_text())


def load_weights(data: bytes, mode: str | None = None) -> Model:
    """Load a model store. ``mode="train"`` rejects fused stores."""
    tensors, meta, config_text = wio.unpack(data)
    if meta.get("kind") != "model":
        raise wio.HeaderError("store does not contain a model")
    try:
        config = parse_config(config_text)
    except ConfigError as exc:
        raise wio.HeaderError(f"embedded config invalid: {exc}") from None
    if meta.get("config_hash") != config.digest():
        raise wio.HeaderError("config hash does not match embedded config")
    if meta.get("fused") not in ("0", "1"):
        raise wio.HeaderError(f"bad fused flag {meta.get('fused')!r}")
    fused = meta["fused"] == "1"
    if mode == "train" and fused:
        raise FusedStoreError("cannot load a fused (reparameterized) store as a train-form model")
    return Model.from_tensors(config, tensors, fused)


# --------------------------------------------------------------------------
# accounting


def count_params(obj) -> int:
    """Number of stored scalars in a model, block bundle, or conv."""
    tensors = obj.named_tensors() if isinstance(obj, Model) else obj.tensors()
    return int(sum(np.size(a) for a in tensors.values()))


def conv_flops(conv: FusableConv, grid) -> int:
    """2 * taps * C * T*H*W, plus one multiply-add per element for an unfolded BN."""
    n = int(np.prod(grid)) * conv.channels
    flops = 2 * int(np.prod(conv.kernel.shape[1:])) * n
    if conv.bn is not None:
        flops += 2 * n
    return flops


def attention_flops(tokens: int, c: int) -> int:
    """Q/K/V/O projections ``8*N*C^2`` plus scores and weighted sum ``4*N^2*C``."""
    return 8 * tokens * c * c + 4 * tokens * tokens * c


def block_flops(params, grid) -> int:
    n = int(np.prod(grid))
    if isinstance(params, FusableConv):
        return conv_flops(params, grid)
    if isinstance(params, STRepMixerParams):
        return conv_flops(params.temporal, grid) + conv_flops(params.spatial, grid)
    if isinstance(params, STAttentionParams):
        return conv_flops(params.cpe, grid) + attention_flops(n, params.channels)
    if isinstance(params, ConvFFNParams):
        return conv_flops(params.dw, grid) + 4 * n * params.channels * params.w1.shape[1]
    raise TypeError(f"no FLOP formula for {type(params).__name__}")


def count_flops(model: Model, shape=None) -> int:
    """Multiply-accumulate count x 2 for one clip.

    Counted: stem, stage projections, every conv tap, BN (train form only),
    attention matmuls, ConvFFN pointwise layers and the head. Elementwise ops
    (skip adds, GELU, softmax, LayerNorm, pooling) are not counted.
    """
    cfg = model.config
    t, h, w = (cfg.t, cfg.h, cfg.w) if shape is None else shape[:3]
    grid = (t, h // cfg.patch, w // cfg.patch)
    n = int(np.prod(grid))
    flops = 2 * n * model.stem_w.shape[0] * model.stem_w.shape[1]
    for proj, blocks in zip(model.proj, model.blocks):
        if proj is not None:
            flops += 2 * n * proj[0].shape[0] * proj[0].shape[1]
        for blk in blocks:
            flops += block_flops(blk.mixer, grid) + block_flops(blk.ffn, grid)
    return flops + 2 * t * model.head_w.shape[0] * model.head_w.shape[1]


def fusion_deviation(config: ModelConfig, trials: int, seed: int = 0) -> np.ndarray:
    """Absolute train-vs-fused differences of frame embeddings over random draws.

    Each trial draws a fresh model (random TPE included) and a random clip;
    returns every element-wise difference from every trial, concatenated.
    """
    diffs = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        model = init_model(config, seed=int(rng.integers(2**31)), tpe="random")
        fused, _ = reparameterize_model(model)
        v = rng.uniform(-1.0, 1.0, (config.t, config.h, config.w, 3)).astype(F32)
        a, _ = encode_video(v, model, "train")
        b, _ = encode_video(v, fused, "fused")
        diffs.append(np.abs(a - b).ravel())
    return np.concatenate(diffs) if diffs else np.zeros(0, F32)
