"""Video-text contrastive objective, its analytic gradients, and a toy trainer.

The loss is symmetric InfoNCE over cosine similarities scaled by ``1/tau``::

    L_V2T = -(1/N) sum_i log softmax_j(sim(v_i, t_j) / tau)[i]
    L_T2V = -(1/N) sum_i log softmax_j(sim(t_i, v_j) / tau)[i]
    L_VTC = (L_V2T + L_T2V) / 2

The trainer differentiates the video encoder by central finite differences
and uses the analytic loss-layer gradient, so only small trainable subsets
are practical.
"""

from __future__ import annotations

import fnmatch
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import Model, frame_features, head_forward, temporal_pool
from .retrieval import build_sim, recall_at_1
from .tensor import F32, ShapeError, l2_normalize_rows

log = logging.getLogger(__name__)

TAU_MIN, TAU_MAX = 0.01, 100.0


class BudgetError(ValueError):
    """Too many trainable parameters for finite-difference training."""


@dataclass(frozen=True, eq=False)
class VTCBatch:
    v: np.ndarray
    t: np.ndarray
    tau: float

    def __post_init__(self):
        v = np.asarray(self.v, dtype=F32)
        t = np.asarray(self.t, dtype=F32)
        if v.ndim != 2 or v.shape != t.shape:
            raise ShapeError(f"video and text embeddings must be equal (N, D) shapes, got {v.shape}, {t.shape}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        for name, e in (("video", v), ("text", t)):
            if np.any(np.sum(e.astype(np.float64) ** 2, axis=1) == 0):
                raise ValueError(f"{name} embeddings contain a zero-norm row")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", t)


def _log_softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _logits(b: VTCBatch):
    vn, _ = l2_normalize_rows(b.v)
    tn, _ = l2_normalize_rows(b.t)
    sim = vn @ tn.T
    return vn, tn, sim, sim / F32(b.tau)


def vtc_loss(b: VTCBatch) -> tuple[float, float, float]:
    """Return ``(L_VTC, L_V2T, L_T2V)`` with mean reduction over the batch."""
    _, _, _, logits = _logits(b)
    n = logits.shape[0]
    idx = np.arange(n)
    v2t = -float(_log_softmax(logits, 1)[idx, idx].sum()) / n
    t2v = -float(_log_softmax(logits, 0)[idx, idx].sum()) / n
    return 0.5 * (v2t + t2v), v2t, t2v


@dataclass
class VTCGrad:
    v: np.ndarray
    t: np.ndarray
    tau: float


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def vtc_loss_grad(b: VTCBatch) -> VTCGrad:
    """Analytic gradient of ``L_VTC`` w.r.t. raw video rows, text rows and tau."""
    vn, tn, sim, logits = _logits(b)
    n = logits.shape[0]
    eye = np.eye(n, dtype=F32)
    # d L / d logits: row softmax for V2T, column softmax for T2V
    g = (_softmax(logits, 1) - eye + _softmax(logits, 0) - eye) * F32(0.5 / n)
    d_sim = g / F32(b.tau)
    d_tau = -float((g * sim).sum()) / (b.tau * b.tau)
    d_vn = d_sim @ tn
    d_tn = d_sim.T @ vn

    def through_norm(x, xn, d_xn):
        norm = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True)).astype(F32)
        return (d_xn - xn * (xn * d_xn).sum(axis=1, keepdims=True)) / norm

    return VTCGrad(through_norm(b.v, vn, d_vn), through_norm(b.t, tn, d_tn), d_tau)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True, eq=False)
class ClusterDataset:
    """Paired clips and caption embeddings drawn around K orthogonal centers."""

    train_clips: np.ndarray   # (N, T, H, W, 3)
    train_labels: np.ndarray  # (N,)
    test_clips: np.ndarray    # (K, T, H, W, 3), one per cluster, in label order
    centers: np.ndarray       # (K, D) caption embeddings

    @property
    def k(self):
        return self.centers.shape[0]

    def captions(self, labels):
        return self.centers[labels]


def make_cluster_dataset(config, k=4, per_cluster=4, noise=0.05, seed=0) -> ClusterDataset:
    """Captions are orthonormal centers; each clip renders center + noise.

    Rendering projects the noisy sample onto the centers and maps those K
    coordinates through a fixed random (K, 3) matrix to one RGB value that
    fills every pixel of every frame (a constant-valued clip), so the signal
    survives global average pooling.
    """
    d = config.embed_dim
    if k > d:
        raise ValueError(f"cannot draw {k} orthogonal centers in {d} dims")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    centers = q.T
    render = centers.T @ rng.standard_normal((k, 3))

    def clips(labels):
        z = centers[labels] + noise * rng.standard_normal((len(labels), d))
        rgb = (z @ render)[:, None, None, None, :]
        return np.broadcast_to(rgb, (len(labels), config.t, config.h, config.w, 3)).astype(F32)

    train_labels = np.repeat(np.arange(k), per_cluster)
    return ClusterDataset(clips(train_labels), train_labels, clips(np.arange(k)), centers.astype(F32))


# --------------------------------------------------------------------------
# toy trainer


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 8
    max_steps: int | None = None
    batch_size: int = 4
    warmup: float = 0.1
    seed: int = 0
    tau: float = 0.07
    tau_lr: float = 0.05
    trainable: tuple[str, ...] = ("head.weight",)
    fd_step: float = 1e-3
    max_params: int = 4096

    def __post_init__(self):
        if self.lr < 0 or self.tau_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup is a fraction of total steps in [0, 1)")
        if not TAU_MIN <= self.tau <= TAU_MAX:
            raise ValueError(f"initial tau must lie in [{TAU_MIN}, {TAU_MAX}]")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")


@dataclass
class TrainResult:
    model: Model
    tau: float
    records: list = field(default_factory=list)

    @property
    def initial_loss(self):
        return self.records[0]["loss"]

    @property
    def final_loss(self):
        return self.records[-1]["loss"]

    @property
    def final_r1(self):
        return self.records[-1]["r1_t2v"]

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def select_trainable(model: Model, patterns) -> list[str]:
    names = [n for n in model.named_tensors() if any(fnmatch.fnmatchcase(n, p) for p in patterns)]
    if not names:
        raise ValueError(f"no parameters match {list(patterns)}")
    return names


class _Embedder:
    """Maps a flat trainable-parameter vector to video embeddings for a set of clips.

    When only head tensors are trainable the frozen trunk's frame features are
    computed once and reused.
    """

    def __init__(self, model: Model, names, clips):
        self.model = model
        self.names = names
        tensors = model.named_tensors()
        self.shapes = [tensors[n].shape for n in names]
        self.sizes = [tensors[n].size for n in names]
        self.cached = all(n.startswith("head.") for n in names)
        self.clips = clips
        if self.cached:
            self.feats = np.stack([frame_features(c, model) for c in clips])

    def unflatten(self, theta):
        out, i = {}, 0
        for n, shape, size in zip(self.names, self.shapes, self.sizes):
            out[n] = theta[i:i + size].reshape(shape).astype(F32)
            i += size
        return out

    def __call__(self, theta, idx):
        upd = self.unflatten(theta)
        if self.cached:
            w = upd.get("head.weight", self.model.head_w)
            b = upd.get("head.bias", self.model.head_b)
            frames = head_forward(self.feats[idx], w, b)          # (n, T, D)
            return frames.mean(axis=1, dtype=F32)
        m = self.model.with_tensors(upd)
        return np.concatenate([
            temporal_pool(head_forward(frame_features(self.clips[i], m), m.head_w, m.head_b)) for i in idx
        ])


def _round_robin(labels, rng=None):
    """Interleave clusters so consecutive items come from different clusters."""
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    if rng is not None:
        groups = [rng.permutation(g) for g in groups]
    longest = max(len(g) for g in groups)
    return np.array([g[i] for i in range(longest) for g in groups if i < len(g)])


def _batches(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def train_toy(model: Model, data: ClusterDataset, cfg: TrainConfig = TrainConfig(), log_path=None) -> TrainResult:
    """Fine-tune the trainable subset of ``model`` against fixed caption embeddings.

    Each step takes the analytic VTC gradient w.r.t. the video embeddings and
    contracts it with central finite-difference derivatives of the embeddings
    w.r.t. each trainable scalar. Temperature is learned in log space and
    clamped to [0.01, 100]. Every record carries the full-train-set loss after
    the step and held-out Recall@1.
    """
    if model.fused:
        raise ValueError("train_toy needs a train-form model")
    names = select_trainable(model, cfg.trainable)
    tensors = model.named_tensors()
    n_params = sum(tensors[n].size for n in names)
    if n_params > cfg.max_params:
        raise BudgetError(
            f"{n_params} trainable parameters exceed the finite-difference budget of {cfg.max_params}; "
            "train a smaller subset (e.g. 'head.weight' or '*.tpe') or shrink the config"
        )
    rng = np.random.default_rng(cfg.seed)
    clips = np.concatenate([data.train_clips, data.test_clips])
    n_train = len(data.train_clips)
    test_idx = np.arange(n_train, len(clips))
    embed = _Embedder(model, names, clips)
    theta = np.concatenate([tensors[n].ravel() for n in names]).astype(F32)
    log_tau = np.log(cfg.tau)
    eval_batches = _batches(_round_robin(data.train_labels), cfg.batch_size)

    def train_loss(theta, tau):
        losses = [vtc_loss(VTCBatch(embed(theta, b), data.captions(data.train_labels[b]), tau))[0]
                  for b in eval_batches]
        return float(np.mean(losses))

    def held_out(theta):
        sim = build_sim(embed(theta, test_idx), data.centers)
        gt = np.arange(data.k)
        return recall_at_1(sim.T, gt), recall_at_1(sim, gt)

    def record(step, epoch, lr, batch_loss):
        tau = float(np.exp(log_tau))
        r1_t2v, r1_v2t = held_out(theta)
        rec = {"step": step, "epoch": epoch, "loss": train_loss(theta, tau), "batch_loss": batch_loss,
               "r1_t2v": r1_t2v, "r1_v2t": r1_v2t, "tau": tau, "lr": lr}
        records.append(rec)
        log.info("step %d loss %.6f r1_t2v %.3f tau %.4f", step, rec["loss"], r1_t2v, tau)

    records: list = []
    record(0, 0, 0.0, None)
    steps_per_epoch = len(eval_batches)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    warm = max(1, int(round(cfg.warmup * total)))
    h = F32(cfg.fd_step)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for batch in _batches(_round_robin(data.train_labels, rng), cfg.batch_size):
            if step == total:
                break
            step += 1
            scale = min(1.0, step / warm)
            tau = float(np.exp(log_tau))
            b = VTCBatch(embed(theta, batch), data.captions(data.train_labels[batch]), tau)
            batch_loss = vtc_loss(b)[0]
            g = vtc_loss_grad(b)
            grad = np.empty_like(theta)
            for i in range(theta.size):
                old = theta[i]
                theta[i] = old + h
                plus = embed(theta, batch)
                theta[i] = old - h
                minus = embed(theta, batch)
                theta[i] = old
                grad[i] = float((g.v * (plus - minus)).sum()) / (2 * float(h))
            theta -= F32(cfg.lr * scale) * grad
            log_tau = float(np.clip(log_tau - cfg.tau_lr * scale * g.tau * tau, np.log(TAU_MIN), np.log(TAU_MAX)))
            record(step, epoch, cfg.lr * scale, batch_loss)

    result = TrainResult(model.with_tensors(embed.unflatten(theta)), float(np.exp(log_tau)), records)
    if log_path is not None:
        result.write_jsonl(log_path)
    return result
