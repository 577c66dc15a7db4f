"""Retrieval and zero-shot classification metrics over embedding matrices.

Ties in every argmax are broken toward the lowest index.
"""

from __future__ import annotations

import numpy as np

from . import weights as wio
from .tensor import F32, ShapeError, l2_normalize_rows


class EmbeddingParseError(ValueError):
    def __init__(self, path, line, message):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {message}")


def _normalized(e, name):
    e = np.asarray(e, dtype=F32)
    out, zero = l2_normalize_rows(e)
    if zero.any():
        raise ValueError(f"{name} has zero-norm rows at {np.flatnonzero(zero)[:5].tolist()}")
    return out


def _dot_rows(a, b, chunk_elems=1 << 22):
    """``a @ b.T`` with one fixed reduction per entry.

    BLAS accumulation order depends on a row's position, so duplicated rows can
    score differently in the last bit and break lowest-index tie-breaking.
    """
    out = np.empty((a.shape[0], b.shape[0]), dtype=F32)
    step = max(1, chunk_elems // max(1, b.size))
    for i in range(0, a.shape[0], step):
        out[i:i + step] = (a[i:i + step, None, :] * b[None, :, :]).sum(axis=2)
    return out


def build_sim(queries, gallery) -> np.ndarray:
    """Cosine similarity matrix, rows = queries, columns = gallery items."""
    q = _normalized(queries, "queries")
    g = _normalized(gallery, "gallery")
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"embedding dims differ: {q.shape[1]} vs {g.shape[1]}")
    return _dot_rows(q, g)


def recall_at_1(sim, ground_truth) -> float:
    """Fraction of query rows whose top column is the ground-truth index."""
    sim = np.asarray(sim)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if sim.ndim != 2 or gt.shape != (sim.shape[0],):
        raise ShapeError(f"need one ground-truth index per row: sim {sim.shape}, gt {gt.shape}")
    if gt.size and (gt.min() < 0 or gt.max() >= sim.shape[1]):
        raise ValueError(f"ground-truth index out of range [0, {sim.shape[1]})")
    if sim.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(sim, axis=1) == gt))


def retrieval_r1(videos, texts) -> dict[str, float]:
    """T2V and V2T Recall@1 for paired rows (row i of each side matches)."""
    sim = build_sim(videos, texts)
    gt = np.arange(sim.shape[0])
    return {"t2v": recall_at_1(sim.T, gt), "v2t": recall_at_1(sim, gt)}


def multiple_choice_accuracy(videos, candidates, correct) -> float:
    """Each video picks the most similar of its own candidate captions.

    ``candidates`` is a sequence with one (K_i, D) array per video.
    """
    videos = _normalized(videos, "videos")
    correct = np.asarray(correct, dtype=np.int64)
    if len(candidates) != len(videos) or correct.shape != (len(videos),):
        raise ShapeError("need one candidate set and one correct index per video")
    hits = 0
    for i, cand in enumerate(candidates):
        cand = np.asarray(cand, dtype=F32)
        if cand.ndim != 2 or cand.shape[0] < 2:
            raise ValueError(f"video {i}: need at least 2 candidates, got {cand.shape[0] if cand.ndim == 2 else 0}")
        if not 0 <= correct[i] < cand.shape[0]:
            raise ValueError(f"video {i}: correct index {correct[i]} out of range")
        if cand.shape[1] != videos.shape[1]:
            raise ShapeError(f"video {i}: candidate dim {cand.shape[1]} != {videos.shape[1]}")
        scores = _dot_rows(videos[i:i + 1], _normalized(cand, f"candidates[{i}]"))[0]
        hits += int(np.argmax(scores) == correct[i])
    return hits / len(videos) if len(videos) else 0.0


def prompt(label: str, template: str = "a video of {label}") -> str:
    return template.format(label=label)


# --------------------------------------------------------------------------
# embedding files


def write_csv(path, emb) -> None:
    emb = np.asarray(emb, dtype=F32)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={emb.shape[1]},count={emb.shape[0]}\n")
        for row in emb:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise EmbeddingParseError(path, 1, "empty file, expected header 'dim=D,count=N'")
    header = dict(part.partition("=")[::2] for part in lines[0].strip().split(","))
    try:
        dim, count = int(header["dim"]), int(header["count"])
    except (KeyError, ValueError):
        raise EmbeddingParseError(path, 1, f"bad header {lines[0]!r}, expected 'dim=D,count=N'") from None
    rows = [ln for ln in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != count:
        raise EmbeddingParseError(path, len(rows) + 1, f"header declares {count} rows, found {len(rows)}")
    out = np.empty((count, dim), dtype=F32)
    for i, line in enumerate(rows):
        fields = line.split(",")
        if len(fields) != dim:
            raise EmbeddingParseError(path, i + 2, f"expected {dim} values, found {len(fields)}")
        try:
            out[i] = [float(f) for f in fields]
        except ValueError as exc:
            raise EmbeddingParseError(path, i + 2, str(exc)) from None
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out))[0, 0])
        raise EmbeddingParseError(path, bad + 2, "non-finite value")
    return out


def write_store(path, emb) -> None:
    with open(path, "wb") as fh:
        fh.write(wio.pack({"embeddings": np.asarray(emb, dtype=F32)}, {"kind": "embeddings"}))


def read_embeddings(path) -> np.ndarray:
    """Load embeddings from an STMX store or a CSV file (detected by magic)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if wio.is_store(data):
        tensors, _, _ = wio.unpack(data)
        if "embeddings" not in tensors or tensors["embeddings"].ndim != 2:
            raise wio.ShapeTableError(f"{path}: store has no 2-D 'embeddings' tensor")
        return tensors["embeddings"]
    return read_csv(path)
