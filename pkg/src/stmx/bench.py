"""Host-CPU latency decomposition of the block kinds.

A grid point builds a stack of identical fused blocks with seeded random
parameters, runs warmup iterations, then times each full stack forward with
a monotonic clock. Kernels run single-threaded (BLAS pool limited to one
thread, process pinned to one CPU where the platform allows).
"""

from __future__ import annotations

import contextlib
import csv
import io
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .reparam import (
    convffn_forward,
    ffn_forward,
    random_attention,
    random_convffn,
    random_ffn,
    random_repmixer,
    reparameterize_block,
    st_attention_forward,
    st_repmixer_forward,
)
from .tensor import F32

COLUMNS = ("module", "t", "h", "w", "c", "layers", "iters", "mean_ms", "median_ms", "p5_ms", "p95_ms", "host")
ALIASES = {"st-repmixer": "conv", "st-attention": "attn", "repmixer": "conv", "attention": "attn"}
MODULES = ("conv", "attn", "ffn", "convffn")

GRID_SIZES = ((8, 7, 7), (8, 14, 14), (8, 16, 16))
GRID_DIMS = (64, 128, 256, 384, 512, 768, 1024)
CHANNEL_MODULES = ("conv", "attn", "convffn")
STACK_LAYERS = (1, 10, 20, 30)
STACK_MODULES = ("conv", "attn", "ffn", "convffn")


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchSpec:
    module: str
    t: int
    h: int
    w: int
    c: int
    layers: int = 1
    warmup: int = 10
    iters: int = 100
    seed: int = 0
    head_dim: int = 64

    def __post_init__(self):
        module = ALIASES.get(self.module, self.module)
        object.__setattr__(self, "module", module)
        if module not in MODULES:
            raise ValueError(f"unknown module {self.module!r}; expected one of {MODULES}")
        if min(self.t, self.h, self.w, self.c) < 1:
            raise ValueError(f"all dimensions must be >= 1: {self.t}x{self.h}x{self.w}, c={self.c}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.iters < 10:
            raise ValueError("timed iterations must be >= 10")

    @property
    def heads(self):
        return max(1, self.c // self.head_dim) if self.c % max(1, self.c // self.head_dim) == 0 else 1

    def label(self):
        return f"{self.module} {self.t}x{self.h}x{self.w} c={self.c} layers={self.layers}"


@dataclass
class LatencyRecord:
    spec: BenchSpec
    samples_ms: list = field(default_factory=list)
    host: str = ""
    error: str | None = None

    @property
    def ok(self):
        return self.error is None and bool(self.samples_ms)

    def _stat(self, fn):
        return float(fn(np.asarray(self.samples_ms))) if self.ok else float("nan")

    @property
    def mean_ms(self):
        return self._stat(np.mean)

    @property
    def median_ms(self):
        return self._stat(np.median)

    @property
    def p5_ms(self):
        return self._stat(lambda s: np.percentile(s, 5))

    @property
    def p95_ms(self):
        return self._stat(lambda s: np.percentile(s, 95))

    @property
    def per_layer_ms(self):
        """Mean latency divided by stack depth (the averaged-over-a-stack protocol)."""
        return self.mean_ms / self.spec.layers

    def row(self) -> dict:
        s = self.spec
        row = {"module": s.module, "t": s.t, "h": s.h, "w": s.w, "c": s.c, "layers": s.layers, "iters": s.iters}
        if self.ok:
            row.update(mean_ms=f"{self.mean_ms:.6f}", median_ms=f"{self.median_ms:.6f}",
                       p5_ms=f"{self.p5_ms:.6f}", p95_ms=f"{self.p95_ms:.6f}", host=self.host)
        else:
            row.update(mean_ms="", median_ms="", p5_ms="", p95_ms="", host=f"error: {self.error}")
        return row


def host_descriptor() -> str:
    cpu = platform.processor() or ""
    with contextlib.suppress(OSError):
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    desc = (f"{platform.machine()} {cpu} | {platform.system()} {platform.release()} | "
            f"python {platform.python_version()} numpy {np.__version__} | kernels {kernels.BACKEND}")
    return " ".join(desc.replace(",", " ").split())


@contextlib.contextmanager
def single_thread():
    """Limit BLAS/OpenMP pools to one thread and pin to one CPU when supported."""
    affinity = None
    if hasattr(os, "sched_getaffinity"):
        affinity = os.sched_getaffinity(0)
        with contextlib.suppress(OSError):
            os.sched_setaffinity(0, {min(affinity)})
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if affinity is not None:
            with contextlib.suppress(OSError):
                os.sched_setaffinity(0, affinity)


def build_stack(spec: BenchSpec, rng):
    """Return ``(forward, layers)``: a forward function and fused per-layer params."""
    c = spec.c
    if spec.module == "conv":
        layers = [reparameterize_block(random_repmixer(rng, c))[0] for _ in range(spec.layers)]
        fwd = st_repmixer_forward
    elif spec.module == "attn":
        layers = [reparameterize_block(random_attention(rng, spec.t, c, spec.heads))[0] for _ in range(spec.layers)]
        fwd = st_attention_forward
    elif spec.module == "convffn":
        layers = [reparameterize_block(random_convffn(rng, c))[0] for _ in range(spec.layers)]
        fwd = convffn_forward
    else:
        layers = [random_ffn(rng, c) for _ in range(spec.layers)]
        fwd = ffn_forward

    def forward(x):
        for p in layers:
            x = fwd(x, p, "fused")
        return x

    return forward, layers


def run_bench(spec: BenchSpec) -> LatencyRecord:
    """Time one grid point. Raises :class:`BenchError` on construction failure or
    non-finite output."""
    rng = np.random.default_rng(spec.seed)
    try:
        forward, _ = build_stack(spec, rng)
        x = rng.uniform(-1.0, 1.0, (spec.t, spec.h, spec.w, spec.c)).astype(F32)
    except MemoryError:
        raise BenchError(f"out of memory constructing {spec.label()}") from None
    samples = []
    with single_thread():
        for _ in range(spec.warmup):
            y = forward(x)
        if not np.all(np.isfinite(y)):
            raise BenchError(f"non-finite output from {spec.label()}")
        for _ in range(spec.iters):
            start = time.perf_counter_ns()
            forward(x)
            samples.append((time.perf_counter_ns() - start) / 1e6)
    return LatencyRecord(spec, samples, host_descriptor())


def _run_safe(spec):
    try:
        return run_bench(spec)
    except (BenchError, MemoryError, ValueError) as exc:
        return LatencyRecord(spec, [], host_descriptor(), error=str(exc) or type(exc).__name__)


def run_grid(specs, parallel: int = 0, progress=None) -> list[LatencyRecord]:
    """Run every spec; failures become error rows and the grid continues.

    ``parallel > 1`` runs specs in separate worker processes.
    """
    specs = list(specs)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            records = list(pool.map(_run_safe, specs))
    else:
        records = []
        for spec in specs:
            records.append(_run_safe(spec))
            if progress is not None:
                progress(records[-1])
    return records


def default_grid(warmup=10, iters=100, seed=0) -> list[BenchSpec]:
    """Size x dim x module sweep (1 layer), then the layer sweep at 8x14x14, dim 512."""
    specs = [BenchSpec(m, *size, c, 1, warmup, iters, seed)
             for size in GRID_SIZES for c in GRID_DIMS for m in CHANNEL_MODULES]
    specs += [BenchSpec(m, 8, 14, 14, 512, n, warmup, iters, seed)
              for n in STACK_LAYERS for m in STACK_MODULES]
    return specs


def format_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(rec.row())
    return buf.getvalue()


def parse_report(text: str) -> list[dict]:
    """Parse a CSV report into typed rows; error rows carry ``median_ms=None``."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != COLUMNS:
        raise ValueError(f"report columns must be {','.join(COLUMNS)}")
    rows = []
    for row in reader:
        out = {"module": row["module"], "host": row["host"]}
        for k in ("t", "h", "w", "c", "layers", "iters"):
            out[k] = int(row[k])
        for k in ("mean_ms", "median_ms", "p5_ms", "p95_ms"):
            out[k] = float(row[k]) if row[k] else None
        rows.append(out)
    return rows


# --------------------------------------------------------------------------
# trend checks


@dataclass(frozen=True)
class TrendThresholds:
    attn_min_stack_ratio: float = 20.0
    conv_max_stack_ratio: float = 5.0
    channel_inversions_allowed: int = 1
    stack_low: int = 1
    stack_high: int = 30
    stack_dim: int = 512
    stack_size: tuple = (8, 14, 14)
    sizes: tuple = GRID_SIZES
    dims: tuple = GRID_DIMS
    channel_modules: tuple = CHANNEL_MODULES


def _size(text):
    return tuple(int(v) for v in text.strip().split("x"))


def parse_thresholds(text: str) -> TrendThresholds:
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        if key in ("attn_min_stack_ratio", "conv_max_stack_ratio"):
            vals[key] = float(value)
        elif key in ("channel_inversions_allowed", "stack_low", "stack_high", "stack_dim"):
            vals[key] = int(value)
        elif key == "stack_size":
            vals[key] = _size(value)
        elif key == "sizes":
            vals[key] = tuple(_size(v) for v in value.split(","))
        elif key == "dims":
            vals[key] = tuple(int(v) for v in value.split(","))
        elif key == "channel_modules":
            vals[key] = tuple(v.strip() for v in value.split(","))
        else:
            raise ValueError(f"line {lineno}: unknown threshold {key!r}")
    return TrendThresholds(**vals)


def default_thresholds() -> TrendThresholds:
    return parse_thresholds(resources.files("stmx").joinpath("data/trend.cfg").read_text())


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "not-run"
    detail: str

    @property
    def passed(self):
        return self.status == "pass"


def _lookup(rows):
    table = {}
    for r in rows:
        if r["median_ms"] is None:
            continue
        table.setdefault((r["module"], r["t"], r["h"], r["w"], r["c"], r["layers"]), r["median_ms"])
    return table


def trend_check(rows, th: TrendThresholds | None = None) -> list[CheckResult]:
    """Evaluate the four latency trend assertions on a parsed report.

    Missing rows mark a check ``not-run``; it is never reported as passing.
    """
    th = th or default_thresholds()
    med = _lookup(rows)
    out = []

    # (a) attention superlinear in token count at every dim
    missing, bad, notes = [], [], []
    for c in th.dims:
        series = [med.get(("attn", *s, c, 1)) for s in th.sizes]
        if any(v is None for v in series):
            missing.append(c)
            continue
        tokens = [np.prod(s) for s in th.sizes]
        increasing = all(b > a for a, b in zip(series, series[1:]))
        ratio, token_ratio = series[-1] / series[0], tokens[-1] / tokens[0]
        notes.append(f"c={c}: x{ratio:.2f} vs tokens x{token_ratio:.2f}")
        if not (increasing and ratio > token_ratio):
            bad.append(c)
    out.append(_result("a: attention superlinear in tokens", missing, bad, notes))

    # (b) / (c) stacking ratios
    for name, module, bound, above in (
        ("b: attention stack ratio", "attn", th.attn_min_stack_ratio, True),
        ("c: conv stack ratio", "conv", th.conv_max_stack_ratio, False),
    ):
        lo = med.get((module, *th.stack_size, th.stack_dim, th.stack_low))
        hi = med.get((module, *th.stack_size, th.stack_dim, th.stack_high))
        if lo is None or hi is None:
            out.append(CheckResult(name, "not-run", "missing stack rows"))
            continue
        ratio = hi / lo
        ok = ratio >= bound if above else ratio <= bound
        rel = ">=" if above else "<="
        out.append(CheckResult(name, "pass" if ok else "fail",
                               f"{th.stack_high}/{th.stack_low} layers = {ratio:.2f} (need {rel} {bound:g})"))

    # (d) non-decreasing in channel dim, tolerating a bounded number of inversions
    missing, bad, notes = [], [], []
    for module in th.channel_modules:
        for s in th.sizes:
            series = [med.get((module, *s, c, 1)) for c in th.dims]
            key = f"{module}@{'x'.join(map(str, s))}"
            if any(v is None for v in series):
                missing.append(key)
                continue
            inversions = sum(b < a for a, b in zip(series, series[1:]))
            notes.append(f"{key}: {inversions} inversions")
            if inversions > th.channel_inversions_allowed:
                bad.append(key)
    out.append(_result("d: latency non-decreasing in channels", missing, bad, notes))
    return out


def _result(name, missing, bad, notes):
    if missing:
        return CheckResult(name, "not-run", f"missing rows for {missing}")
    if bad:
        return CheckResult(name, "fail", f"violations at {bad}; " + "; ".join(notes))
    return CheckResult(name, "pass", "; ".join(notes))


def record_dicts(records) -> list[dict]:
    """Raw per-iteration samples for sidecar output."""
    return [{"spec": asdict(r.spec), "samples_ms": r.samples_ms, "host": r.host, "error": r.error} for r in records]
