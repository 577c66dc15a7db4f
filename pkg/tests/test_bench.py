import json

import numpy as np
import pytest

from stmx import bench


def statuses(results):
    return {r.name.split(":")[0]: r.status for r in results}


def test_reference_latencies_pass_every_trend(reference_report):
    # mobile-device measurements: attention 31.7x and conv 1.73x at 30 vs 1 layer
    results = bench.trend_check(bench.parse_report(reference_report))
    assert statuses(results) == {"a": "pass", "b": "pass", "c": "pass", "d": "pass"}
    detail = {r.name[0]: r.detail for r in results}
    assert "31.73" in detail["b"] and "1.73" in detail["c"]


def constant_rows(value=1.0):
    rows = []
    for spec in bench.default_grid():
        rows.append({"module": spec.module, "t": spec.t, "h": spec.h, "w": spec.w, "c": spec.c,
                     "layers": spec.layers, "iters": 100, "mean_ms": value, "median_ms": value,
                     "p5_ms": value, "p95_ms": value, "host": "fake"})
    return rows


def test_constant_latency_fails_attention_checks():
    got = statuses(bench.trend_check(constant_rows()))
    assert got == {"a": "fail", "b": "fail", "c": "pass", "d": "pass"}


def test_missing_rows_are_not_run():
    rows = [r for r in constant_rows() if not (r["module"] == "conv" and r["layers"] == 30)]
    got = statuses(bench.trend_check(rows))
    assert got["c"] == "not-run"
    assert statuses(bench.trend_check([])) == {k: "not-run" for k in "abcd"}


def test_one_channel_inversion_tolerated(reference_report):
    rows = bench.parse_report(reference_report)
    for r in rows:
        if r["module"] == "conv" and (r["h"], r["c"], r["layers"]) == (7, 128, 1):
            r["median_ms"] = 0.05  # below the c=64 value: one inversion
    assert statuses(bench.trend_check(rows))["d"] == "pass"
    for r in rows:
        if r["module"] == "conv" and (r["h"], r["c"], r["layers"]) == (7, 384, 1):
            r["median_ms"] = 0.2  # second inversion in the same series
    assert statuses(bench.trend_check(rows))["d"] == "fail"


def test_error_rows_do_not_count(reference_report):
    rows = bench.parse_report(reference_report)
    for r in rows:
        if r["module"] == "attn" and r["layers"] == 30:
            r["median_ms"] = None
    assert statuses(bench.trend_check(rows))["b"] == "not-run"


def test_thresholds_parse_and_override():
    th = bench.parse_thresholds("attn_min_stack_ratio = 40\nsizes = 8x7x7, 8x14x14\n# comment\n")
    assert th.attn_min_stack_ratio == 40 and th.sizes == ((8, 7, 7), (8, 14, 14))
    assert bench.default_thresholds() == bench.TrendThresholds()
    with pytest.raises(ValueError):
        bench.parse_thresholds("speed = fast")
    with pytest.raises(ValueError):
        bench.parse_thresholds("no equals sign")


def test_stricter_threshold_flips_stack_check(reference_report):
    th = bench.parse_thresholds("attn_min_stack_ratio = 40")
    assert statuses(bench.trend_check(bench.parse_report(reference_report), th))["b"] == "fail"


# -- grid and records ----------------------------------------------------------


def test_default_grid_shape():
    specs = bench.default_grid()
    assert len(specs) == 3 * 7 * 3 + 4 * 4
    assert {s.module for s in specs} == {"conv", "attn", "ffn", "convffn"}
    stack = [s for s in specs if s.layers > 1]
    assert {(s.t, s.h, s.w, s.c) for s in stack} == {(8, 14, 14, 512)}
    assert all(s.warmup == 10 and s.iters == 100 for s in specs)


@pytest.mark.parametrize("kwargs", [dict(iters=9), dict(warmup=0), dict(layers=0), dict(module="mlp"), dict(c=0)])
def test_spec_validation(kwargs):
    base = dict(module="conv", t=2, h=4, w=4, c=8)
    base.update(kwargs)
    with pytest.raises(ValueError):
        bench.BenchSpec(**base)


def test_aliases_and_heads():
    assert bench.BenchSpec("st-attention", 1, 2, 2, 512).module == "attn"
    assert bench.BenchSpec("attn", 1, 2, 2, 512).heads == 8
    assert bench.BenchSpec("attn", 1, 2, 2, 64).heads == 1


@pytest.mark.parametrize("module", bench.MODULES)
def test_run_small_spec(module):
    spec = bench.BenchSpec(module, 2, 4, 4, 16, layers=2, warmup=1, iters=10)
    rec = bench.run_bench(spec)
    assert rec.ok and len(rec.samples_ms) == 10
    assert all(s > 0 for s in rec.samples_ms)
    assert rec.p5_ms <= rec.median_ms <= rec.p95_ms
    assert rec.per_layer_ms == pytest.approx(rec.mean_ms / 2)
    assert "kernels" in rec.host


def test_seeded_stack_is_reproducible():
    spec = bench.BenchSpec("attn", 2, 3, 3, 16, layers=2, warmup=1, iters=10)
    fa, _ = bench.build_stack(spec, np.random.default_rng(0))
    fb, _ = bench.build_stack(spec, np.random.default_rng(0))
    x = np.ones((2, 3, 3, 16), np.float32)
    np.testing.assert_array_equal(fa(x), fb(x))


def test_csv_round_trip_and_error_rows(monkeypatch):
    good = bench.BenchSpec("conv", 1, 3, 3, 4, warmup=1, iters=10)
    bad = bench.BenchSpec("conv", 1, 3, 3, 5, warmup=1, iters=10)
    real = bench.run_bench

    def flaky(spec):
        if spec.c == 5:
            raise MemoryError
        return real(spec)

    monkeypatch.setattr(bench, "run_bench", flaky)
    records = bench.run_grid([good, bad])
    assert records[0].ok and not records[1].ok
    text = bench.format_csv(records)
    lines = text.splitlines()
    assert lines[0] == ",".join(bench.COLUMNS)
    assert lines[2].startswith("conv,1,3,3,5,1,10,,,,,error: ")
    rows = bench.parse_report(text)
    assert rows[0]["median_ms"] == pytest.approx(records[0].median_ms, abs=1e-6)  # CSV keeps 1 ns resolution
    assert rows[1]["median_ms"] is None
    side = bench.record_dicts(records)
    assert json.loads(json.dumps(side))[0]["spec"]["c"] == 4


def test_empty_grid_is_header_only():
    assert bench.format_csv(bench.run_grid([])) == ",".join(bench.COLUMNS) + "\n"


def test_report_columns_enforced():
    with pytest.raises(ValueError):
        bench.parse_report("module,t\nconv,1\n")


def test_host_descriptor_has_no_commas():
    assert "," not in bench.host_descriptor()
