import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densemae.bench import (BenchResult, bench_forward, bench_variants,
                            format_bench_table, join_eval_metrics,
                            mark_dominated, read_bench_csv, variant_id,
                            write_bench_csv, write_pareto_csv,
                            write_pareto_svg)
from densemae.models import BENCH_VARIANTS, build_seg_model
from densemae.nn import BatchNorm2d


def tiny_model(head="dwres", emb_dim=16, refine=False):
    m = build_seg_model(emb_dim, head, refine, seed=0)
    m.to_dtype(np.float32)
    return m


def quick_bench(model, model_id="m", batch=1, input_size=32, warmup=1, iters=4):
    return bench_forward(model, model_id, batch=batch, input_size=input_size,
                         warmup=warmup, iters=iters)


def fake_result(model_id, median, p95, fp16, ap=None, fire_f1=None):
    return BenchResult(model_id=model_id, batch=8, input_size=224, threads=1,
                       warmup=10, params=fp16 // 2, fp16_bytes=fp16,
                       median_ms=median, p95_ms=p95,
                       samples_ms=[median, p95], ap=ap, fire_f1=fire_f1)


class TestBenchForward:
    def test_sample_count_excludes_warmup(self):
        r = quick_bench(tiny_model(), warmup=3, iters=5)
        assert len(r.samples_ms) == 5
        assert r.warmup == 3

    def test_median_le_p95(self):
        r = quick_bench(tiny_model(), iters=6)
        assert r.median_ms <= r.p95_ms
        # stored samples are rounded to 1e-4 ms; stats come from raw values
        assert r.median_ms == pytest.approx(np.median(r.samples_ms), abs=1e-3)
        assert r.p95_ms == pytest.approx(np.percentile(r.samples_ms, 95), abs=1e-3)

    def test_zero_iters_rejected(self):
        with pytest.raises(ValueError, match="iters"):
            quick_bench(tiny_model(), iters=0)
        with pytest.raises(ValueError, match="warmup"):
            quick_bench(tiny_model(), warmup=-1)

    def test_declared_threads_comes_from_env(self, monkeypatch):
        monkeypatch.setenv("DM_THREADS", "3")
        r = quick_bench(tiny_model())
        assert r.threads == 3

    def test_fresh_batchnorm_is_seeded_not_timed(self):
        model = tiny_model(head="trt")
        bn = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
        assert bn and all(int(m.num_batches[0]) == 0 for m in bn)
        r = quick_bench(model, iters=3)
        # exactly the one seeding forward hit train mode
        assert all(int(m.num_batches[0]) == 1 for m in bn)
        assert len(r.samples_ms) == 3

    def test_larger_batch_costs_more(self):
        # doubling the batch must raise median batch latency; 2x work is far
        # beyond this box's jitter at these sizes
        model = tiny_model()
        small = bench_forward(model, "m", batch=2, input_size=64,
                              warmup=2, iters=7)
        big = bench_forward(model, "m", batch=4, input_size=64,
                            warmup=2, iters=7)
        assert big.median_ms > small.median_ms

    def test_variants_build_by_name(self):
        rows = bench_variants(["emb32_trt"], batch=1, input_size=32,
                              warmup=0, iters=2)
        assert rows[0].model_id == "emb32_trt"
        assert rows[0].params > 0
        assert rows[0].fp16_bytes == 2 * rows[0].params or rows[0].fp16_bytes > 0

    def test_variant_id_round_trip(self):
        for name, spec in BENCH_VARIANTS.items():
            assert variant_id(spec) == name


class TestCsv:
    def test_round_trip(self, tmp_path):
        rows = [fake_result("a", 10.0, 12.5, 1000, ap=0.5, fire_f1=0.25),
                fake_result("b", 20.0, 21.0, 2000)]
        p = tmp_path / "bench.csv"
        write_bench_csv(rows, p)
        back = read_bench_csv(p)
        assert [r.model_id for r in back] == ["a", "b"]
        assert back[0].ap == pytest.approx(0.5)
        assert back[0].fire_f1 == pytest.approx(0.25)
        assert back[1].ap is None and back[1].fire_f1 is None
        assert back[0].samples_ms == pytest.approx(rows[0].samples_ms)
        assert back[1].fp16_bytes == 2000 and back[1].threads == 1

    def test_rejects_foreign_csv(self, tmp_path):
        p = tmp_path / "other.csv"
        p.write_text("x,y\n1,2\n")
        with pytest.raises(ValueError, match="bench CSV"):
            read_bench_csv(p)


class TestJoin:
    def test_metrics_attach_by_variant(self):
        rows = [fake_result("emb32_dwres", 10, 11, 1000),
                fake_result("emb32_trt", 9, 10, 2000)]
        reports = [{"model_config": {"emb_dim": 32, "head": "dwres",
                                     "refine": False},
                    "pixel_ap": 0.61,
                    "fire": {"f1": 0.57}}]
        join_eval_metrics(rows, reports)
        assert rows[0].ap == pytest.approx(0.61)
        assert rows[0].fire_f1 == pytest.approx(0.57)
        assert rows[1].ap is None


def oracle_dominated(rows):
    # straight from the invariant: dominated iff some other row is <= in
    # latency and footprint, >= in AP, with at least one strict
    out = []
    for i, a in enumerate(rows):
        dom = False
        for j, b in enumerate(rows):
            if i == j:
                continue
            le = b[0] <= a[0] and b[1] <= a[1] and b[2] >= a[2]
            strict = b[0] < a[0] or b[1] < a[1] or b[2] > a[2]
            if le and strict:
                dom = True
        out.append(dom)
    return out


class TestDominance:
    @given(st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5),
                              st.integers(1, 5)),
                    min_size=1, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_matches_oracle(self, raw):
        rows = [(float(a), float(b), float(c) / 5.0) for a, b, c in raw]
        assert mark_dominated(rows) == oracle_dominated(rows)

    def test_duplicate_rows_are_both_frontier(self):
        rows = [(10.0, 100.0, 0.5), (10.0, 100.0, 0.5)]
        assert mark_dominated(rows) == [False, False]

    def test_single_row_not_dominated(self):
        assert mark_dominated([(1.0, 1.0, 0.1)]) == [False]


class TestParetoOutputs:
    def rows(self):
        return [fake_result("fast", 10.0, 11.0, 1000, ap=0.50),
                fake_result("slowworse", 20.0, 22.0, 2000, ap=0.40),
                fake_result("slowbetter", 30.0, 33.0, 3000, ap=0.70)]

    def test_csv_marks_dominated(self, tmp_path):
        p = tmp_path / "pareto.csv"
        flags = write_pareto_csv(self.rows(), p)
        assert flags == [False, True, False]
        with open(p, newline="") as f:
            got = list(csv.DictReader(f))
        assert [r["dominated"] for r in got] == ["no", "yes", "no"]
        assert got[2]["model"] == "slowbetter"

    def test_csv_requires_ap(self, tmp_path):
        rows = self.rows()
        rows[1].ap = None
        with pytest.raises(ValueError, match="slowworse"):
            write_pareto_csv(rows, tmp_path / "p.csv")

    def test_svg_renders_all_rows(self, tmp_path):
        p = tmp_path / "pareto.svg"
        write_pareto_svg(self.rows(), p)
        svg = p.read_text()
        assert svg.count("<circle") == 3
        assert 'fill="none" stroke="#999"' in svg  # the dominated row, hollow
        assert "median forward latency (ms)" in svg and "pixel AP" in svg
        assert "<polyline" in svg

    def test_table_is_aligned(self):
        txt = format_bench_table(self.rows())
        lines = txt.splitlines()
        assert lines[0].startswith("model")
        assert set(lines[1]) <= {"-", " "}
        assert any("slowbetter" in ln for ln in lines)
        # every data line fits the header grid
        assert all(len(ln) <= len(lines[1]) for ln in lines[2:])
