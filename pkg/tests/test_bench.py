import math

import numpy as np
import pytest

from manar import bench as B
from manar.attention import roi


def loop_count(n, m, l, h=1):
    """Score entries of one forward, counted stage by stage."""
    per_head = m * (n + 1)  # integration: each ACR slot sees itself + n tokens
    for i in range(1, n + 1):
        per_head += m + len(roi(i, l, n))  # broadcasting
    return h * per_head


def test_mha_count():
    plan = B.BenchPlan(lengths=[1024])
    assert B.analytic_entries("MHA", plan, 1024) == 1_048_576


def test_manar_count_default_arm():
    plan = B.BenchPlan(lengths=[1024], arms=("MANAR-256.32.96",))
    got = B.analytic_entries("MANAR-256.32.96", plan, 1024)
    assert got == loop_count(1024, 32, 48) == 161_568
    # never above the interior-window bound m(n+1) + n(m + 2l)
    assert got <= 32 * 1025 + 1024 * (32 + 96) == 163_872
    ratio = B.analytic_entries("MHA", plan, 1024) / got
    assert ratio == pytest.approx(6.49, abs=0.01)


@pytest.mark.parametrize("n,m,l", [(1, 1, 1), (7, 3, 2), (100, 0, 5), (64, 8, 64)])
def test_counts_match_loop_oracle(n, m, l):
    plan = B.BenchPlan(lengths=[n], arms=(f"MANAR-16.{m}.{2 * l}",), D=4)
    assert B.analytic_entries(plan.arms[0], plan, n) == loop_count(n, m, l)


def test_counts_affine_in_length_for_fixed_window():
    plan = B.BenchPlan(lengths=[1], arms=("MANAR-16.4.8",))
    counts = [B.analytic_entries("MANAR-16.4.8", plan, n) for n in range(10, 40)]
    assert len(set(np.diff(counts))) == 1


def test_half_window_policy():
    plan = B.BenchPlan(lengths=[64], window="half")
    assert B.arm_config("MANAR-256.32.128", plan, 64).l == 16
    assert B.arm_config("MANAR-256.32.128", plan, 2).l == 1


def test_peak_buffers():
    plan = B.BenchPlan(lengths=[1])
    assert B.peak_buffer_elements("MHA", plan, 512) == 512 * 512
    # banded buffer dominates: n (m + W) with W = 2l slots
    assert B.peak_buffer_elements("MANAR-256.32.128", plan, 512) == 512 * (32 + 128)
    assert B.peak_buffer_elements("MANAR-256.32.128", plan, 4096) / B.peak_buffer_elements("MANAR-256.32.128", plan, 512) == 8


@pytest.mark.parametrize("power", [1.0, 2.0, 1.5])
def test_synthetic_slopes(power):
    n = np.array([256, 512, 1024, 2048, 4096], float)
    assert abs(B.fit_loglog_slope(lengths=n, times=3e-6 * n ** power) - power) <= 1e-9


def test_slope_from_records():
    recs = [B.BenchRecord("A", n, 1e-3 * n, 0.0, 0, 0, 0) for n in (16, 32, 64, 128)]
    recs.append(B.BenchRecord("A", 256, math.nan, math.nan, 0, -1, 0, measured=False))
    assert B.fit_loglog_slope(recs) == pytest.approx(1.0, abs=1e-9)


def test_slope_fit_errors():
    with pytest.raises(ValueError, match="at least 4"):
        B.fit_loglog_slope(lengths=[1, 2, 16], times=[1, 2, 3])
    with pytest.raises(ValueError, match="8x"):
        B.fit_loglog_slope(lengths=[10, 20, 30, 40], times=[1, 2, 3, 4])
    with pytest.raises(ValueError, match="positive"):
        B.fit_loglog_slope(lengths=[1, 2, 4, 8], times=[1, 0, 3, 4])
    with pytest.raises(ValueError, match="single arm"):
        B.fit_loglog_slope([B.BenchRecord("A", 1, 1, 0, 0, 0, 0), B.BenchRecord("B", 2, 1, 0, 0, 0, 0)])


@pytest.mark.parametrize("kw", [dict(lengths=[]), dict(lengths=[8, 4]), dict(lengths=[4, 4]), dict(lengths=[0, 4]),
                                dict(lengths=[4], repetitions=4), dict(lengths=[4], window="grow"),
                                dict(lengths=[4], arms=("MANAR-1.2",))])
def test_plan_validation(kw):
    with pytest.raises(ValueError):
        B.BenchPlan(**kw).validate()


def test_small_run_counts_match(tmp_path):
    plan = B.BenchPlan(lengths=[8, 16, 32, 64], arms=("MHA", "MANAR-16.4.8"), D=16, h=2, k_top=2, warmup=1)
    recs = B.run_bench(plan)
    assert len(recs) == 8
    assert all(r.measured and r.counts_match and r.median_seconds > 0 for r in recs)
    slopes = B.slopes_by_arm(recs)
    assert set(slopes) == {"MHA", "MANAR-16.4.8"}
    path = tmp_path / "bench.csv"
    B.write_csv(recs, path)
    assert B.read_csv(path) == recs


def test_product_key_arm_counts():
    plan = B.BenchPlan(lengths=[8, 16], arms=("MANAR-16.2.4",), D=8, h=2, k_top=2, key_mode="product", warmup=0)
    assert all(r.counts_match for r in B.run_bench(plan))


def test_memory_error_marks_record_unmeasured(monkeypatch):
    def boom(*a, **k):
        raise MemoryError

    monkeypatch.setattr(B, "_build", boom)
    rec = B.bench_one("MHA", B.BenchPlan(lengths=[8]), 8)
    assert not rec.measured and math.isnan(rec.median_seconds)
    assert rec.analytic_entries == 64 and rec.peak_buffer_elements == 64


def test_csv_empty_and_format(tmp_path):
    path = tmp_path / "empty.csv"
    B.write_csv([], path)
    assert path.read_text().strip() == ",".join(B.CSV_COLUMNS)
    assert B.read_csv(path) == []
    B.write_csv([B.BenchRecord("MHA", 8, 0.5, 1e-7, 64, 64, 64)], path)
    row = path.read_text().splitlines()[1]
    assert row == "MHA,8,0.5,1e-07,64,64,64,True"


def test_csv_bad_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        B.read_csv(path)


def test_csv_unwritable_path_named(tmp_path):
    with pytest.raises(OSError, match="nope"):
        B.write_csv([], tmp_path / "nope" / "x.csv")
