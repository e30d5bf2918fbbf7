"""Single-layer scaling benchmark: MANAR versus full multi-head attention.

Each arm is timed on a fixed random input at every sequence length (warmup
runs, then timed repetitions; median and median absolute deviation
reported).  Alongside wall-clock time every record carries the
instrumented score-entry count from one forward pass, the closed-form
count, and the size of the largest transient score buffer.
"""

from __future__ import annotations

import contextlib
import csv
import gc
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import MhaWeights, ScoreCounter, mha_entries, mha_forward, window_extent
from .config import ManarConfig, parse_config
from .layer import ManarLayerWeights, manar_entries, manar_layer_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

WINDOW_POLICIES = ("fixed", "half")


@dataclass
class BenchPlan:
    """What to time.

    ``arms`` holds ``"MHA"`` and/or ``"MANAR-M.m.C"`` names.  With the
    ``fixed`` window policy the half-window is ``C / 2`` from the name; with
    ``half`` the context window tracks the input, ``C = n / 2``.
    """

    lengths: Sequence[int]
    arms: Sequence[str] = ("MHA", "MANAR-256.32.128")
    window: str = "fixed"
    D: int = 64
    h: int = 1
    k_top: int = 8
    key_mode: str = "flat"
    repetitions: int = 5
    warmup: int = 2
    seed: int = 0
    single_thread: bool = True

    def validate(self) -> "BenchPlan":
        lengths = list(self.lengths)
        if not lengths:
            raise ValueError("benchmark needs at least one sequence length")
        if any(n < 1 for n in lengths):
            raise ValueError(f"sequence lengths must be positive: {lengths}")
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ValueError(f"sequence lengths must be strictly ascending: {lengths}")
        if self.repetitions < 5:
            raise ValueError(f"need at least 5 timed repetitions, got {self.repetitions}")
        if self.warmup < 0:
            raise ValueError("warmup runs must be >= 0")
        if self.window not in WINDOW_POLICIES:
            raise ValueError(f"window policy must be one of {WINDOW_POLICIES}, got {self.window!r}")
        for arm in self.arms:
            if arm != "MHA":
                parse_config(arm)
        return self


@dataclass
class BenchRecord:
    arm: str
    n: int
    median_seconds: float
    mad_seconds: float
    analytic_entries: int
    instrumented_entries: int
    peak_buffer_elements: int
    measured: bool = True

    @property
    def counts_match(self) -> bool:
        return self.instrumented_entries == self.analytic_entries


CSV_COLUMNS = tuple(f.name for f in fields(BenchRecord))


def arm_config(arm: str, plan: BenchPlan, n: int) -> Optional[ManarConfig]:
    """Layer config for ``arm`` at length ``n`` (``None`` for MHA)."""
    if arm == "MHA":
        return None
    cfg = ManarConfig.from_name(arm, plan.D, plan.h, k_top=plan.k_top, key_mode=plan.key_mode)
    if plan.window == "half":
        cfg = cfg.with_(l=max(1, n // 4)).validate()
    return cfg


def analytic_entries(arm: str, plan: BenchPlan, n: int) -> int:
    cfg = arm_config(arm, plan, n)
    if cfg is None:
        return mha_entries(n, plan.h)
    return manar_entries(n, cfg.m, cfg.l, cfg.h)


def peak_buffer_elements(arm: str, plan: BenchPlan, n: int) -> int:
    """Largest score buffer one forward materializes.

    MHA: the ``h x n x n`` score matrix.  MANAR: the maximum over the
    search-pattern scores ``h m n``, retrieval scores (``h m M`` flat or
    ``h m 2 sqrt(M)`` product keys), integration scores ``h m (n+1)`` and the
    banded broadcasting buffer ``h n (m + W)`` with ``W`` window slots.
    """
    cfg = arm_config(arm, plan, n)
    if cfg is None:
        return plan.h * n * n
    h, m = cfg.h, cfg.m
    before, after = window_extent(n, cfg.l)
    width = before + after + 1
    retrieval = m * (cfg.M if cfg.key_mode == "flat" else 2 * math.isqrt(cfg.M))
    return h * max(m * n, retrieval if m else 0, m * (n + 1), n * (m + width))


@contextlib.contextmanager
def _thread_limit(single: bool):
    if not single:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _build(arm: str, plan: BenchPlan, n: int, rng: np.random.Generator):
    cfg = arm_config(arm, plan, n)
    X = Tensor(rng.normal(size=(1, n, plan.D)).astype(np.float32))
    if cfg is None:
        w = MhaWeights.init(plan.D, plan.h, rng)
        return lambda counter=None: mha_forward(X, w, counter)
    w = ManarLayerWeights.init(cfg, rng)
    return lambda counter=None: manar_layer_forward(X, w, cfg, counter)


def _mad(xs: np.ndarray) -> float:
    return float(np.median(np.abs(xs - np.median(xs))))


def bench_one(arm: str, plan: BenchPlan, n: int) -> BenchRecord:
    analytic = analytic_entries(arm, plan, n)
    peak = peak_buffer_elements(arm, plan, n)
    rng = np.random.default_rng(plan.seed)
    try:
        forward = _build(arm, plan, n, rng)
        with T.no_grad():
            counter = ScoreCounter()
            forward(counter)
            instrumented = counter.total
            for _ in range(plan.warmup):
                forward()
            times = []
            for _ in range(plan.repetitions):
                gc.collect()
                t0 = time.perf_counter()
                forward()
                times.append(time.perf_counter() - t0)
    except MemoryError:
        log.warning("%s at n=%d ran out of memory; marking unmeasured", arm, n)
        return BenchRecord(arm, n, math.nan, math.nan, analytic, -1, peak, measured=False)
    times = np.asarray(times)
    return BenchRecord(arm, n, float(np.median(times)), _mad(times), analytic, instrumented, peak)


def run_bench(plan: BenchPlan) -> list[BenchRecord]:
    """Time every arm at every length, sequentially."""
    plan.validate()
    records = []
    with _thread_limit(plan.single_thread):
        for arm in plan.arms:
            for n in plan.lengths:
                rec = bench_one(arm, plan, n)
                log.info("%s n=%d median=%.4gs entries=%d", arm, n, rec.median_seconds, rec.instrumented_entries)
                records.append(rec)
    return records


def fit_loglog_slope(records: Sequence[BenchRecord] = (), *, lengths=None, times=None) -> float:
    """Least-squares slope of ``log(time)`` against ``log(n)``.

    Takes the records of one arm, or raw ``lengths`` / ``times`` arrays.
    Unmeasured records are skipped.
    """
    if lengths is None:
        arms = {r.arm for r in records}
        if len(arms) > 1:
            raise ValueError(f"slope fit needs records of a single arm, got {sorted(arms)}")
        kept = [r for r in records if r.measured]
        lengths = [r.n for r in kept]
        times = [r.median_seconds for r in kept]
    n = np.asarray(lengths, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if n.shape != t.shape:
        raise ValueError("lengths and times differ in size")
    if n.size < 4:
        raise ValueError(f"slope fit needs at least 4 lengths, got {n.size}")
    if n.max() < 8 * n.min():
        raise ValueError(f"lengths must span at least 8x, got {n.min():g}..{n.max():g}")
    if np.any(t <= 0) or np.any(n <= 0):
        raise ValueError("lengths and times must be positive")
    slope, _ = np.polyfit(np.log(n), np.log(t), 1)
    return float(slope)


def slopes_by_arm(records: Sequence[BenchRecord]) -> dict[str, float]:
    arms = []
    for r in records:
        if r.arm not in arms:
            arms.append(r.arm)
    return {a: fit_loglog_slope([r for r in records if r.arm == a]) for a in arms}


def write_csv(records: Sequence[BenchRecord], path) -> None:
    """Header plus one row per record; floats written with ``repr`` (always a '.' decimal point)."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in records:
                row = asdict(r)
                writer.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in CSV_COLUMNS)])
    except OSError as exc:
        raise OSError(f"cannot write benchmark CSV {path}: {exc}") from exc


def read_csv(path) -> list[BenchRecord]:
    casts = {f.name: f.type for f in fields(BenchRecord)}
    conv = {"str": str, "int": int, "float": float, "bool": lambda s: s == "True"}
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out.append(BenchRecord(**{k: conv[casts[k]](v) for k, v in row.items()}))
    return out
