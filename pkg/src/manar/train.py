"""Toy-scale training: long-range task, AdamW with freeze masks, gradchecks, sweeps."""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, ToyModel
from .transfer import COPIED, copy_mha_weights, staged_unfreeze

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


_ALLOCATOR_TUNED = False


def tune_allocator() -> bool:
    """Keep freed activation buffers on the heap instead of returning them to the OS.

    Training allocates many short-lived arrays just above glibc's default
    mmap threshold; mapping and faulting them in every step roughly doubles
    step time.  Best effort: a no-op where glibc ``mallopt`` is unavailable.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
    ok = mallopt(M_MMAP_THRESHOLD, 1 << 30) and mallopt(M_TRIM_THRESHOLD, 1 << 30) and mallopt(M_TOP_PAD, 64 << 20)
    _ALLOCATOR_TUNED = bool(ok)
    return _ALLOCATOR_TUNED


# -- task ------------------------------------------------------------------


@dataclass(frozen=True)
class LongRangeTask:
    """Two marked tokens ``distance`` apart; label 1 iff their symbols match.

    Unmarked positions hold symbols ``0..symbols-1``; a marked position holds
    ``symbols + s``.  The first mark is placed uniformly at random.  Two
    symbols is the default: with a linear head on pooled features the label
    is an XNOR of the two marks, which no single window can see.
    """

    symbols: int = 2
    seq_len: int = 64
    distance: int = 40
    l: int = 8
    train_size: int = 8192
    test_size: int = 1024
    seed: int = 0

    @property
    def vocab(self) -> int:
        return 2 * self.symbols


@dataclass
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def _make_split(task: LongRangeTask, size: int, rng: np.random.Generator):
    V, n, gap = task.symbols, task.seq_len, task.distance
    x = rng.integers(0, V, size=(size, n))
    y = np.zeros(size, dtype=np.intp)
    y[: size // 2] = 1
    if size % 2:
        y[-1] = rng.integers(0, 2)
    rng.shuffle(y)
    first = rng.integers(0, n - gap, size=size)
    a = rng.integers(0, V, size=size)
    shift = rng.integers(1, V, size=size)  # nonzero shift gives a different symbol
    b = np.where(y == 1, a, (a + shift) % V)
    rows = np.arange(size)
    x[rows, first] = a + V
    x[rows, first + gap] = b + V
    return x.astype(np.intp), y


def generate_task(task: LongRangeTask) -> TaskData:
    if task.distance >= task.seq_len:
        raise ValueError(f"distance {task.distance} must be < sequence length {task.seq_len}")
    if task.distance <= 2 * task.l:
        raise ValueError(f"distance {task.distance} must exceed the window length 2l={2 * task.l}")
    if task.symbols < 2:
        raise ValueError("need at least two symbols")
    rng = np.random.default_rng(task.seed)
    tx, ty = _make_split(task, task.train_size, rng)
    vx, vy = _make_split(task, task.test_size, rng)
    return TaskData(tx, ty, vx, vy)


def oracle_label(tokens: np.ndarray, symbols: int) -> int:
    marks = [i for i, t in enumerate(tokens) if t >= symbols]
    if len(marks) != 2:
        raise ValueError(f"expected exactly two marked positions, found {len(marks)}")
    return int(tokens[marks[0]] == tokens[marks[1]])


# -- optimizer -------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, mask: Optional[dict] = None) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if mask is not None and not mask.get(name, True):
                continue
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)


@dataclass
class OptimizerSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 32


@dataclass
class TrainResult:
    model: ToyModel
    losses: list
    test_accuracy: float
    seconds: float = 0.0
    snapshots: dict = field(default_factory=dict)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    def final_loss(self, window: int = 50) -> float:
        tail = self.losses[-window:]
        return float(np.mean(tail))


def accuracy(model: ToyModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(model.predict(x) == y)) if len(y) else float("nan")


def train_model(
    cfg: ModelConfig,
    data: TaskData,
    opt: OptimizerSettings = OptimizerSettings(),
    mask: Optional[dict] = None,
    steps: int = 2000,
    seed: int = 0,
    thaw_step: Optional[int] = None,
    model: Optional[ToyModel] = None,
    watch: Iterable[int] = (),
) -> TrainResult:
    """Minibatch AdamW on ``data``; ``mask`` maps parameter names to trainable flags.

    With ``thaw_step`` the mask is lifted from that step on.  Parameter
    snapshots are stored for steps listed in ``watch``.
    """
    tune_allocator()
    model = model or ToyModel(cfg, seed=seed)
    params = model.parameters()
    if mask is not None:
        unknown = set(mask) - set(params)
        if unknown:
            raise KeyError(f"mask names unknown parameters: {sorted(unknown)}")
    optim = AdamW(params, lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay)
    rng = np.random.default_rng(seed + 7919)
    watch = set(watch)
    snapshots = {}
    losses = []
    t0 = time.perf_counter()
    for step in range(steps):
        if step in watch:
            snapshots[step] = model.state_dict()
        idx = rng.integers(0, len(data.train_y), size=opt.batch_size)
        loss = model.loss(data.train_x[idx], data.train_y[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(step, value)
        losses.append(value)
        optim.zero_grad()
        T.backward(loss)
        active = mask
        if mask is not None and thaw_step is not None:
            active = staged_unfreeze(mask, step, thaw_step)
        optim.step(active)
        if step % 250 == 0:
            log.info("step %d loss %.4f", step, value)
    if steps in watch:
        snapshots[steps] = model.state_dict()
    acc = accuracy(model, data.test_x, data.test_y)
    return TrainResult(model, losses, acc, time.perf_counter() - t0, snapshots)


def transfer_model(mha_model: ToyModel, cfg: ModelConfig, seed: int = 0) -> tuple[ToyModel, dict]:
    """MANAR toy model seeded from a trained MHA toy model.

    Every shared parameter and each layer's q/k/v/out projections are copied
    and frozen; memory-related parameters stay trainable.
    """
    target = ToyModel(cfg, seed=seed)
    src_params = mha_model.parameters()
    mask = {}
    for name, p in target.parameters().items():
        if ".attn." not in name:
            p.data = src_params[name].data.astype(p.dtype).copy()
            mask[name] = False
    for i, (sb, tb) in enumerate(zip(mha_model.blocks, target.blocks)):
        layer_mask = copy_mha_weights(sb.attn, tb.attn)
        for name, trainable in layer_mask.items():
            mask[f"layers.{i}.attn.{name}"] = trainable
    return target, mask


# -- gradient checks -------------------------------------------------------


def gradcheck_model(cfg: ModelConfig, seed: int = 0, batch: int = 3, step: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error between tape and central-difference gradients.

    Error for a parameter is ``max|g_tape - g_fd| / max(max|g_tape|, max|g_fd|)``.
    Runs in 64-bit on a tiny instance.
    """
    with T.float64_mode():
        model = ToyModel(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed + 1)
        x = rng.integers(0, cfg.vocab, size=(batch, cfg.seq_len))
        y = rng.integers(0, cfg.classes, size=batch)
        params = model.parameters()
        loss = model.loss(x, y)
        T.backward(loss)
        errors = {}
        for name, p in params.items():
            tape = p.grad if p.grad is not None else np.zeros_like(p.data)
            original = p.data

            def f(probe, p=p):
                p.data = probe.data
                return model.loss(x, y)

            fd = T.finite_diff_grad(f, T.tensor(np.array(original, dtype=np.float64)), step).data
            p.data = original
            scale = max(np.abs(tape).max(), np.abs(fd).max(), 1e-8)
            errors[name] = float(np.abs(tape - fd).max() / scale)
    return errors


def tiny_config(kind: str = "manar", key_mode: str = "flat") -> ModelConfig:
    return ModelConfig(vocab=6, seq_len=8, D=8, h=2, layers=2, kind=kind, M=4, m=2, l=2,
                       k_top=2, key_mode=key_mode, ffn=8)


# -- sweeps ----------------------------------------------------------------

SWEEP_AXES = {
    "mem-acr": ("M", "m", (4, 16, 64), (2, 4, 8)),
    "cwl-acr": ("C", "m", (4, 8, 16), (0, 2, 8)),
}

SWEEP_COLUMNS = ("axis", "row_name", "row_value", "col_name", "col_value", "config", "final_loss", "test_accuracy", "seconds")


def run_sweep(
    axis: str,
    base: ModelConfig,
    task: LongRangeTask,
    steps: int = 600,
    seed: int = 0,
    rows: Optional[Sequence[int]] = None,
    cols: Optional[Sequence[int]] = None,
    opt: OptimizerSettings = OptimizerSettings(),
) -> list[dict]:
    """Train one toy model per grid cell and collect loss/accuracy."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    row_name, col_name, row_vals, col_vals = SWEEP_AXES[axis]
    row_vals = tuple(rows or row_vals)
    col_vals = tuple(cols or col_vals)
    out = []
    for rv in row_vals:
        for cv in col_vals:
            cfg = replace(base, m=cv)
            cell_task = task
            if row_name == "M":
                cfg = replace(cfg, M=rv, k_top=min(base.k_top, rv))
            else:
                cfg = replace(cfg, l=rv // 2)
                cell_task = replace(task, l=rv // 2)
            cfg.layer_config()
            data = generate_task(cell_task)
            res = train_model(cfg, data, opt, steps=steps, seed=seed)
            out.append({
                "axis": axis, "row_name": row_name, "row_value": rv, "col_name": col_name, "col_value": cv,
                "config": cfg.layer_config().name, "final_loss": res.final_loss(),
                "test_accuracy": res.test_accuracy, "seconds": res.seconds,
            })
            log.info("sweep %s=%s %s=%s acc=%.3f", row_name, rv, col_name, cv, res.test_accuracy)
    return out


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def accuracy_trend(rows: Sequence[dict]) -> dict:
    """Mean accuracy per row value (e.g. per memory size)."""
    by = {}
    for r in rows:
        by.setdefault(r["row_value"], []).append(r["test_accuracy"])
    return {k: float(np.mean(v)) for k, v in sorted(by.items())}
