"""``manar`` command-line entry point.

Exit codes: 0 success, 1 check failure or internal error, 2 usage error.
Every subcommand prints machine-parseable ``key=value`` lines or CSV.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from typing import Optional, Sequence

import numpy as np

from . import bench as B
from . import chm as C
from . import train as TR
from .attention import MhaWeights
from .config import ConfigError, ManarConfig, parse_config
from .layer import acr_decomposition, build_acr
from .memory import exhaustive_product, select_product
from .model import ModelConfig, ToyModel
from .tensor import Tensor, float64_mode
from .transfer import equivalence_check
from .weights import FormatError, load_weights, save_weights

log = logging.getLogger("manar")


class CheckFailed(Exception):
    """A verification subcommand found a violation (exit code 1)."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config_name(text: str) -> str:
    try:
        parse_config(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _emit(**kv) -> None:
    print(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in kv.items()))


# -- subcommands ------------------------------------------------------------


def cmd_gradcheck(args) -> None:
    mode = "product" if args.product_keys else "flat"
    kind = args.kind
    cfg = TR.tiny_config(kind, mode)
    tol = args.tol if args.tol is not None else (1e-5 if kind == "mha" else 1e-4)
    errors = TR.gradcheck_model(cfg, seed=args.seed)
    writer = csv.writer(sys.stdout)
    writer.writerow(("parameter", "relative_error"))
    for name, err in errors.items():
        writer.writerow((name, repr(err)))
    worst = max(errors.values())
    _emit(kind=kind, key_mode=mode, max_error=worst, tolerance=tol)
    if not worst <= tol:
        raise CheckFailed(f"gradient error {worst:.3g} exceeds {tol:g}")


def cmd_equiv(args) -> None:
    worst = 0.0
    rng = np.random.default_rng(args.seed)
    for _ in range(args.seeds):
        h = int(rng.integers(1, 4))
        D = h * int(rng.integers(1, 9))
        n = int(rng.integers(1, 33))
        w = MhaWeights.init(D, h, rng)
        X = Tensor(rng.normal(size=(n, D)).astype(np.float32))
        worst = max(worst, equivalence_check(w, X, rng=rng))
    _emit(instances=args.seeds, max_abs_diff=worst, tolerance=args.tol)
    if not worst <= args.tol:
        raise CheckFailed(f"MANAR(m=0) differs from MHA by {worst:.3g}")


def cmd_bench(args) -> None:
    if len(args.seq_lens) < 4:
        raise argparse.ArgumentTypeError("--seq-lens needs at least 4 lengths for the slope fit")
    plan = B.BenchPlan(
        lengths=args.seq_lens, arms=("MHA", args.config), window=args.window, D=args.D, h=args.heads,
        k_top=args.k_top, repetitions=args.reps, warmup=args.warmup, seed=args.seed,
        single_thread=not args.threads,
    )
    try:
        plan.validate()
        B.fit_loglog_slope(lengths=plan.lengths, times=np.ones(len(plan.lengths)))
    except (ValueError, ConfigError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    records = B.run_bench(plan)
    if args.out:
        B.write_csv(records, args.out)
    else:
        B.write_csv(records, "/dev/stdout")
    slopes = B.slopes_by_arm(records)
    for arm, slope in slopes.items():
        _emit(arm=arm, loglog_slope=slope)
    bad = [r for r in records if r.measured and not r.counts_match]
    if bad:
        raise CheckFailed(f"instrumented counts differ from closed form at {[(r.arm, r.n) for r in bad]}")


def _random_tokens(cfg: ModelConfig, batch: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, cfg.vocab, size=(batch, cfg.seq_len))


def cmd_chm(args) -> None:
    if args.mode == "witness":
        rep = C.witness_report(args.eps, args.seed)
        reports = [C.LayerReport(0, 1, int(not rep.inside))]
        _emit(inside=rep.inside, infeasibility=rep.infeasibility,
              separating_coordinate=None if rep.separation is None else rep.separation[0])
        ok = rep.outside_verified
    else:
        kind = "mha" if args.mode == "control" else "manar"
        cfg = ModelConfig(vocab=16, seq_len=args.seq_len, D=16, h=2, layers=2, kind=kind, M=16, m=4, l=4, k_top=2)
        with float64_mode():
            model = ToyModel(cfg, seed=args.seed, dtype=np.float64)
            if args.weights:
                model.load_state_dict(load_weights(args.weights))
            tokens = _random_tokens(cfg, args.batch, args.seed)
            reports = C.chm_layer_report(model, tokens, args.samples, args.eps, args.seed)
        ok = args.mode != "control" or all(r.outside_count == 0 for r in reports)
    C.write_report_csv(reports, args.out or "/dev/stdout")
    if not ok:
        raise CheckFailed(f"chm {args.mode} check failed")


def _task_from_args(args) -> TR.LongRangeTask:
    return TR.LongRangeTask(symbols=args.symbols, seq_len=args.seq_len, distance=args.distance,
                            l=args.l, seed=args.seed)


def _model_config(args, kind: str = "manar", m: Optional[int] = None) -> ModelConfig:
    M, mm, Cw = parse_config(args.config)
    task = _task_from_args(args)
    return ModelConfig(vocab=task.vocab, seq_len=task.seq_len, D=args.D, h=args.heads, layers=args.layers,
                       kind=kind, M=M, m=mm if m is None else m, l=Cw // 2, k_top=args.k_top,
                       key_mode="product" if args.product_keys else "flat")


def cmd_train(args) -> None:
    task = _task_from_args(args)
    cfg = _model_config(args)
    if cfg.l != task.l:
        task = TR.LongRangeTask(**{**task.__dict__, "l": cfg.l})
    data = TR.generate_task(task)
    opt = TR.OptimizerSettings(lr=args.lr, batch_size=args.batch_size)
    mask, model, thaw = None, None, None
    if args.freeze_until is not None:
        mha_cfg = ModelConfig(**{**cfg.__dict__, "kind": "mha"})
        pre = TR.train_model(mha_cfg, data, opt, steps=args.pretrain_steps, seed=args.seed)
        model, mask = TR.transfer_model(pre.model, cfg, seed=args.seed)
        thaw = args.freeze_until
    res = TR.train_model(cfg, data, opt, mask=mask, steps=args.steps, seed=args.seed, thaw_step=thaw, model=model)
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "loss"))
            for i, v in enumerate(res.losses):
                w.writerow((i, repr(v)))
    if args.out_weights:
        save_weights(args.out_weights, res.model.state_dict())
    initial = res.initial_loss if res.losses else math.nan
    final = res.final_loss() if res.losses else math.nan
    _emit(config=args.config, steps=args.steps, seed=args.seed, initial_loss=initial, final_loss=final,
          test_accuracy=res.test_accuracy, seconds=res.seconds)


def cmd_sweep(args) -> None:
    task = _task_from_args(args)
    base = ModelConfig(vocab=task.vocab, seq_len=task.seq_len, D=args.D, h=args.heads, layers=args.layers,
                       M=16, m=8, l=task.l, k_top=args.k_top)
    rows = TR.run_sweep(args.axis, base, task, steps=args.steps, seed=args.seed,
                        opt=TR.OptimizerSettings(lr=args.lr, batch_size=args.batch_size))
    TR.write_sweep_csv(rows, args.out or "/dev/stdout")
    for key, acc in TR.accuracy_trend(rows).items():
        _emit(row_value=key, mean_accuracy=acc)


def decomposition_trials(trials: int, seed: int = 0) -> dict[str, float]:
    """Max relative difference of the two ACR forms, in 32- and 64-bit."""
    rng = np.random.default_rng(seed)
    worst = {"float32": 0.0, "float64": 0.0}
    for _ in range(trials):
        n, m, d = int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
        parts = [rng.normal(size=(m, d)) for _ in range(3)]
        KM, V = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        for dt in (np.float32, np.float64):
            cast = [Tensor(p.astype(dt)) for p in parts]
            acr, _ = build_acr(tuple(cast), Tensor(KM.astype(dt)), Tensor(V.astype(dt)), d)
            alt = acr_decomposition(tuple(c.data for c in cast), KM.astype(dt), V.astype(dt), d)
            ref = acr.data.astype(np.float64)
            rel = np.abs(ref - alt.astype(np.float64)).max() / max(np.abs(ref).max(), 1e-30)
            key = np.dtype(dt).name
            worst[key] = max(worst[key], float(rel))
    return worst


def cmd_decomp_check(args) -> None:
    worst = decomposition_trials(args.trials, args.seed)
    _emit(trials=args.trials, max_rel_float32=worst["float32"], max_rel_float64=worst["float64"])
    if worst["float32"] > 1e-5 or worst["float64"] > 1e-10:
        raise CheckFailed("ACR decomposition identity violated")


def retrieval_trials(trials: int, seed: int = 0) -> int:
    """Number of random trials where product-key selection matches the exhaustive ranking."""
    rng = np.random.default_rng(seed)
    hits = 0
    for t in range(trials):
        M = int(rng.choice([4, 16, 64, 256]))
        r = math.isqrt(M)
        k = int(rng.integers(1, r + 1))
        if t % 4 == 3:  # coarse scores force ties
            s1, s2 = rng.integers(-2, 3, size=r).astype(float), rng.integers(-2, 3, size=r).astype(float)
        else:
            s1, s2 = rng.normal(size=r), rng.normal(size=r)
        hits += bool(np.array_equal(select_product(s1, s2, k), exhaustive_product(s1, s2, k)))
    return hits


def cmd_retrieval_check(args) -> None:
    hits = retrieval_trials(args.trials, args.seed)
    _emit(trials=args.trials, matches=hits, match_rate=hits / args.trials if args.trials else 1.0)
    if hits != args.trials:
        raise CheckFailed(f"{args.trials - hits} retrieval mismatches")


# -- parser -----------------------------------------------------------------


def _add_task_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("longrange",), default="longrange")
    p.add_argument("--symbols", type=int, default=TR.LongRangeTask.symbols)
    p.add_argument("--seq-len", type=int, default=TR.LongRangeTask.seq_len)
    p.add_argument("--distance", type=int, default=TR.LongRangeTask.distance)
    p.add_argument("--l", type=int, default=TR.LongRangeTask.l)
    p.add_argument("--D", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--k-top", type=int, default=2)
    p.add_argument("--lr", type=float, default=TR.OptimizerSettings.lr)
    p.add_argument("--batch-size", type=int, default=TR.OptimizerSettings.batch_size)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manar", description="MANAR layer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="tape vs finite-difference gradients")
    p.add_argument("--product-keys", action="store_true")
    p.add_argument("--kind", choices=("manar", "mha"), default="manar")
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equiv", help="MANAR with m=0, l>=n against MHA")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("bench", help="scaling benchmark")
    p.add_argument("--seq-lens", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--config", type=_config_name, default="MANAR-256.32.96")
    p.add_argument("--window", choices=B.WINDOW_POLICIES, default="fixed")
    p.add_argument("--D", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--k-top", type=int, default=8)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--threads", action="store_true", help="allow multithreaded BLAS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("chm", help="convex hull membership reports")
    p.add_argument("--mode", choices=("control", "witness", "model"), default="control")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--eps", type=float, default=C.DEFAULT_EPS)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_chm)

    p = sub.add_parser("train", help="train a toy model on the long-range task")
    _add_task_args(p)
    p.add_argument("--config", type=_config_name, default="MANAR-16.8.16")
    p.add_argument("--product-keys", action="store_true")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-until", type=int)
    p.add_argument("--pretrain-steps", type=int, default=200)
    p.add_argument("--loss-csv")
    p.add_argument("--out-weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="ablation grid on the toy task")
    _add_task_args(p)
    p.add_argument("--axis", choices=sorted(TR.SWEEP_AXES), required=True)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("decomp-check", help="ACR decomposition identity sweep")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_decomp_check)

    p = sub.add_parser("retrieval-check", help="product keys vs exhaustive ranking")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_retrieval_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
