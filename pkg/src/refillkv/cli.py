"""Command-line entry point: ``refillkv <subcommand> [flags]``.

Exit status is 0 on success, 2 when a full-attention run exceeds its entry cap,
and 1 for any other failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, tasks
from .errors import CapacityError, RefillKVError
from .model import save_model
from .nested_cache import load_cache, save_cache
from .prefill import PrefillConfig
from .refill import RefillConfig
from .training import (TrainBatch, check_gradients, smoothed, stage1_objective, stage2_objective,
                       train_steps, write_trace)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=harness.MODES, default="acre")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l", type=int, default=16, help="L1/L2 interval")
    p.add_argument("--window", type=int, default=512, help="working window W (entries)")
    p.add_argument("--eta", type=int, default=4096, help="maximum refill length")
    p.add_argument("--chunk", type=int, default=None, help="L2 tokens per prefill chunk")
    p.add_argument("--corpus", default="markov:1024",
                   help="markov:<n>, file:<path> or text:<literal>")
    p.add_argument("--input", default=None, help="shorthand for --corpus file:<path>")
    p.add_argument("--query", default="What is the document about?")
    p.add_argument("--max-new", type=int, default=8)
    p.add_argument("--cap", type=int, default=2048, help="full mode: live entries per layer-head")
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--stream-window", type=int, default=256)
    p.add_argument("--model", default=None, help="model checkpoint to load")
    p.add_argument("--metrics-out", default=None)
    p.add_argument("--timing", action="store_true", help="include wall_ms in metrics")


def _config(args) -> harness.ExperimentConfig:
    corpus = f"file:{args.input}" if args.input else args.corpus
    return harness.ExperimentConfig(
        mode=args.mode, seed=args.seed, corpus=corpus, query=args.query, interval=args.l,
        window=args.window, max_refill=args.eta, chunk=args.chunk, max_new=args.max_new,
        cap=args.cap, sinks=args.sinks, stream_window=args.stream_window, model_path=args.model)


def _emit(rows, args) -> None:
    text = harness.to_jsonl(rows)
    if args.metrics_out:
        Path(args.metrics_out).write_text(text)
    sys.stdout.write(text)


def cmd_prefill(args) -> int:
    cfg = _config(args)
    model = harness.build_model(cfg)
    cache, pre = harness.build_cache(model, cfg)
    if args.cache_out:
        save_cache(cache, args.cache_out)
    metrics = harness.RunMetrics(peak_view_entries=pre.peak_view, hot_entries=cache.hot_entries,
                                 cold_entries=cache.cold_entries, prefill_steps=pre.steps)
    row = harness.RunResult([], metrics, cfg, dict(n=cache.n, m=cache.m)).record(args.timing)
    _emit([row], args)
    return 0


def cmd_query(args) -> int:
    cfg = _config(args)
    model = harness.build_model(cfg)
    if cfg.mode != "acre":
        result = harness.run_baseline(cfg, model)
    elif args.cache_in:
        cache = load_cache(args.cache_in)
        result = harness.answer_from_cache(model, cache, cfg)
        result.extra["cache_in"] = args.cache_in    # the corpus echo does not apply here
    else:
        cache, pre = harness.build_cache(model, cfg)
        if args.cache_out:
            save_cache(cache, args.cache_out)
        result = harness.answer_from_cache(model, cache, cfg)
        result.metrics.peak_view_entries = max(result.metrics.peak_view_entries, pre.peak_view)
        result.metrics.prefill_steps = pre.steps
    _emit([result.record(args.timing)], args)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [int(v) for v in args.values.split(",") if v]
    rows = harness.sweep(args.param, values, cfg)
    _emit(rows, args)
    print(harness.summary_table(rows, args.param), file=sys.stderr)
    return 0


def _train_batches(args, model, pc):
    b = args.batch
    if args.stage == "stage1":
        seqs = tasks.markov_sequences(args.seed, b * args.n_batches, args.seq_len,
                                      model.config.n_text_ids)
        return [stage1_objective(model, TrainBatch(sequences=seqs[i * b:(i + 1) * b]), pc)
                for i in range(args.n_batches)]
    task = tasks.RecallTask(interval=args.l)
    ex = task.examples(args.seed + 1, b * args.n_batches)
    return [stage2_objective(model, TrainBatch(qa=[(e.context, e.query, e.answer)
                                                  for e in ex[i * b:(i + 1) * b]]), pc)
            for i in range(args.n_batches)]


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.stage == "stage2" and not args.model:
        task = tasks.RecallTask(interval=args.l)
        model = tasks.pretrain_recall_base(task, seed=args.seed)
        window = task.context_len + task.n_groups
        pc = PrefillConfig(window=window, interval=args.l, chunk=args.l)
    else:
        model = harness.build_model(cfg)
        pc = cfg.prefill_config()
    batches = _train_batches(args, model, pc)
    model, trace = train_steps(model, batches, args.lr, args.steps)
    if args.trace_out:
        write_trace(trace, args.trace_out)
    if args.model_out:
        save_model(model, args.model_out)
    sm = smoothed(trace, 20)
    row = dict(stage=args.stage, seed=args.seed, steps=args.steps, lr=args.lr,
               first_loss=trace[0]["loss"], last_loss=trace[-1]["loss"],
               smoothed_first=float(sm[0]), smoothed_last=float(sm[-1]))
    _emit([row], args)
    return 0


def gradcheck_objectives(model, pc: PrefillConfig, seed: int):
    """Stage-1, stage-2 (L1-only) and stage-2 (refilled) objectives on Markov tokens."""
    l = pc.interval
    seqs = tasks.markov_sequences(seed, 2, max(4 * l, 32) + 4, model.config.n_text_ids)
    qa = [(s[:-4], s[-4:-2], s[-2:]) for s in seqs]
    rc = RefillConfig(max_refill=2 * l, window=pc.window, interval=l)
    return {
        "stage1": stage1_objective(model, TrainBatch(sequences=[s[:-4] for s in seqs]), pc),
        "stage2": stage2_objective(model, TrainBatch(qa=qa), pc),
        "stage2_refilled": stage2_objective(model, TrainBatch(qa=qa), pc, mode="refilled",
                                            refill_cfg=rc),
    }


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    model = harness.build_model(cfg)
    rows = []
    for stage, obj in gradcheck_objectives(model, cfg.prefill_config(), args.seed).items():
        rep = check_gradients(model, obj, eps=args.eps, n_samples=args.samples, seed=args.seed)
        rows.append(dict(stage=stage, max_rel_error=rep.max_rel_error, samples=rep.samples,
                         frozen_max_abs_grad=rep.frozen_max_abs_grad, worst=rep.worst))
    _emit(rows, args)
    return 0 if all(r["worst"] < 1e-3 for r in rows) else 1


def cmd_bench(args) -> int:
    from . import bench
    rows = bench.run(sizes=[int(s) for s in args.sizes.split(",")], repeats=args.repeats)
    print(bench.format_table(rows), file=sys.stderr)
    if args.metrics_out:
        Path(args.metrics_out).write_text(harness.to_jsonl(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refillkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prefill", help="build a bi-layer cache from a context")
    _common(p)
    p.add_argument("--cache-out", default=None)
    p.set_defaults(func=cmd_prefill)

    p = sub.add_parser("query", help="answer a query (optionally from a saved cache)")
    _common(p)
    p.add_argument("--cache-in", default=None)
    p.add_argument("--cache-out", default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("sweep", help="sweep l, eta or W and check structural monotonicity")
    _common(p)
    p.add_argument("--param", required=True, help="l, eta or W")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="toy stage-1 / stage-2 training of the L1 family")
    _common(p)
    p.add_argument("--stage", choices=("stage1", "stage2"), default="stage1")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=100.0)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--n-batches", type=int, default=10)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--trace-out", default=None)
    p.add_argument("--model-out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the L1 gradients")
    _common(p)
    p.add_argument("--eps", type=float, default=3e-4)
    p.add_argument("--samples", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="compiled vs pure-Python kernel timings")
    p.add_argument("--sizes", default="64,128,256")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--metrics-out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 2
    except (RefillKVError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
