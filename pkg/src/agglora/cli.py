"""Command-line surface tying the stages together.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .model import ModelConfig
from .adapters import (AdapterConfig, strip_na, merge_attention_lora,
                       merge_final, ConfigError)
from .data import (Sample, gen_knowledge_task, gen_alignment_task, save_jsonl,
                   load_jsonl, IngestError, CapacityError, TruncationError)
from .training import TrainConfig, run_pretrain, run_mka, run_da, config_hash
from .pipeline import build_datasets, DatasetSizes
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError
from .analysis import (eval_mc_accuracy, eval_format_score, route_stats,
                       pair_performance, forced_pair_eval,
                       routing_mismatch_report, build_parallel_lora_baseline,
                       drop_one, MetricError)
from .tensor import EngineError, StateError
from . import gradcheck as gc

DOMAIN_ERRORS = (EngineError, CheckpointError, IngestError, CapacityError,
                 TruncationError, ConfigError, MetricError, ValueError)


def load_config_file(path: str) -> dict:
    """JSON object or plain key=value lines."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        d = json.loads(text)
        if not isinstance(d, dict):
            raise IngestError(f"{path}: config JSON must be an object")
        return d
    except json.JSONDecodeError:
        pass
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestError(f"{path}: line {lineno}: expected key=value")
        k, v = (x.strip() for x in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def split_config(raw: dict):
    """Distribute flat config keys across model / train / adapter configs."""
    buckets = {ModelConfig: {}, TrainConfig: {}, AdapterConfig: {}}
    names = {cls: {f.name for f in fields(cls)} for cls in buckets}
    for k, v in raw.items():
        hit = False
        for cls in (AdapterConfig, ModelConfig, TrainConfig):
            if k in names[cls]:
                buckets[cls][k] = v
                hit = True
                break
        if not hit:
            raise IngestError(f"unknown config key '{k}'")
    return buckets[ModelConfig], buckets[TrainConfig], buckets[AdapterConfig]


def _configs(args):
    raw = load_config_file(args.config) if getattr(args, "config", None) else {}
    m, t, a = split_config(raw)
    seed = getattr(args, "seed", None)
    if seed is not None:
        m.setdefault("seed", seed)
        t.setdefault("seed", seed)
    model_cfg = ModelConfig(**m)
    train_cfg = TrainConfig(**t, adapter=AdapterConfig(**a)) if "adapter" not in t else TrainConfig(**t)
    return model_cfg, train_cfg


def _summary(args, extra: dict):
    model_cfg, train_cfg = _configs(args)
    record = {"seed": getattr(args, "seed", None),
              "config_hash": config_hash({"model": asdict(model_cfg),
                                          "train": asdict(train_cfg)}),
              **extra}
    print(json.dumps(record))


def _write_report(path, report):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(report.log_lines()) + "\n")


# -- subcommand handlers ------------------------------------------------------

def cmd_init_base(args):
    from .model import init_base
    model_cfg, _ = _configs(args)
    model = init_base(model_cfg, seed=args.seed)
    save_checkpoint(model, args.out)
    _summary(args, {"cmd": "init-base", "out": args.out})


def cmd_pretrain(args):
    model_cfg, train_cfg = _configs(args)
    data = build_datasets(args.seed)
    model, report = run_pretrain(train_cfg, model_cfg, data.pretrain, data.pretrain_heldout)
    save_checkpoint(model, args.out)
    if args.log:
        _write_report(args.log, report)
    _summary(args, {"cmd": "pretrain", "out": args.out,
                    "heldout_nll": report.final_metrics.get("heldout_nll")})


def cmd_gen_data(args):
    if args.task == "knowledge":
        samples, facts = gen_knowledge_task(args.n, args.seed)
        if args.facts_out:
            with open(args.facts_out, "w", encoding="utf-8") as f:
                json.dump({"seed": facts.seed, "triples": facts.triples,
                           "pools": facts.pools}, f, indent=2, sort_keys=True)
    else:
        samples = gen_alignment_task(args.n, args.seed)
    save_jsonl(samples, args.out)
    _summary(args, {"cmd": "gen-data", "task": args.task, "n": args.n, "out": args.out})


def cmd_train(args):
    model_cfg, train_cfg = _configs(args)
    model = load_checkpoint(args.ckpt)
    samples = load_jsonl(args.data)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.stage == "mka":
        model, report = run_mka(train_cfg, model, samples)
    else:
        if args.lam is not None:
            train_cfg.lambda_orth = args.lam
        if args.epochs is None and "epochs" not in (load_config_file(args.config) if args.config else {}):
            train_cfg.epochs = 3  # alignment stage default
        model, report = run_da(train_cfg, model, samples)
    save_checkpoint(model, args.out)
    if args.log:
        _write_report(args.log, report)
    _summary(args, {"cmd": f"train {args.stage}", "out": args.out,
                    "final_nll": report.steps[-1]["nll"] if report.steps else None})


def cmd_strip_na(args):
    model = strip_na(load_checkpoint(args.ckpt))
    save_checkpoint(model, args.out)
    _summary(args, {"cmd": "strip-na", "out": args.out})


def cmd_merge_attn(args):
    model = merge_attention_lora(load_checkpoint(args.ckpt))
    save_checkpoint(model, args.out)
    _summary(args, {"cmd": "merge-attn", "out": args.out})


def cmd_merge(args):
    model = merge_final(load_checkpoint(args.ckpt))
    save_checkpoint(model, args.out)
    _summary(args, {"cmd": "merge", "out": args.out})


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    samples = load_jsonl(args.data)
    if args.metric == "acc":
        score = eval_mc_accuracy(model, samples)
    else:
        score = eval_format_score(model, samples)
    _summary(args, {"cmd": "eval", "metric": args.metric, "score": score,
                    "n": len(samples)})


def cmd_route_stats(args):
    model = load_checkpoint(args.ckpt)
    samples = load_jsonl(args.data)
    act = route_stats(model, samples)
    act.to_csv(args.out)
    print(act.render())
    _summary(args, {"cmd": "route-stats", "out": args.out,
                    "total_count": act.total()})


def cmd_forced_pair(args):
    model = load_checkpoint(args.ckpt)
    samples = load_jsonl(args.data)
    acc = forced_pair_eval(model, samples, args.i, args.j,
                           renormalize=not args.raw_weights)
    _summary(args, {"cmd": "forced-pair", "i": args.i, "j": args.j, "accuracy": acc})


def cmd_pair_matrix(args):
    model = load_checkpoint(args.ckpt)
    samples = load_jsonl(args.data)
    act = route_stats(model, samples)
    perf = pair_performance(model, samples, renormalize=not args.raw_weights)
    act.to_csv(args.activation_out)
    perf.to_csv(args.performance_out)
    report = routing_mismatch_report(act, perf)
    if args.summary_out:
        with open(args.summary_out, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
    _summary(args, {"cmd": "pair-matrix", **report})


def cmd_baseline(args):
    model_cfg, train_cfg = _configs(args)
    base = load_checkpoint(args.ckpt)
    model = build_parallel_lora_baseline(base, train_cfg.adapter, seed=args.seed)
    extra = {"cmd": "baseline parallel-lora"}
    if args.data:
        from .training import train_loop, StageReport
        samples = load_jsonl(args.data)
        report = StageReport(stage="baseline", seed=args.seed,
                             config_hash=config_hash(asdict(train_cfg)))
        train_loop(model, samples, train_cfg, use_orth=False, report=report)
        extra["final_nll"] = report.steps[-1]["nll"] if report.steps else None
    if args.out:
        save_checkpoint(model, args.out)
        extra["out"] = args.out
    if args.drop and args.eval_data:
        samples = load_jsonl(args.eval_data)
        with drop_one(model, args.drop):
            extra[f"acc_drop{args.drop}"] = eval_mc_accuracy(model, samples)
    _summary(args, extra)


def cmd_gradcheck(args):
    result = gc.run_gradcheck()
    ok = all(v < args.tol for v in result.values())
    _summary(args, {"cmd": "gradcheck", "max_rel_error": result, "pass": ok,
                    "tol": args.tol})
    if not ok:
        raise EngineError(f"gradient check exceeded tolerance {args.tol}: {result}")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agglora",
                                description="two-stage adapter fine-tuning on a toy transformer")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", default=None, help="key=value or JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=True, help="single-threaded deterministic mode (always on)")
        if out_required:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("init-base", help="fresh Gaussian-initialized frozen base")
    common(sp)
    sp.set_defaults(fn=cmd_init_base)

    sp = sub.add_parser("pretrain", help="full-parameter pretraining of the base")
    common(sp)
    sp.add_argument("--log", default=None)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("gen-data", help="generate synthetic task data")
    common(sp)
    sp.add_argument("--task", choices=("knowledge", "alignment"), required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--facts-out", default=None)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="run a fine-tuning stage")
    sp.add_argument("stage", choices=("mka", "da"))
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--log", default=None)
    sp.set_defaults(fn=cmd_train)

    for name, fn in (("strip-na", cmd_strip_na), ("merge-attn", cmd_merge_attn),
                     ("merge", cmd_merge)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--ckpt", required=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("eval")
    common(sp, out_required=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--metric", choices=("acc", "format"), required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("route-stats")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_route_stats)

    sp = sub.add_parser("forced-pair")
    common(sp, out_required=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--i", type=int, required=True)
    sp.add_argument("--j", type=int, required=True)
    sp.add_argument("--raw-weights", action="store_true",
                    help="use raw softmax mass instead of pair-renormalized weights")
    sp.set_defaults(fn=cmd_forced_pair)

    sp = sub.add_parser("pair-matrix", help="full activation + forced-pair matrices")
    common(sp, out_required=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--activation-out", required=True)
    sp.add_argument("--performance-out", required=True)
    sp.add_argument("--summary-out", default=None)
    sp.add_argument("--raw-weights", action="store_true")
    sp.set_defaults(fn=cmd_pair_matrix)

    sp = sub.add_parser("baseline")
    sp.add_argument("kind", choices=("parallel-lora",))
    common(sp, out_required=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", default=None, help="train the baseline on this JSONL")
    sp.add_argument("--eval-data", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--drop", type=int, choices=(1, 2), default=None)
    sp.set_defaults(fn=cmd_baseline)

    sp = sub.add_parser("gradcheck")
    common(sp, out_required=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck)

    return p


def cli_dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        args.fn(args)
        return 0
    except DOMAIN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))
