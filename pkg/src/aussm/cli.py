"""Command-line entry point: gen, train, eval, bench, oracle, gradcheck.

Exit codes: 0 success, 1 contract or usage error, 2 failed check.
Every run writes ``manifest.json`` to ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata

import numpy as np

from . import archive, bench, oracle, tasks, train
from .blocks import ModelConfig
from .errors import ConfigError, ContractError
from .gradcheck import gradcheck_block, gradcheck_kernel
from .scan import ChunkPlan

EXIT_OK, EXIT_CONTRACT, EXIT_CHECK = 0, 1, 2
GRAD_TOL = 1e-5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: list
    artifacts: list = field(default_factory=list)
    version: str = ""
    started: str = ""
    finished: str = ""
    exit_code: int = 0


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict) or any(isinstance(v, dict) for v in cfg.values()):
        raise ConfigError("config file must be a flat JSON object")
    return cfg


def _resolve(args, cfg: dict, keys) -> dict:
    """Config file values, overridden by flags that were given explicitly."""
    out = {}
    for k in keys:
        flag = getattr(args, k, None)
        out[k] = flag if flag is not None else cfg.get(k)
    return {k: v for k, v in out.items() if v is not None}


def _task_cfg(args) -> tasks.TaskConfig:
    return tasks.TaskConfig(max_len=max(args.test_len, args.val_len, args.train_len))


def _split_spec(args, seed: int) -> tasks.SplitSpec:
    return tasks.SplitSpec(args.train_size, args.val_size, args.test_size,
                           (1, args.train_len), (args.train_len, args.val_len), (1, args.test_len), seed)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args, man: RunManifest) -> int:
    cfg = _task_cfg(args)
    splits = tasks.make_splits(args.task, _split_spec(args, args.seed), cfg)
    for name in ("train", "val", "test"):
        path = os.path.join(args.out, f"{args.task}.{name}.tsv")
        tasks.dump(path, args.task, getattr(splits, name), cfg)
        man.artifacts.append(path)
    man.config.update(histograms=splits.histograms, rejected=splits.rejected, task_config=asdict(cfg))
    print(json.dumps({"rejected": splits.rejected, "sizes": [len(splits.train), len(splits.val), len(splits.test)]}))
    return EXIT_OK


_TRAIN_KEYS = ("learning_rate", "weight_decay", "batch_size", "max_steps", "patience", "eval_every",
               "max_seconds", "stop_at_val")


def cmd_train(args, man: RunManifest) -> int:
    file_cfg = _load_config(args.config)
    tcfg = train.TrainConfig.from_dict(_resolve(args, file_cfg, _TRAIN_KEYS))
    pattern = args.pattern or file_cfg.get("pattern", "ma")
    d_model = args.d_model or file_cfg.get("d_model", 16)
    n_state = args.n_state or file_cfg.get("n_state", 8)
    seeds = args.seeds if args.seeds is not None else list(file_cfg.get("seeds", [0]))
    tcfg_task = _task_cfg(args)
    mcfg = train.model_config_for(args.task, pattern, d_model, n_state, tcfg_task)
    man.config.update(train=asdict(tcfg), model=mcfg.to_dict(), task_config=asdict(tcfg_task))
    man.seeds = seeds
    jsonl = os.path.join(args.out, "records.jsonl")
    results = []
    for seed in seeds:
        splits = tasks.make_splits(args.task, _split_spec(args, seed), tcfg_task)
        res = train.train_task(args.task, mcfg, tcfg, seed, splits=splits, jsonl_path=jsonl)
        results.append(res)
        ckpt = os.path.join(args.out, f"model.seed{seed}.bin")
        archive.save_archive(ckpt, res.params, {"task": args.task, "model": mcfg.to_dict(), "seed": seed,
                                                "task_config": asdict(tcfg_task)})
        man.artifacts.append(ckpt)
        print(json.dumps(res.summary()))
    summary = os.path.join(args.out, "summary.csv")
    train.write_summary_csv(summary, results)
    man.artifacts += [jsonl, summary]
    return EXIT_OK


def cmd_eval(args, man: RunManifest) -> int:
    meta, params = archive.load_archive(args.checkpoint)
    mcfg = ModelConfig(**meta["model"])
    task = meta["task"]
    tcfg = tasks.TaskConfig(**meta.get("task_config", {}))
    rng = np.random.default_rng(args.seed)
    lo = max(args.min_len, tasks.min_length(task))
    samples = [tasks.gen(task, int(rng.integers(lo, args.max_len + 1)), rng, tcfg) for _ in range(args.size)]
    acc = train.evaluate(mcfg, params, samples)
    out = {"task": task, "accuracy": acc, "scaled_accuracy": train.scaled_accuracy(acc, mcfg.num_classes),
           "size": args.size, "lengths": [lo, args.max_len]}
    man.config.update(out)
    print(json.dumps(out))
    return EXIT_OK


def cmd_bench(args, man: RunManifest) -> int:
    rows = bench.run_bench(args.lengths, args.impls, args.kernels, args.batch, args.d, args.n,
                           args.repeats, args.warmup, args.seed, ChunkPlan(args.chunk_len))
    path = os.path.join(args.out, "bench.csv")
    rows = bench.write_csv(path, rows)
    man.artifacts.append(path)
    bad = [r for r in rows if r.status == "ok" and r.impl == "separable" and r.max_rel_err > 1e-8]
    for r in rows:
        print(f"{r.kernel:6s} {r.impl:10s} L={r.L:6d} median={r.median_wall_ns / 1e6:9.3f} ms "
              f"fg={r.fg_bytes} peak={r.peak_tracked_bytes} err={r.max_rel_err:.1e} {r.status}")
    return EXIT_CHECK if bad else EXIT_OK


def cmd_oracle(args, man: RunManifest) -> int:
    path = os.path.join(args.out, "oracle.csv")
    reports = [oracle.counter_soundness(k, args.len, args.words, args.seed) for k in args.k]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "length", "words", "mismatches", "max_drift", "drift_bound", "max_drift_ratio", "passed"])
        for r in reports:
            w.writerow([r.k, r.length, r.words, r.mismatches, r.max_drift, r.drift_bound, r.max_drift_ratio,
                        r.passed])
            print(f"k={r.k} len={r.length} words={r.words} mismatches={r.mismatches} "
                  f"drift_ratio={r.max_drift_ratio:.3g} {'PASS' if r.passed else 'FAIL'}")
    man.artifacts.append(path)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def cmd_gradcheck(args, man: RunManifest) -> int:
    if args.kernel in ("aussm", "s6"):
        errs = gradcheck_kernel(args.kernel, args.L, args.d, args.n, seed=args.seed)
    else:
        errs = gradcheck_block(args.kernel.split("-")[1], args.L, args.d, args.n, seed=args.seed)
    worst = max(errs.values())
    man.config["errors"] = errs
    for name, e in errs.items():
        print(f"{name:18s} {e:.3e}")
    print(f"max rel err {worst:.3e} ({'PASS' if worst < GRAD_TOL else 'FAIL'} at {GRAD_TOL:g})")
    return EXIT_OK if worst < GRAD_TOL else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser

def _add_split_args(p):
    p.add_argument("--train-size", type=int, default=10_000)
    p.add_argument("--val-size", type=int, default=1_000)
    p.add_argument("--test-size", type=int, default=10_000)
    p.add_argument("--train-len", type=int, default=40, help="max train length (val starts here)")
    p.add_argument("--val-len", type=int, default=256)
    p.add_argument("--test-len", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="aussm", description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs", help="output directory (default: runs)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate task splits as TSV")
    p.add_argument("--task", required=True, choices=tasks.TASK_IDS)
    p.add_argument("--seed", type=int, default=0)
    _add_split_args(p)

    p = sub.add_parser("train", help="train a model on a task")
    p.add_argument("--task", required=True, choices=tasks.TASK_IDS)
    p.add_argument("--config", help="flat JSON config; flags override it")
    p.add_argument("--pattern")
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-state", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--wd", dest="weight_decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--stop-at-val", type=float)
    p.add_argument("--seeds", type=int, nargs="+")
    _add_split_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--seed", type=int, default=12345)

    p = sub.add_parser("bench", help="recurrent vs separable timing")
    p.add_argument("--lengths", type=int, nargs="+", default=list(bench.DEFAULT_LENGTHS))
    p.add_argument("--impls", nargs="+", choices=bench.IMPLS, default=list(bench.IMPLS))
    p.add_argument("--kernels", nargs="+", choices=bench.KERNELS, default=list(bench.KERNELS))
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--chunk-len", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle", help="mod-k counter soundness against the automaton")
    p.add_argument("--k", type=int, nargs="+", default=[2, 3, 5, 7, 97])
    p.add_argument("--len", type=int, default=1000)
    p.add_argument("--words", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of a backward pass")
    p.add_argument("--kernel", choices=("aussm", "s6", "block-aussm", "block-mamba"), default="aussm")
    p.add_argument("--L", type=int, default=16)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    return ap


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "oracle": cmd_oracle, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONTRACT
    if not args.cmd:
        ap.print_usage(sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    os.makedirs(args.out, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k not in ("cmd", "out", "verbose")}
    seed = getattr(args, "seed", None)
    man = RunManifest(args.cmd, config, [] if seed is None else [seed], version=_version(), started=_now())
    try:
        code = COMMANDS[args.cmd](args, man)
    except (ContractError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONTRACT
    man.finished = _now()
    man.exit_code = code
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(asdict(man), fh, indent=2, default=str)
    return code


if __name__ == "__main__":
    sys.exit(main())
