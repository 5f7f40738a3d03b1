"""Command-line interface: ``icicl {gen,train,eval,verify-theorem,bench}``.

Every command reads an optional JSON config (``--config``); flags override
the file. Outputs go under ``out_dir``::

    out_dir/config.snapshot     canonical config actually used
    out_dir/metrics.csv         step,loss,wall_ms (training)
    out_dir/eval/*.csv          evaluation reports
    out_dir/checkpoints/*       model and optimizer state
    out_dir/tasks/*             cached evaluation task sets (gen)
    out_dir/report.txt          human-readable summary of the last command

Exit codes: 0 success, 1 theorem check failed, 2 usage or config error,
3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .config import DATA_DIR_ENV, ExperimentConfig
from .data import Dataset, Task
from .errors import ConfigError, FormatError, NumericalError, TaskError
from .gp_oracle import GridTaskSampler, LatentGrid, default_grid, verify_theorem1
from .gp import KernelSpec
from .idx import find_split, load_idx
from .models import build_model, count_flops, count_flops_full_tnp
from .rng import STREAM_BENCH, STREAM_EVAL, STREAM_ORACLE, make_rng
from .tasks import (ImageSet, ImageSource, SynthSource, generate_tasks, load_task_cache,
                    save_task_cache)
from .training import evaluate, evaluate_oracle, resume, train

log = logging.getLogger("icicl")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# config assembly -----------------------------------------------------------------


def _set(d, section, key, value):
    if value is not None:
        d.setdefault(section, {})[key] = value


def build_config(args):
    d = {}
    if args.config:
        with open(args.config) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out_dir"] = args.out
    if args.data_dir is not None:
        d["data_dir"] = args.data_dir
    if args.threads is not None:
        d["threads"] = args.threads
    for key in ("epochs", "iterations", "batch_size", "eval_every", "checkpoint_every"):
        _set(d, "train", key, getattr(args, key, None))
    _set(d, "model", "kind", getattr(args, "kind", None))
    if getattr(args, "task_kind", None):
        d.setdefault("task", {})["kind"] = args.task_kind
    if args.command in ("gen", "eval", "train"):
        _set(d, "eval", "n_tasks", args.n_tasks)
    if args.command == "verify-theorem":
        _set(d, "theorem", "n_tasks", args.n_tasks)
        _set(d, "theorem", "n_samples", args.n_samples)
        _set(d, "theorem", "n_ell", args.n_ell)
        if args.singleton:
            _set(d, "theorem", "singleton", True)
    if args.command == "bench":
        _set(d, "bench", "kinds", args.kinds)
        _set(d, "bench", "n_context", args.n_context)
        _set(d, "bench", "repeats", args.repeats)
    if "seed" not in d:
        raise ConfigError("a seed is mandatory (--seed or \"seed\" in the config file)")
    return ExperimentConfig.from_dict(d)


def _prepare_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.snapshot"), "w") as fh:
        fh.write(cfg.snapshot())


def _write_report(cfg, text):
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")


# task sources --------------------------------------------------------------------


def load_image_set(data_dir, split):
    if not data_dir:
        raise FileNotFoundError(f"image tasks need a data directory (--data-dir or ${DATA_DIR_ENV})")
    train_images, train_labels = load_idx(*find_split(data_dir, "train"))
    if split == "train":
        return ImageSet.from_uint8(train_images, train_labels)
    images, labels = load_idx(*find_split(data_dir, split))
    return ImageSet.from_uint8(images, labels, stats_from=train_images)


def task_source(cfg, split):
    if cfg.task["kind"] == "synthetic":
        return SynthSource(cfg.task_config())
    return ImageSource(load_image_set(cfg.data_dir, split), cfg.task_config())


def eval_cache_path(cfg):
    return os.path.join(cfg.out_dir, "tasks", "eval.cache")


def eval_tasks(cfg, path=None):
    """Cached evaluation tasks if present (hash-checked), else freshly generated."""
    path = path or eval_cache_path(cfg)
    if os.path.exists(path):
        tasks, _ = load_task_cache(path, expected_hash=cfg.eval_set_hash())
        return tasks
    return generate_tasks(task_source(cfg, "test"), cfg.eval["n_tasks"], cfg.eval["seed"],
                          STREAM_EVAL, nested=cfg.eval["nested"], threads=cfg.threads)


# commands ------------------------------------------------------------------------


def cmd_gen(cfg, args):
    if cfg.eval["n_tasks"] < 1:
        raise UsageError("n_tasks must be positive")
    _prepare_out(cfg)
    os.makedirs(os.path.join(cfg.out_dir, "tasks"), exist_ok=True)
    tasks = generate_tasks(task_source(cfg, "test"), cfg.eval["n_tasks"], cfg.eval["seed"],
                           STREAM_EVAL, nested=cfg.eval["nested"], threads=cfg.threads)
    path = eval_cache_path(cfg)
    digest = cfg.eval_set_hash()
    save_task_cache(path, tasks, {"config_hash": digest, "task": cfg.task,
                                  "seed": cfg.eval["seed"], "n_tasks": len(tasks)})
    with open(os.path.join(cfg.out_dir, "tasks", "manifest.json"), "w") as fh:
        json.dump({"config_hash": digest, "files": ["eval.cache"], "n_tasks": len(tasks),
                   "seed": cfg.eval["seed"], "task": cfg.task}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    counts = np.bincount([t.n_ic for t in tasks])
    _write_report(cfg, f"wrote {len(tasks)} tasks to {path}\nconfig_hash = {digest}\n"
                  + "".join(f"n_ic={k}: {c}\n" for k, c in enumerate(counts)))
    return EXIT_OK


def cmd_train(cfg, args):
    _prepare_out(cfg)
    model = build_model(cfg.model)
    optimizer, start = None, 0
    if args.resume:
        optimizer, start = resume(model, cfg.train, args.resume)
    source = task_source(cfg, "train")
    evals = eval_tasks(cfg) if cfg.train.eval_every else None
    result = train(model, cfg.train, source, out_dir=cfg.out_dir, optimizer=optimizer,
                   start_step=start, eval_tasks=evals)
    report = evaluate(model, evals if evals is not None else eval_tasks(cfg),
                      batch_size=cfg.eval["batch_size"], threads=cfg.threads)
    report.write_csv(os.path.join(cfg.out_dir, "eval", "final.csv"))
    tail = np.mean(result.losses[-100:]) if result.losses else float("nan")
    _write_report(cfg, f"model = {cfg.model.kind}\nsteps = {result.step}\n"
                  f"mean loss of last 100 steps = {tail:.6f}\ncheckpoint = {result.checkpoint}\n"
                  f"evaluation (mean per-point log-likelihood):\n{report.to_text()}")
    return EXIT_OK


def cmd_eval(cfg, args):
    _prepare_out(cfg)
    os.makedirs(os.path.join(cfg.out_dir, "eval"), exist_ok=True)
    tasks = eval_tasks(cfg, args.tasks)
    if args.oracle:
        if cfg.task["kind"] != "synthetic":
            raise UsageError("the exact oracle is only defined for synthetic GP tasks")
        report = evaluate_oracle(tasks, cfg.task["noise_std"])
        name = "oracle"
    else:
        model = build_model(cfg.model)
        ckpt = args.checkpoint or os.path.join(cfg.out_dir, "checkpoints", "final.ckpt")
        if args.checkpoint or os.path.exists(ckpt):
            load_checkpoint(ckpt, model)
        else:
            log.warning("no checkpoint at %s; evaluating the initialisation", ckpt)
        report = evaluate(model, tasks, batch_size=cfg.eval["batch_size"], threads=cfg.threads)
        name = cfg.model.kind
    report.write_csv(os.path.join(cfg.out_dir, "eval", f"{name}.csv"))
    _write_report(cfg, f"evaluation of {name} on {len(tasks)} tasks\n{report.to_text()}")
    return EXIT_OK


def theorem_grid(th):
    if th["singleton"]:
        return LatentGrid([KernelSpec(th["families"][0], 1.0)])
    return default_grid(th["n_ell"], families=tuple(th["families"]))


def cmd_verify_theorem(cfg, args):
    th = cfg.theorem
    if th["n_tasks"] < 1:
        raise UsageError("n_tasks must be positive")
    if th["n_samples"] < 1000:
        raise UsageError("n_samples must be at least 1000")
    _prepare_out(cfg)
    grid = theorem_grid(th)
    sampler = GridTaskSampler(grid, n_target=th["n_target"],
                              noise_std=cfg.task.get("noise_std", 0.2))
    rep = verify_theorem1(grid, sampler, th["n_tasks"], th["n_samples"],
                          make_rng(cfg.seed, STREAM_ORACLE))
    _write_report(cfg, rep.to_text())
    return EXIT_OK if rep.holds else EXIT_FAILED


def bench_task(n_context, n_target, n_ic, n_ic_points, rng, d_x=1, d_y=1):
    def ds(n):
        return Dataset(rng.uniform(-2, 2, (n, d_x)), rng.standard_normal((n, d_y)))
    return Task(ds(n_context), rng.uniform(-4, 4, (n_target, d_x)), None,
                [ds(n_ic_points) for _ in range(n_ic)])


def run_bench(cfg):
    """Rows ``(model, N_c, N_t, N_ic, flops, wall_ms)``; full-attention rows have no timing."""
    b = cfg.bench
    rows = []
    for kind in b["kinds"]:
        mcfg = type(cfg.model).from_dict({**cfg.model.to_dict(), "kind": kind})
        model = build_model(mcfg)
        for i, nc in enumerate(b["n_context"]):
            task = bench_task(nc, b["n_target"], b["n_ic"] if kind.startswith("icicl") else 0,
                              b["n_ic_points"], make_rng(cfg.seed, STREAM_BENCH, i))
            best = float("inf")
            with T.no_grad():
                model(task)
                for _ in range(b["repeats"]):
                    t0 = time.perf_counter()
                    model(task)
                    best = min(best, time.perf_counter() - t0)
            rows.append((kind, nc, b["n_target"], task.n_ic, count_flops(model, task), 1000 * best))
    for nc in b["n_context"]:
        rows.append(("full_tnp", nc, b["n_target"], 0,
                     count_flops_full_tnp(cfg.model, nc, b["n_target"]), None))
    return rows


def cmd_bench(cfg, args):
    _prepare_out(cfg)
    rows = run_bench(cfg)
    lines = ["model,N_c,N_t,N_ic,flops,wall_ms"]
    lines += [f"{m},{nc},{nt},{nic},{fl},{'' if w is None else f'{w:.3f}'}"
              for m, nc, nt, nic, fl, w in rows]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(cfg.out_dir, "bench.csv"), "w") as fh:
        fh.write(text)
    _write_report(cfg, text)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "verify-theorem": cmd_verify_theorem, "bench": cmd_bench}


# argument parsing ----------------------------------------------------------------


def make_parser():
    p = argparse.ArgumentParser(prog="icicl", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir", help=f"image data directory (default ${DATA_DIR_ENV})")
    common.add_argument("--threads", type=int, help="worker threads for generation and evaluation")
    common.add_argument("--task-kind", choices=("synthetic", "image"))
    common.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen", parents=[common], help="generate and cache an evaluation task set")
    g.add_argument("--n-tasks", type=int)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--kind", choices=("cnp", "icicl_cnp", "pt_tnp", "icicl_tnp"))
    for flag in ("--epochs", "--iterations", "--batch-size", "--eval-every", "--checkpoint-every",
                 "--n-tasks"):
        t.add_argument(flag, type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or the exact oracle")
    e.add_argument("--kind", choices=("cnp", "icicl_cnp", "pt_tnp", "icicl_tnp"))
    e.add_argument("--checkpoint")
    e.add_argument("--tasks", help="task cache file")
    e.add_argument("--n-tasks", type=int)
    e.add_argument("--oracle", action="store_true", help="evaluate the exact GP posterior instead")

    v = sub.add_parser("verify-theorem", parents=[common],
                       help="Monte-Carlo check that in-context datasets reduce expected KL")
    v.add_argument("--n-tasks", type=int)
    v.add_argument("--n-samples", type=int)
    v.add_argument("--n-ell", type=int)
    v.add_argument("--singleton", action="store_true", help="use a one-kernel grid")

    b = sub.add_parser("bench", parents=[common], help="FLOP and wall-time scaling table")
    b.add_argument("--kinds", nargs="+", choices=("cnp", "icicl_cnp", "pt_tnp", "icicl_tnp"))
    b.add_argument("--n-context", type=int, nargs="+")
    b.add_argument("--repeats", type=int)
    return p


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"icicl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, TaskError, FileNotFoundError, OSError) as exc:
        print(f"icicl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"icicl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
