"""Maximum-likelihood training and stratified evaluation.

Every training step draws its batch from the random stream
``(seed, STREAM_TRAIN, step)``, so a run resumed from a checkpoint at step
``k`` sees exactly the batches the uninterrupted run would have seen.
"""

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DomainError, NumericalError, TaskError
from .gp import KernelSpec
from .gp_oracle import oracle_log_likelihood
from .optim import AdamW
from .rng import STREAM_TRAIN, make_rng
from .tasks import save_task_cache

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    iterations: int = 250
    batch_size: int = 16
    lr: float = 5e-4
    clip: float = 0.5
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    repeat_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.epochs < 0 or self.iterations < 0:
            raise ConfigError("epochs and iterations must be non-negative")
        if not self.lr > 0 or not self.clip > 0 or self.weight_decay < 0:
            raise ConfigError("lr and clip must be positive, weight decay non-negative")
        if self.eval_every < 0 or self.checkpoint_every < 0 or self.repeat_every < 0:
            raise ConfigError("eval_every, checkpoint_every and repeat_every must be non-negative")

    def batch_key(self, step):
        """Random-stream index of the batch used at ``step``.

        With ``repeat_every = k > 0`` the stream is a fixed cycle of ``k`` batches.
        """
        return step % self.repeat_every if self.repeat_every else step

    @property
    def total_steps(self):
        return self.epochs * self.iterations

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown training keys: {sorted(set(d) - known)}")
        return cls(**d)


# objective -----------------------------------------------------------------------


def task_log_likelihoods(pred, batch):
    """Per-task mean per-point log-likelihood ``[B]`` as a tensor."""
    lp = T.tsum(T.gaussian_logpdf(batch.yt, pred.mean, pred.var), axis=-1)
    masked = T.tsum(lp * batch.mt.astype(np.float64), axis=1)
    return masked / batch.n_target.astype(np.float64)


def loss(model, tasks):
    """Negative log-likelihood per target point, averaged within tasks then across the batch."""
    batch = model.as_batch(tasks)
    if batch.yt is None:
        raise TaskError("training tasks need target outputs")
    return -T.mean(task_log_likelihoods(model.forward(batch), batch))


def sample_batch(source, batch_size, seed, step):
    rng = make_rng(seed, STREAM_TRAIN, step)
    return [source.sample(rng) for _ in range(batch_size)]


# evaluation ----------------------------------------------------------------------


@dataclass
class Bucket:
    mean: float
    std_err: float
    count: int

    @classmethod
    def of(cls, values):
        values = np.asarray(values, dtype=np.float64)
        se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("nan")
        return cls(float(values.mean()), se, int(values.size))


@dataclass
class EvalReport:
    """Mean per-point target log-likelihood overall and by number of in-context datasets."""

    overall: Bucket
    by_n_ic: dict = field(default_factory=dict)
    per_task: np.ndarray = field(default=None, repr=False)
    n_ic: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_values(cls, values, n_ic, stratify=True):
        values = np.asarray(values, dtype=np.float64)
        n_ic = np.asarray(n_ic, dtype=np.int64)
        buckets = {}
        if stratify:
            buckets = {int(k): Bucket.of(values[n_ic == k]) for k in np.unique(n_ic)}
        return cls(Bucket.of(values), buckets, values, n_ic)

    def rows(self):
        out = [("all", self.overall)]
        out += [(str(k), b) for k, b in sorted(self.by_n_ic.items())]
        return out

    def to_csv(self):
        lines = ["n_ic,mean,std_err,count"]
        lines += [f"{k},{b.mean!r},{b.std_err!r},{b.count}" for k, b in self.rows()]
        return "\n".join(lines) + "\n"

    def to_text(self):
        lines = [f"n_ic={k:>3}  mean={b.mean:+.5f}  se={b.std_err:.5f}  count={b.count}"
                 for k, b in self.rows()]
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _chunks(tasks, batch_size):
    """Index chunks grouped by number of in-context datasets to keep padding small."""
    order = sorted(range(len(tasks)), key=lambda i: (tasks[i].n_ic, i))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def evaluate(model, tasks, stratify_by_n_ic=True, batch_size=16, threads=1):
    """Per-task mean log-likelihoods, summarised as an :class:`EvalReport`.

    Results do not depend on ``threads``: chunks are formed deterministically
    and each one is evaluated independently with fixed parameters.
    """
    if not tasks:
        raise TaskError("cannot evaluate on an empty task list")
    values = np.empty(len(tasks))

    def run(idx):
        with T.no_grad():
            batch = model.as_batch([tasks[i] for i in idx])
            return idx, task_log_likelihoods(model.forward(batch), batch).data

    chunks = _chunks(tasks, batch_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for idx, v in results:
        values[idx] = v
    return EvalReport.from_values(values, [t.n_ic for t in tasks], stratify_by_n_ic)


def evaluate_oracle(tasks, noise_std, stratify_by_n_ic=True):
    """Same report for the exact GP posterior under each task's true kernel."""
    values = []
    for t in tasks:
        if not t.meta or "kernel" not in t.meta:
            raise TaskError("oracle evaluation needs the true kernel in task.meta")
        values.append(oracle_log_likelihood(t, KernelSpec(**t.meta["kernel"]), noise_std))
    return EvalReport.from_values(values, [t.n_ic for t in tasks], stratify_by_n_ic)


# training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    losses: list
    evals: list
    step: int
    checkpoint: str = None


class MetricsWriter:
    """Append-only ``step,loss,wall_ms`` CSV."""

    def __init__(self, path):
        self.path = path
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a", newline="")
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(["step", "loss", "wall_ms"])

    def write(self, step, value, wall_ms):
        self._w.writerow([step, repr(float(value)), f"{wall_ms:.3f}"])

    def close(self):
        self._fh.close()


def make_optimizer(model, cfg):
    return AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip=cfg.clip)


def _checkpoint_path(out_dir, step):
    return os.path.join(out_dir, "checkpoints", f"step_{step:08d}.ckpt")


def _dump_batch(out_dir, tasks, step):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, f"failed_batch_step_{step:08d}.cache")
    try:
        save_task_cache(path, tasks, {"step": step})
    except Exception:  # the dump is best effort; the original failure matters more
        log.exception("could not dump failing batch")
        return None
    return path


def train(model, cfg, source, out_dir=None, optimizer=None, start_step=0,
          eval_tasks=None, on_step=None):
    """Run AdamW steps ``start_step .. cfg.total_steps - 1``.

    With ``out_dir`` the loss of every step is appended to ``metrics.csv``,
    periodic evaluations go to ``eval/step_*.csv`` and checkpoints (model and
    optimizer state) to ``checkpoints/``; a final checkpoint is always written,
    so zero steps stores the initialisation. A non-finite loss or gradient
    aborts with :class:`NumericalError` after dumping the offending batch.
    """
    optimizer = optimizer or make_optimizer(model, cfg)
    writer = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "eval"), exist_ok=True)
        writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    losses, evals = [], []
    meta = {"model": model.cfg.to_dict(), "train": cfg.to_dict()}
    try:
        for step in range(start_step, cfg.total_steps):
            t0 = time.perf_counter()
            tasks = sample_batch(source, cfg.batch_size, cfg.seed, cfg.batch_key(step))
            optimizer.zero_grad()
            try:
                value = loss(model, tasks)
                if not math.isfinite(value.item()):
                    raise NumericalError(f"loss is {value.item()}")
                T.backward(value)
                norm = optimizer.step()
                if not math.isfinite(norm):
                    raise NumericalError(f"gradient norm is {norm}")
            except (NumericalError, DomainError, FloatingPointError) as exc:
                dump = _dump_batch(out_dir, tasks, step)
                raise NumericalError(f"training aborted at step {step}: {exc}"
                                     + (f"; batch written to {dump}" if dump else "")) from exc
            wall_ms = 1000.0 * (time.perf_counter() - t0)
            losses.append(value.item())
            if writer:
                writer.write(step, value.item(), wall_ms)
            done = step + 1
            if cfg.eval_every and eval_tasks and done % cfg.eval_every == 0:
                report = evaluate(model, eval_tasks)
                evals.append((done, report))
                if out_dir:
                    report.write_csv(os.path.join(out_dir, "eval", f"step_{done:08d}.csv"))
            if out_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(_checkpoint_path(out_dir, done), model, optimizer, {**meta, "step": done})
            if on_step:
                on_step(step, value.item())
    finally:
        if writer:
            writer.close()
    final = max(start_step, cfg.total_steps)
    path = None
    if out_dir:
        path = os.path.join(out_dir, "checkpoints", "final.ckpt")
        save_checkpoint(path, model, optimizer, {**meta, "step": final})
    return TrainResult(losses, evals, final, path)


def resume(model, cfg, path):
    """Restore model and optimizer from ``path``; returns ``(optimizer, step)``."""
    optimizer = make_optimizer(model, cfg)
    meta = load_checkpoint(path, model, optimizer)
    return optimizer, int(meta.get("step", 0))
