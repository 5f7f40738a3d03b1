"""Experiment configuration files.

A config is a JSON object with these sections; every key is optional except
``seed``::

    {
      "seed": 0,
      "out_dir": "runs/example",
      "data_dir": null,
      "threads": 1,
      "model": {... ModelConfig fields ...},
      "train": {... TrainConfig fields ...},
      "task": {"kind": "synthetic", ... SynthTaskConfig fields ...}
              or {"kind": "image", ... ImageTaskConfig fields ...},
      "eval": {"n_tasks": 2000, "seed": 1000, "batch_size": 16},
      "theorem": {"n_ell": 4, "families": ["rbf", "periodic"], "n_tasks": 500,
                  "n_samples": 4000, "n_target": 16, "singleton": false},
      "bench": {"kinds": ["pt_tnp", "icicl_tnp"], "n_context": [128, 256, 512, 1024, 2048],
                "n_target": 128, "n_ic": 0, "n_ic_points": 64, "repeats": 3}
    }

The ``train.seed`` and ``model.seed`` fields default to the top-level seed.
"""

import copy
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .models import ModelConfig
from .tasks import ImageTaskConfig, SynthTaskConfig, config_hash
from .training import TrainConfig

DATA_DIR_ENV = "ICICL_DATA_DIR"

EVAL_DEFAULTS = {"n_tasks": 2000, "seed": None, "batch_size": 16, "nested": True}
THEOREM_DEFAULTS = {"n_ell": 4, "families": ["rbf", "periodic"], "n_tasks": 500,
                    "n_samples": 4000, "n_target": 16, "singleton": False}
BENCH_DEFAULTS = {"kinds": ["pt_tnp", "icicl_tnp"], "n_context": [128, 256, 512, 1024, 2048],
                  "n_target": 128, "n_ic": 0, "n_ic_points": 64, "repeats": 3}
SECTIONS = ("seed", "out_dir", "data_dir", "threads", "model", "train", "task", "eval",
            "theorem", "bench")


def _merged(defaults, given, name):
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return {**copy.deepcopy(defaults), **given}


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str = "runs/default"
    data_dir: str = None
    threads: int = 1
    model: ModelConfig = None
    train: TrainConfig = None
    task: dict = field(default_factory=lambda: {"kind": "synthetic"})
    eval: dict = None
    theorem: dict = None
    bench: dict = None

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("a seed is mandatory")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigError("threads must be a positive integer")
        if self.model is None:
            self.model = ModelConfig(seed=self.seed)
        if self.train is None:
            self.train = TrainConfig(seed=self.seed)
        kind = self.task.get("kind", "synthetic")
        if kind not in ("synthetic", "image"):
            raise ConfigError(f"unknown task kind {kind!r}")
        self.task = {"kind": kind, **self.task_config().to_dict()}
        self.eval = _merged(EVAL_DEFAULTS, self.eval, "eval")
        if self.eval["seed"] is None:
            self.eval["seed"] = self.seed + 1000
        self.theorem = _merged(THEOREM_DEFAULTS, self.theorem, "theorem")
        self.bench = _merged(BENCH_DEFAULTS, self.bench, "bench")
        if self.data_dir is None:
            self.data_dir = os.environ.get(DATA_DIR_ENV)

    def task_config(self):
        body = {k: v for k, v in self.task.items() if k != "kind"}
        if self.task.get("kind", "synthetic") == "synthetic":
            return SynthTaskConfig.from_dict(body)
        return ImageTaskConfig.from_dict(body)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("a seed is mandatory")
        seed = d["seed"]
        model = ModelConfig.from_dict({"seed": seed, **d.pop("model", {})})
        train = TrainConfig.from_dict({"seed": seed, **d.pop("train", {})})
        try:
            return cls(model=model, train=train, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def to_dict(self):
        return {"seed": self.seed, "out_dir": self.out_dir, "data_dir": self.data_dir,
                "threads": self.threads, "model": self.model.to_dict(),
                "train": self.train.to_dict(), "task": dict(self.task), "eval": dict(self.eval),
                "theorem": dict(self.theorem), "bench": dict(self.bench)}

    def snapshot(self):
        """Canonical JSON text, byte-identical for equal configs."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def eval_set_hash(self):
        """Identity of the cached evaluation task set this config asks for."""
        return config_hash({"task": self.task, "n_tasks": self.eval["n_tasks"],
                            "seed": self.eval["seed"], "nested": self.eval["nested"]})
