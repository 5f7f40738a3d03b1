"""In-context in-context learning with neural processes, from scratch in numpy.

The package covers a small reverse-mode autodiff engine (:mod:`icicl.tensor`),
attention blocks (:mod:`icicl.attention`), CNP and transformer neural process
models that condition on extra datasets (:mod:`icicl.models`), GP and image
task generation (:mod:`icicl.tasks`), an exact GP-mixture oracle
(:mod:`icicl.gp_oracle`), training and evaluation (:mod:`icicl.training`) and
a command-line interface (:mod:`icicl.cli`).
"""

from .data import Batch, Dataset, Task, collate
from .gp import KernelSpec
from .models import ModelConfig, build_model, count_flops
from .tensor import Tensor, backward, no_grad
from .training import EvalReport, TrainConfig, evaluate, loss, train

__version__ = "0.1.0"

__all__ = ["Batch", "Dataset", "EvalReport", "KernelSpec", "ModelConfig", "Task", "Tensor",
           "TrainConfig", "backward", "build_model", "collate", "count_flops", "evaluate",
           "loss", "no_grad", "train"]
