"""Train a small ICICL-TNP on GP regression tasks and stratify by N_ic.

A few hundred steps are enough to see the model start to use the in-context
datasets. The exact GP posterior under the true kernel is printed alongside
as an upper reference.

    python demos/train_synthetic.py [steps]
"""
import sys
import time

from icicl import ModelConfig, TrainConfig, build_model, evaluate, train
from icicl.rng import STREAM_EVAL
from icicl.tasks import SynthSource, generate_tasks
from icicl.training import evaluate_oracle

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
model = build_model(ModelConfig(kind="icicl_tnp", d_z=32, n_layers=2, n_heads=4, d_v=8, d_qk=8,
                                n_pseudo=8, n_pseudo_ic=8))
source = SynthSource()
cfg = TrainConfig(epochs=1, iterations=steps, batch_size=16, seed=0)


def progress(step, value):
    if (step + 1) % 50 == 0:
        print(f"step {step + 1:5d}  loss {value:.4f}")


t0 = time.perf_counter()
train(model, cfg, source, on_step=progress)
print(f"trained {steps} steps in {time.perf_counter() - t0:.0f}s")

tasks = generate_tasks(source, 240, 1000, STREAM_EVAL)
print("\nICICL-TNP log-likelihood per target point")
print(evaluate(model, tasks).to_text())
print("\nexact GP oracle (true kernel, context only)")
print(evaluate_oracle(tasks, source.cfg.noise_std).to_text())
