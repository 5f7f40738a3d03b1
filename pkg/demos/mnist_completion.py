"""Image completion on MNIST with same-label in-context images.

Needs MNIST IDX files (train and t10k, optionally gzipped) in the directory
named by $ICICL_DATA_DIR. Trains briefly, then reports
the test log-likelihood for each number of in-context images.

    ICICL_DATA_DIR=~/data/mnist python demos/mnist_completion.py [steps]
"""
import os
import sys

from icicl import ModelConfig, TrainConfig, build_model, evaluate, train
from icicl.cli import load_image_set
from icicl.rng import STREAM_EVAL
from icicl.tasks import ImageSource, generate_tasks

data_dir = os.environ.get("ICICL_DATA_DIR")
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
train_source = ImageSource(load_image_set(data_dir, "train"))
test_source = ImageSource(load_image_set(data_dir, "test"))

model = build_model(ModelConfig(kind="icicl_tnp", d_x=2, d_z=32, n_layers=2, n_heads=4, d_v=8,
                                d_qk=8, n_pseudo=16, n_pseudo_ic=16))
train(model, TrainConfig(epochs=1, iterations=steps, batch_size=16, seed=0), train_source,
      on_step=lambda s, v: print(f"step {s + 1:5d}  loss {v:.4f}") if (s + 1) % 50 == 0 else None)

tasks = generate_tasks(test_source, 200, 1000, STREAM_EVAL)
print("\nlog-likelihood per pixel by number of in-context images")
print(evaluate(model, tasks).to_text())
