"""Analytic multiply-accumulate counts of one forward pass.

Pseudo-token models grow linearly in the context size, a full-attention TNP
quadratically. The crossover sits below N_c = 4M.

    python demos/scaling.py
"""
import numpy as np

from icicl import ModelConfig, build_model, count_flops
from icicl.cli import bench_task
from icicl.models import count_flops_full_tnp

cfg = dict(d_z=64, n_layers=3, n_heads=4, d_v=16, d_qk=16, n_pseudo=32, n_pseudo_ic=16)
pt = build_model(ModelConfig(kind="pt_tnp", **cfg))
icicl = build_model(ModelConfig(kind="icicl_tnp", **cfg))
rng = np.random.default_rng(0)
n_target = 128

print(f"{'N_c':>6} {'PT-TNP':>14} {'ICICL-TNP(3)':>14} {'full TNP':>14}")
for nc in (16, 32, 64, 128, 256, 512, 1024, 2048):
    plain = bench_task(nc, n_target, 0, 64, rng)
    with_ic = bench_task(nc, n_target, 3, 64, rng)
    print(f"{nc:>6} {count_flops(pt, plain):>14,} {count_flops(icicl, with_ic):>14,} "
          f"{count_flops_full_tnp(pt.cfg, nc, n_target):>14,}")
