import csv
import math
import os

import numpy as np
import pytest

from icicl import tensor as T
from icicl.checkpoint import read_arrays
from icicl.data import collate
from icicl.errors import ConfigError, NumericalError
from icicl.models import GaussianPrediction, ModelConfig, build_model
from icicl.tasks import SynthSource, SynthTaskConfig, generate_tasks
from icicl.tensor import Tensor
from icicl.training import (Bucket, EvalReport, TrainConfig, evaluate, evaluate_oracle, loss,
                            resume, train)

from conftest import random_task

TINY = dict(d_z=16, n_layers=1, n_heads=2, d_v=8, d_qk=8, n_pseudo=4, n_pseudo_ic=4)
SMALL_TASKS = SynthTaskConfig(n_context=(1, 10), n_target=16, n_ic=(0, 2), n_ic_points=(8, 16))


class Oracle:
    """Stand-in model that predicts the true targets with a fixed variance."""

    accepts_empty_ic = True

    def __init__(self, var):
        self.var = var

    def as_batch(self, tasks):
        return collate(tasks, allow_empty_ic=True)

    def forward(self, b):
        return GaussianPrediction(Tensor(b.yt), Tensor(np.full(b.yt.shape, self.var)), b.mt)


def tiny(kind="icicl_tnp", seed=0):
    return build_model(ModelConfig(kind=kind, seed=seed, **TINY))


class TestLoss:
    def test_exact_predictions(self, rng):
        v = 0.37
        tasks = [random_task(rng, n_target=n) for n in (3, 8)]
        assert loss(Oracle(v), tasks).item() == pytest.approx(0.5 * math.log(2 * math.pi * v), rel=1e-14)

    def test_identical_tasks(self, rng):
        model = tiny()
        task = random_task(rng)
        assert loss(model, [task] * 3).item() == pytest.approx(loss(model, [task]).item(), rel=1e-13)

    def test_matches_per_point_formula(self, rng):
        model = tiny("pt_tnp")
        tasks = [random_task(rng, n_target=n, ic_sizes=()) for n in (2, 5, 9)]
        per_task = []
        for t in tasks:
            m, v = model.predict(t)
            per_task.append(np.mean(-0.5 * np.log(2 * np.pi * v) - 0.5 * (t.target_y - m) ** 2 / v))
        assert loss(model, tasks).item() == pytest.approx(-np.mean(per_task), rel=1e-12)

    def test_gradient_reaches_every_parameter(self, rng):
        model = tiny()
        T.backward(loss(model, [random_task(rng), random_task(rng, ic_sizes=())]))
        assert all(p.grad is not None and np.any(p.grad != 0) for p in model.parameters())


class TestTrain:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"learning_rate": 1.0})

    def test_loss_decreases(self):
        model = build_model(ModelConfig(kind="pt_tnp", d_z=32, n_layers=2, n_heads=4, d_v=8,
                                        d_qk=8, n_pseudo=8))
        cfg = TrainConfig(epochs=1, iterations=200, batch_size=16, seed=3, repeat_every=10)
        losses = np.array(train(model, cfg, SynthSource(SMALL_TASKS)).losses)
        smoothed = np.convolve(losses, np.full(50, 1 / 50), mode="valid")
        drops = np.diff(smoothed) < 0
        assert drops.mean() >= 0.8, smoothed[::25]

    def test_zero_epochs_saves_initialisation(self, tmp_path):
        model = tiny()
        init = {k: v.copy() for k, v in model.state_dict().items()}
        res = train(model, TrainConfig(epochs=0, seed=1), SynthSource(SMALL_TASKS), out_dir=tmp_path)
        arrays, meta = read_arrays(res.checkpoint)
        assert meta["step"] == 0 and res.losses == []
        for k, v in init.items():
            assert arrays[f"param/{k}"].tobytes() == v.tobytes()

    def test_resume_is_bit_exact(self, tmp_path):
        src = SynthSource(SMALL_TASKS)
        straight = tiny()
        full = train(straight, TrainConfig(epochs=2, iterations=3, batch_size=4, seed=5), src)
        first = tiny()
        train(first, TrainConfig(epochs=1, iterations=3, batch_size=4, seed=5), src, out_dir=tmp_path)
        second = tiny(seed=123)
        cfg = TrainConfig(epochs=2, iterations=3, batch_size=4, seed=5)
        opt, step = resume(second, cfg, os.path.join(tmp_path, "checkpoints", "final.ckpt"))
        assert step == 3
        rest = train(second, cfg, src, optimizer=opt, start_step=step)
        assert rest.losses == full.losses[3:]
        for a, b in zip(straight.parameters(), second.parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_metrics_and_checkpoints(self, tmp_path):
        cfg = TrainConfig(epochs=2, iterations=2, batch_size=2, seed=0, checkpoint_every=2,
                          eval_every=2)
        evals = generate_tasks(SynthSource(SMALL_TASKS), 6, 0, 3)
        res = train(tiny(), cfg, SynthSource(SMALL_TASKS), out_dir=tmp_path, eval_tasks=evals)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "loss", "wall_ms"]
        assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
        assert [float(r[1]) for r in rows[1:]] == res.losses
        assert sorted(os.listdir(tmp_path / "checkpoints")) == ["final.ckpt", "step_00000002.ckpt",
                                                                "step_00000004.ckpt"]
        assert sorted(os.listdir(tmp_path / "eval")) == ["step_00000002.csv", "step_00000004.csv"]
        assert len(res.evals) == 2

    def test_same_seed_same_losses(self):
        cfg = TrainConfig(epochs=1, iterations=4, batch_size=3, seed=9)
        a = train(tiny(), cfg, SynthSource(SMALL_TASKS)).losses
        b = train(tiny(), cfg, SynthSource(SMALL_TASKS)).losses
        assert a == b

    def test_non_finite_aborts_with_dump(self, tmp_path):
        class Poisoned(SynthSource):
            def sample(self, rng, n_ic=None):
                task = super().sample(rng, n_ic)
                task.target_y[0, 0] = np.nan
                return task

        with pytest.raises(NumericalError, match="step 0"):
            train(tiny(), TrainConfig(epochs=1, iterations=2, batch_size=2), Poisoned(SMALL_TASKS),
                  out_dir=tmp_path)
        assert os.path.exists(tmp_path / "failed_batch_step_00000000.cache")


class TestEvaluate:
    def test_buckets(self):
        rep = EvalReport.from_values([1.0, 2.0, 3.0, 5.0], [0, 1, 1, 1])
        assert rep.overall.count == 4
        assert sum(b.count for b in rep.by_n_ic.values()) == 4
        b = rep.by_n_ic[1]
        assert b.mean == pytest.approx(10 / 3)
        assert b.std_err == pytest.approx(np.std([2, 3, 5], ddof=1) / math.sqrt(3))
        assert math.isnan(rep.by_n_ic[0].std_err)

    def test_unstratified(self):
        rep = EvalReport.from_values([1.0, 2.0], [0, 1], stratify=False)
        assert rep.by_n_ic == {} and rep.overall.count == 2

    def test_values_match_loss(self, rng):
        model = tiny()
        tasks = generate_tasks(SynthSource(SMALL_TASKS), 9, 2, 3)
        rep = evaluate(model, tasks, batch_size=4)
        for i in (0, 4, 8):
            assert rep.per_task[i] == pytest.approx(-loss(model, [tasks[i]]).item(), rel=1e-11)
        assert rep.overall.mean == pytest.approx(np.mean(rep.per_task))

    def test_reproducible_and_thread_independent(self):
        model = tiny()
        tasks = generate_tasks(SynthSource(SMALL_TASKS), 12, 4, 3)
        a = evaluate(model, tasks).to_csv()
        assert a == evaluate(model, tasks).to_csv()
        assert a == evaluate(model, tasks, threads=3).to_csv()

    def test_oracle_beats_untrained_model(self):
        tasks = generate_tasks(SynthSource(SMALL_TASKS), 12, 4, 3)
        oracle = evaluate_oracle(tasks, 0.2)
        assert oracle.overall.mean > evaluate(tiny(), tasks).overall.mean

    def test_csv_layout(self):
        rep = EvalReport.from_values([1.0, 2.0], [0, 0])
        lines = rep.to_csv().splitlines()
        assert lines[0] == "n_ic,mean,std_err,count"
        assert lines[1].startswith("all,1.5,") and lines[2].startswith("0,1.5,")
