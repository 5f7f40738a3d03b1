import gzip
import math
import os
import struct

import numpy as np
import pytest
from scipy import stats

from icicl.data import Dataset, Task, collate
from icicl.errors import ConfigError, FormatError, TaskError
from icicl.gp import KernelSpec, log_marginal_likelihood
from icicl.idx import TRAIN_FILES, find_split, load_idx, write_idx
from icicl.rng import make_rng
from icicl.tasks import (ImageSet, ImageSource, ImageTaskConfig, SynthSource, SynthTaskConfig,
                         config_hash, generate_tasks, load_task_cache, sample_image_task,
                         sample_kernel, sample_synth_task, save_task_cache)


class TestSynthetic:
    def test_sizes_and_ranges(self, rng):
        cfg = SynthTaskConfig()
        for _ in range(50):
            task, spec = sample_synth_task(cfg, rng)
            assert 1 <= task.n_context <= 64 and task.n_target == 128
            assert 0 <= task.n_ic <= 5
            assert np.all(np.abs(task.context.x) <= 2) and np.all(np.abs(task.target_x) <= 4)
            for ds in task.in_context:
                assert 64 <= len(ds) <= 128 and np.all(np.abs(ds.x) <= 4)
            assert task.meta["kernel"] == spec.to_dict()

    def test_lengthscale_log_uniform(self, rng):
        cfg = SynthTaskConfig()
        ells = np.array([sample_kernel(cfg, rng).ell for _ in range(3000)])
        u = (np.log(ells) - math.log(0.25)) / (math.log(4.0) - math.log(0.25))
        assert stats.kstest(u, "uniform").pvalue > 1e-3

    def test_family_balance(self, rng):
        cfg = SynthTaskConfig()
        fams = [sample_kernel(cfg, rng).family for _ in range(4000)]
        assert stats.binomtest(fams.count("rbf"), 4000).pvalue > 1e-3

    def test_ood_ranges(self, rng):
        cfg = SynthTaskConfig(ood=True)
        ells = np.array([sample_kernel(cfg, rng).ell for _ in range(4000)])
        assert np.all(((ells >= 0.1) & (ells <= 0.25)) | ((ells >= 4) & (ells <= 10)))
        low_share = math.log(2.5) / (math.log(2.5) + math.log(2.5))
        assert abs(np.mean(ells < 1) - low_share) < 0.04

    def test_n_ic_uniform(self, rng):
        cfg = SynthTaskConfig(n_target=4, n_ic_points=(1, 2))
        counts = np.bincount([sample_synth_task(cfg, rng)[0].n_ic for _ in range(3000)], minlength=6)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_in_context_data_likely_under_true_kernel(self, rng):
        cfg = SynthTaskConfig()
        task, spec = sample_synth_task(cfg, rng, n_ic=2)
        for ds in task.in_context:
            assert np.isfinite(log_marginal_likelihood(spec, ds.x, ds.y, cfg.noise_std))

    def test_overrides(self, rng):
        spec = KernelSpec("periodic", 1.0)
        task, got = sample_synth_task(SynthTaskConfig(), rng, n_ic=3, spec=spec)
        assert got == spec and task.n_ic == 3

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            SynthTaskConfig(n_context=(5, 2))
        with pytest.raises(ConfigError):
            SynthTaskConfig.from_dict({"n_contexts": (1, 2)})


def tiny_images(n_per_label=5, labels=(0, 1, 2), side=6, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n_per_label * len(labels), side, side), dtype=np.uint8)
    return ImageSet.from_uint8(imgs, np.repeat(labels, n_per_label))


class TestImageTasks:
    def test_default_ranges(self):
        cfg = ImageTaskConfig()
        assert cfg.n_context == (7, 156) and cfg.n_ic_points == (7, 392)

    def test_coordinates(self):
        coords = tiny_images().coordinates()
        assert coords.shape == (36, 2)
        np.testing.assert_array_equal(coords[0], [-1, -1])
        np.testing.assert_array_equal(coords[-1], [1, 1])
        np.testing.assert_array_equal(coords[1], [-1, -0.6])

    def test_standardisation_uses_given_stats(self):
        imgs = tiny_images()
        vals = np.concatenate([imgs.values(i) for i in range(len(imgs.labels))])
        assert abs(vals.mean()) < 1e-12 and abs(vals.std() - 1) < 1e-12
        other = ImageSet.from_uint8(np.zeros((1, 6, 6), dtype=np.uint8), [0],
                                    stats_from=np.full((1, 6, 6), 255, dtype=np.uint8))
        assert other.mean == 1.0

    def test_task_structure(self, rng):
        imgs = tiny_images()
        cfg = ImageTaskConfig(n_pixels=36)
        for _ in range(20):
            task = sample_image_task(cfg, imgs, rng)
            m = task.meta
            assert all(imgs.labels[i] == m["label"] for i in m["images"])
            assert len(set(m["images"])) == len(m["images"]) == task.n_ic + 1
            pix = sorted(m["context_pixels"] + m["target_pixels"])
            assert pix == list(range(36))
            assert cfg.n_context[0] <= task.n_context <= cfg.n_context[1]
            np.testing.assert_array_equal(task.context.y, imgs.values(m["images"][0])[m["context_pixels"]])

    def test_not_enough_images(self, rng):
        imgs = tiny_images(n_per_label=2)
        with pytest.raises(TaskError):
            sample_image_task(ImageTaskConfig(n_pixels=36), imgs, rng, n_ic=3)

    def test_pixel_count_mismatch(self, rng):
        with pytest.raises(TaskError):
            sample_image_task(ImageTaskConfig(), tiny_images(), rng)


def write_raw(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I" + "I" * len(dims), magic, *dims))
        fh.write(payload)


class TestIdx:
    def test_round_trip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (3, 28, 28), dtype=np.uint8)
        labels = np.array([3, 1, 4], dtype=np.uint8)
        write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
        a, b = load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(a, imgs)
        np.testing.assert_array_equal(b, labels)

    def test_header_bytes(self, tmp_path):
        write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8))
        assert (tmp_path / "i").read_bytes()[:16] == bytes.fromhex("00000803 00000002 0000001c 0000001c")
        assert (tmp_path / "l").read_bytes()[:8] == bytes.fromhex("00000801 00000002")

    def test_gzip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (2, 28, 28), dtype=np.uint8)
        write_idx(tmp_path / "i", tmp_path / "l", imgs, np.zeros(2, np.uint8))
        for n in ("i", "l"):
            with gzip.open(tmp_path / f"{n}.gz", "wb") as fh:
                fh.write((tmp_path / n).read_bytes())
        np.testing.assert_array_equal(load_idx(tmp_path / "i.gz", tmp_path / "l.gz")[0], imgs)

    def test_bad_magic(self, tmp_path):
        write_raw(tmp_path / "i", 0x0803, (1, 28, 28), bytes(784))
        write_raw(tmp_path / "l", 0x0802, (1,), bytes(1))
        with pytest.raises(FormatError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_truncated_and_trailing(self, tmp_path):
        write_raw(tmp_path / "l", 0x0801, (2,), bytes(2))
        write_raw(tmp_path / "i", 0x0803, (2, 28, 28), bytes(784 * 2 - 1))
        with pytest.raises(FormatError):
            load_idx(tmp_path / "i", tmp_path / "l")
        write_raw(tmp_path / "i", 0x0803, (2, 28, 28), bytes(784 * 2 + 3))
        with pytest.raises(FormatError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_wrong_image_size_and_count(self, tmp_path):
        write_raw(tmp_path / "l", 0x0801, (1,), bytes(1))
        write_raw(tmp_path / "i", 0x0803, (1, 27, 28), bytes(27 * 28))
        with pytest.raises(FormatError):
            load_idx(tmp_path / "i", tmp_path / "l")
        write_raw(tmp_path / "i", 0x0803, (2, 28, 28), bytes(784 * 2))
        with pytest.raises(FormatError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_find_split(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            find_split(tmp_path, "train")
        write_idx(*(tmp_path / n for n in TRAIN_FILES), np.zeros((1, 28, 28), np.uint8), np.zeros(1, np.uint8))
        assert find_split(tmp_path, "train") == tuple(str(tmp_path / n) for n in TRAIN_FILES)

    def test_mnist_subset(self, mnist_dir):
        imgs, labels = load_idx(*find_split(mnist_dir, "train"))
        assert imgs.shape[1:] == (28, 28) and imgs.dtype == np.uint8
        assert set(np.unique(labels)) == set(range(10))


class TestGenerationAndCache:
    def test_deterministic_and_thread_independent(self):
        src = SynthSource(SynthTaskConfig(n_target=8, n_ic_points=(4, 6)))
        a = generate_tasks(src, 12, 7, 3)
        b = generate_tasks(src, 12, 7, 3, threads=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.target_y, y.target_y)
            assert x.n_ic == y.n_ic
        assert [t.n_ic for t in a] == [0, 1, 2, 3, 4, 5] * 2

    def test_cache_round_trip_1000_tasks(self, tmp_path):
        src = SynthSource()
        tasks = generate_tasks(src, 1000, 11, 3)
        save_task_cache(tmp_path / "c", tasks, {"config_hash": "abc"})
        back, meta = load_task_cache(tmp_path / "c", expected_hash="abc")
        assert len(back) == 1000 and meta["config_hash"] == "abc"
        for x, y in zip(tasks, back):
            for a, b in [(x.context.x, y.context.x), (x.context.y, y.context.y),
                         (x.target_x, y.target_x), (x.target_y, y.target_y)]:
                assert a.tobytes() == b.tobytes()
            assert x.n_ic == y.n_ic
            for p, q in zip(x.in_context, y.in_context):
                assert p.x.tobytes() == q.x.tobytes() and p.y.tobytes() == q.y.tobytes()
            assert x.meta["kernel"] == y.meta["kernel"]

    def test_cache_bytes_reproducible(self, tmp_path):
        src = SynthSource(SynthTaskConfig(n_target=8))
        for name in ("a", "b"):
            save_task_cache(tmp_path / name, generate_tasks(src, 20, 1, 3), {"config_hash": "h"})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_hash_mismatch_refused(self, tmp_path):
        src = SynthSource(SynthTaskConfig(n_target=8))
        save_task_cache(tmp_path / "c", generate_tasks(src, 3, 1, 3), {"config_hash": "h1"})
        with pytest.raises(ConfigError):
            load_task_cache(tmp_path / "c", expected_hash="h2")

    def test_config_hash_is_canonical(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_image_source(self, rng):
        src = ImageSource(tiny_images(), ImageTaskConfig(n_pixels=36))
        tasks = generate_tasks(src, 8, 0, 3)
        assert [t.n_ic for t in tasks] == [0, 1, 2, 3] * 2
        assert src.to_dict()["kind"] == "image"

    def test_nested_levels_share_base_task(self):
        src = SynthSource(SynthTaskConfig(n_target=8, n_ic_points=(4, 6)))
        tasks = generate_tasks(src, 14, 5, 3, nested=True)
        assert len(tasks) == 14 and [t.n_ic for t in tasks] == [0, 1, 2, 3, 4, 5] * 2 + [0, 1]
        full = tasks[5]
        for t in tasks[:5]:
            assert t.target_y.tobytes() == full.target_y.tobytes()
            assert t.context.y.tobytes() == full.context.y.tobytes()
            assert t.meta["kernel"] == full.meta["kernel"]
            assert all(a is b for a, b in zip(t.in_context, full.in_context))
        assert tasks[6].target_y.tobytes() != full.target_y.tobytes()
        threaded = generate_tasks(src, 14, 5, 3, nested=True, threads=3)
        assert all(a.target_y.tobytes() == b.target_y.tobytes() for a, b in zip(tasks, threaded))

    def test_nested_image_meta_tracks_prefix(self):
        src = ImageSource(tiny_images(), ImageTaskConfig(n_pixels=36))
        tasks = generate_tasks(src, 4, 0, 3, nested=True)
        assert [len(t.meta["images"]) for t in tasks] == [1, 2, 3, 4]
        assert len({t.meta["label"] for t in tasks}) == 1


class TestCollate:
    def test_padding_and_slots(self, rng):
        def ds(n):
            return Dataset(rng.standard_normal(n), rng.standard_normal(n))
        tasks = [Task(ds(2), np.zeros(3), np.zeros(3), [ds(4)]),
                 Task(ds(5), np.zeros(1), np.zeros(1), []),
                 Task(ds(1), np.zeros(2), np.zeros(2), [ds(2), ds(3)])]
        b = collate(tasks)
        assert b.xc.shape == (3, 5, 1) and b.xt.shape == (3, 3, 1)
        np.testing.assert_array_equal(b.mc.sum(1), [2, 5, 1])
        assert b.x_ic.shape == (3, 4, 1)
        np.testing.assert_array_equal(b.ic_owner, [0, 2, 2])
        np.testing.assert_array_equal(b.ic_slots, [[0, 3], [3, 3], [1, 2]])
        np.testing.assert_array_equal(b.ic_slot_mask, [[True, False], [False, False], [True, True]])

    def test_validation(self, rng):
        with pytest.raises(TaskError):
            collate([])
        with pytest.raises(TaskError):
            collate([Task(Dataset(np.zeros(2), np.zeros(2)), np.zeros((0, 1)))])
        with pytest.raises(TaskError):
            Dataset(np.zeros(3), np.zeros(2))
