"""Task distributions: 1-D GP regression and MNIST-style image completion."""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import TASKCACHE_MAGIC, read_arrays, write_arrays
from .data import Dataset, Task
from .errors import ConfigError, TaskError
from .gp import KernelSpec, gp_sample
from .rng import make_rng

# synthetic GP regression ------------------------------------------------------


@dataclass
class SynthTaskConfig:
    n_context: tuple = (1, 64)
    n_target: int = 128
    n_ic: tuple = (0, 5)
    n_ic_points: tuple = (64, 128)
    context_range: tuple = (-2.0, 2.0)
    target_range: tuple = (-4.0, 4.0)
    ic_range: tuple = (-4.0, 4.0)
    noise_std: float = 0.2
    ell_range: tuple = (0.25, 4.0)
    ood_ell_ranges: tuple = ((0.1, 0.25), (4.0, 10.0))
    ood: bool = False
    families: tuple = ("rbf", "periodic")

    def __post_init__(self):
        for k in ("n_context", "n_ic", "n_ic_points", "context_range", "target_range",
                  "ic_range", "ell_range", "families"):
            setattr(self, k, tuple(getattr(self, k)))
        self.ood_ell_ranges = tuple(tuple(r) for r in self.ood_ell_ranges)
        if self.n_target < 1 or self.n_context[0] < 0 or self.n_ic_points[0] < 1 or self.n_ic[0] < 0:
            raise ConfigError("synthetic task sizes out of range")
        if self.n_context[0] > self.n_context[1] or self.n_ic[0] > self.n_ic[1] \
                or self.n_ic_points[0] > self.n_ic_points[1]:
            raise ConfigError("size ranges must be (low, high) with low <= high")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown synthetic task keys: {sorted(set(d) - known)}")
        return cls(**d)


def sample_kernel(cfg, rng):
    """Family uniformly at random; ``log ell`` uniform on the (in- or out-of-distribution) range."""
    family = cfg.families[rng.integers(len(cfg.families))]
    if cfg.ood:
        widths = np.array([math.log(hi / lo) for lo, hi in cfg.ood_ell_ranges])
        k = rng.choice(len(widths), p=widths / widths.sum())
        lo, hi = cfg.ood_ell_ranges[k]
    else:
        lo, hi = cfg.ell_range
    return KernelSpec(family, float(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


def sample_synth_task(cfg, rng, n_ic=None, spec=None):
    """Sample ``(task, kernel)``.

    One kernel is drawn per task. Context and target observations come from a
    single function draw; each in-context dataset comes from its own
    independent draw under the same kernel. ``n_ic`` and ``spec`` override the
    sampled number of in-context datasets and kernel.
    """
    if spec is None:
        spec = sample_kernel(cfg, rng)
    nc = int(rng.integers(cfg.n_context[0], cfg.n_context[1] + 1))
    nt = cfg.n_target
    xc = rng.uniform(*cfg.context_range, size=nc)
    xt = rng.uniform(*cfg.target_range, size=nt)
    y = gp_sample(spec, np.concatenate([xc, xt]), cfg.noise_std, rng)
    if n_ic is None:
        n_ic = int(rng.integers(cfg.n_ic[0], cfg.n_ic[1] + 1))
    in_context = []
    for _ in range(n_ic):
        n = int(rng.integers(cfg.n_ic_points[0], cfg.n_ic_points[1] + 1))
        x = rng.uniform(*cfg.ic_range, size=n)
        in_context.append(Dataset(x, gp_sample(spec, x, cfg.noise_std, rng)))
    task = Task(Dataset(xc, y[:nc]), xt, y[nc:], in_context, meta={"kernel": spec.to_dict()})
    return task, spec


# image completion ---------------------------------------------------------------


@dataclass
class ImageTaskConfig:
    n_pixels: int = 784
    n_context: tuple = None
    n_ic: tuple = (0, 3)
    n_ic_points: tuple = None

    def __post_init__(self):
        n = self.n_pixels
        if self.n_context is None:
            self.n_context = (max(1, n // 100), n // 5)
        if self.n_ic_points is None:
            self.n_ic_points = (max(1, n // 100), n // 2)
        self.n_context = tuple(self.n_context)
        self.n_ic = tuple(self.n_ic)
        self.n_ic_points = tuple(self.n_ic_points)
        if not 1 <= self.n_context[0] <= self.n_context[1] < n:
            raise ConfigError("context size range must leave at least one target pixel")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown image task keys: {sorted(set(d) - known)}")
        return cls(**d)


@dataclass
class ImageSet:
    """Labelled greyscale images with the pixel standardisation to apply.

    ``mean`` and ``std`` are statistics of intensities in [0, 1] and should
    come from the training split.
    """

    images: np.ndarray          # [n, H, W] in [0, 1]
    labels: np.ndarray          # [n]
    mean: float
    std: float
    by_label: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise TaskError("image and label counts differ")
        self.by_label = {int(k): np.flatnonzero(self.labels == k) for k in np.unique(self.labels)}

    @classmethod
    def from_uint8(cls, images, labels, stats_from=None):
        """Scale raw bytes to [0, 1]; standardisation statistics come from ``stats_from`` (default: these images)."""
        imgs = np.asarray(images, dtype=np.float64) / 255.0
        ref = imgs if stats_from is None else np.asarray(stats_from, dtype=np.float64) / 255.0
        return cls(imgs, labels, float(ref.mean()), float(ref.std()))

    @property
    def shape(self):
        return self.images.shape[1:]

    def coordinates(self):
        """Pixel centres mapped affinely onto ``[-1, 1]^2``, row-major ``[H*W, 2]``."""
        h, w = self.shape
        r, c = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
        return np.stack([r.ravel(), c.ravel()], axis=1)

    def values(self, i):
        return ((self.images[i].ravel() - self.mean) / self.std)[:, None]


def sample_image_task(cfg, images, rng, n_ic=None, label=None):
    """Image completion task with label-matched in-context images.

    A label is drawn uniformly, then ``n_ic + 1`` distinct images with that
    label: the first supplies a context set (pixels drawn without
    replacement) and the remaining pixels as targets; each other image
    supplies one in-context dataset.
    """
    if cfg.n_pixels != int(np.prod(images.shape)):
        raise TaskError(f"config expects {cfg.n_pixels} pixels, images have {np.prod(images.shape)}")
    if n_ic is None:
        n_ic = int(rng.integers(cfg.n_ic[0], cfg.n_ic[1] + 1))
    labels = sorted(images.by_label)
    if label is None:
        label = labels[rng.integers(len(labels))]
    pool = images.by_label.get(int(label), np.array([], dtype=int))
    if len(pool) < n_ic + 1:
        raise TaskError(f"label {label} has {len(pool)} images, need {n_ic + 1}")
    chosen = rng.choice(pool, size=n_ic + 1, replace=False)
    coords = images.coordinates()
    n = cfg.n_pixels
    nc = int(rng.integers(cfg.n_context[0], cfg.n_context[1] + 1))
    perm = rng.permutation(n)
    y = images.values(chosen[0])
    ci, ti = perm[:nc], perm[nc:]
    in_context = []
    for idx in chosen[1:]:
        k = int(rng.integers(cfg.n_ic_points[0], cfg.n_ic_points[1] + 1))
        pix = rng.choice(n, size=k, replace=False)
        in_context.append(Dataset(coords[pix], images.values(idx)[pix]))
    meta = {"label": int(label), "images": [int(i) for i in chosen],
            "context_pixels": ci.tolist(), "target_pixels": ti.tolist()}
    return Task(Dataset(coords[ci], y[ci]), coords[ti], y[ti], in_context, meta=meta)


# task sources -------------------------------------------------------------------


class SynthSource:
    """Stream of synthetic GP tasks; ``sample(rng, n_ic)`` draws one task."""

    kind = "synthetic"

    def __init__(self, cfg=None):
        self.cfg = cfg or SynthTaskConfig()

    @property
    def n_ic_levels(self):
        return list(range(self.cfg.n_ic[0], self.cfg.n_ic[1] + 1))

    def sample(self, rng, n_ic=None):
        return sample_synth_task(self.cfg, rng, n_ic=n_ic)[0]

    def to_dict(self):
        return {"kind": self.kind, **self.cfg.to_dict()}


class ImageSource:
    """Stream of image-completion tasks over a fixed :class:`ImageSet`."""

    kind = "image"

    def __init__(self, images, cfg=None):
        self.images = images
        self.cfg = cfg or ImageTaskConfig(n_pixels=int(np.prod(images.shape)))

    @property
    def n_ic_levels(self):
        return list(range(self.cfg.n_ic[0], self.cfg.n_ic[1] + 1))

    def sample(self, rng, n_ic=None):
        return sample_image_task(self.cfg, self.images, rng, n_ic=n_ic)

    def to_dict(self):
        return {"kind": self.kind, **self.cfg.to_dict(), "n_images": int(self.images.images.shape[0])}


def with_in_context_prefix(task, k):
    """Copy of ``task`` keeping only its first ``k`` in-context datasets."""
    meta = dict(task.meta) if task.meta else task.meta
    if meta and "images" in meta:
        meta["images"] = meta["images"][:k + 1]
    return Task(task.context, task.target_x, task.target_y, task.in_context[:k], meta=meta)


def generate_tasks(source, n, seed, stream, stratify=True, threads=1, nested=False):
    """``n`` tasks, task ``i`` drawn from the stream ``(seed, stream, i)``.

    With ``stratify`` the number of in-context datasets cycles through
    ``source.n_ic_levels`` so every level gets an equal share. Each task has
    its own random stream, so the result does not depend on ``threads``.

    ``nested`` shares one base task across a whole cycle of levels: base task
    ``b`` is drawn from ``(seed, stream, b)`` with the largest number of
    in-context datasets and task ``i = b * n_levels + l`` keeps the first
    ``levels[l]`` of them. Differences between levels then come from the
    in-context data alone.
    """
    levels = source.n_ic_levels

    def one(i):
        if nested:
            base = source.sample(make_rng(seed, stream, i), n_ic=max(levels))
            return [with_in_context_prefix(base, k) for k in levels]
        n_ic = levels[i % len(levels)] if stratify else None
        return source.sample(make_rng(seed, stream, i), n_ic=n_ic)

    count = -(-n // len(levels)) if nested else n
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tasks = list(pool.map(one, range(count)))
    else:
        tasks = [one(i) for i in range(count)]
    if nested:
        tasks = [t for group in tasks for t in group][:n]
    return tasks


# task cache files ---------------------------------------------------------------

_CACHED_META = ("kernel", "label", "images")


def config_hash(obj):
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_task_cache(path, tasks, meta=None):
    """Write ``tasks`` (with their outputs) to a single cache file.

    Variable-size pieces are concatenated and their sizes stored alongside,
    so the file holds a fixed number of arrays however many tasks it has.
    """
    if not tasks:
        raise TaskError("refusing to cache an empty task list")
    d_x, d_y = tasks[0].d_x, tasks[0].d_y
    for t in tasks:
        t.validate()
        if t.target_y is None:
            raise TaskError("cached tasks need target outputs")
    ics = [ds for t in tasks for ds in t.in_context]
    arrays = {
        "n_context": [t.n_context for t in tasks],
        "n_target": [t.n_target for t in tasks],
        "n_ic": [t.n_ic for t in tasks],
        "ic_sizes": [len(ds) for ds in ics],
        "context_x": np.concatenate([t.context.x for t in tasks]).reshape(-1, d_x),
        "context_y": np.concatenate([t.context.y for t in tasks]).reshape(-1, d_y),
        "target_x": np.concatenate([t.target_x for t in tasks]),
        "target_y": np.concatenate([t.target_y for t in tasks]),
        "ic_x": np.concatenate([ds.x for ds in ics]) if ics else np.zeros((0, d_x)),
        "ic_y": np.concatenate([ds.y for ds in ics]) if ics else np.zeros((0, d_y)),
    }
    task_meta = [{k: t.meta[k] for k in _CACHED_META if t.meta and k in t.meta} for t in tasks]
    write_arrays(path, arrays, {"d_x": d_x, "d_y": d_y, "tasks": task_meta, **(meta or {})},
                 magic=TASKCACHE_MAGIC)


def load_task_cache(path, expected_hash=None):
    """Read a cache written by :func:`save_task_cache`; returns ``(tasks, meta)``.

    If ``expected_hash`` is given it must equal the ``config_hash`` stored in
    the file, otherwise :class:`ConfigError` is raised.
    """
    a, meta = read_arrays(path, magic=TASKCACHE_MAGIC)
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise ConfigError(f"{path}: cache was generated from a different config "
                          f"(hash {meta.get('config_hash')}, expected {expected_hash})")
    counts = {k: a[k].astype(np.int64) for k in ("n_context", "n_target", "n_ic", "ic_sizes")}
    cuts = lambda sizes: np.concatenate([[0], np.cumsum(sizes)])
    c_cut, t_cut, g_cut = cuts(counts["n_context"]), cuts(counts["n_target"]), cuts(counts["n_ic"])
    i_cut = cuts(counts["ic_sizes"])
    tasks = []
    for i, m in enumerate(meta["tasks"]):
        ctx = Dataset(a["context_x"][c_cut[i]:c_cut[i + 1]], a["context_y"][c_cut[i]:c_cut[i + 1]])
        ic = [Dataset(a["ic_x"][i_cut[j]:i_cut[j + 1]], a["ic_y"][i_cut[j]:i_cut[j + 1]])
              for j in range(g_cut[i], g_cut[i + 1])]
        tasks.append(Task(ctx, a["target_x"][t_cut[i]:t_cut[i + 1]],
                          a["target_y"][t_cut[i]:t_cut[i + 1]], ic, meta=dict(m)))
    return tasks, meta
