"""Datasets, tasks, and padded batches.

A :class:`Task` is one meta-learning instance: a context set, an ordered
list of in-context datasets drawn from the same process, and target inputs
(with outputs for training and evaluation).

Models consume a :class:`Batch`, which pads tasks of different sizes into
rectangular arrays with boolean validity masks. In-context datasets of all
tasks are stacked into one flat array, with ``ic_owner`` mapping each back
to its task and ``ic_slots`` listing each task's datasets in order.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import TaskError


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.x.shape[0] != self.y.shape[0]:
            raise TaskError(f"inputs and outputs disagree on size: {self.x.shape} vs {self.y.shape}")

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def empty(cls, d_x=1, d_y=1):
        return cls(np.zeros((0, d_x)), np.zeros((0, d_y)))

    def permuted(self, perm):
        return Dataset(self.x[perm], self.y[perm])


@dataclass
class Task:
    context: Dataset
    target_x: np.ndarray
    target_y: np.ndarray = None
    in_context: list = field(default_factory=list)
    meta: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.target_x = np.asarray(self.target_x, dtype=np.float64)
        if self.target_x.ndim == 1:
            self.target_x = self.target_x[:, None]
        if self.target_y is not None:
            self.target_y = np.asarray(self.target_y, dtype=np.float64)
            if self.target_y.ndim == 1:
                self.target_y = self.target_y[:, None]

    @property
    def n_context(self):
        return len(self.context)

    @property
    def n_target(self):
        return self.target_x.shape[0]

    @property
    def n_ic(self):
        return len(self.in_context)

    @property
    def d_x(self):
        return self.target_x.shape[1]

    @property
    def d_y(self):
        return self.context.y.shape[1]

    def validate(self, allow_empty_ic=False):
        if self.n_target < 1:
            raise TaskError("a task needs at least one target point")
        if self.target_y is not None and self.target_y.shape[0] != self.n_target:
            raise TaskError("target inputs and outputs disagree on size")
        d_x, d_y = self.d_x, self.d_y
        if self.context.x.shape[1] != d_x:
            raise TaskError("context and target input dimensions differ")
        if self.target_y is not None and self.target_y.shape[1] != d_y:
            raise TaskError("context and target output dimensions differ")
        for j, ds in enumerate(self.in_context):
            if ds.x.shape[1] != d_x or ds.y.shape[1] != d_y:
                raise TaskError(f"in-context dataset {j} has mismatched dimensions")
            if len(ds) == 0 and not allow_empty_ic:
                raise TaskError(f"in-context dataset {j} is empty")
        return self


@dataclass
class Batch:
    """Padded, masked view of a list of tasks."""

    xc: np.ndarray          # [B, Nc, Dx]
    yc: np.ndarray          # [B, Nc, Dy]
    mc: np.ndarray          # [B, Nc] bool
    xt: np.ndarray          # [B, Nt, Dx]
    yt: np.ndarray          # [B, Nt, Dy] or None
    mt: np.ndarray          # [B, Nt] bool
    x_ic: np.ndarray        # [J, Nic, Dx]
    y_ic: np.ndarray        # [J, Nic, Dy]
    m_ic: np.ndarray        # [J, Nic] bool
    ic_owner: np.ndarray    # [J] task index of each in-context dataset
    ic_slots: np.ndarray    # [B, Jmax] index into J, J for empty slots
    ic_slot_mask: np.ndarray  # [B, Jmax] bool
    n_context: np.ndarray   # [B]
    n_target: np.ndarray    # [B]
    n_ic: np.ndarray        # [B]

    @property
    def size(self):
        return self.xc.shape[0]

    @property
    def n_ic_datasets(self):
        return self.x_ic.shape[0]


def _pad(arrays, width, dim):
    out = np.zeros((len(arrays), width, dim))
    mask = np.zeros((len(arrays), width), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
        mask[i, :len(a)] = True
    return out, mask


def collate(tasks, allow_empty_ic=False):
    """Stack ``tasks`` into a :class:`Batch`."""
    if isinstance(tasks, Task):
        tasks = [tasks]
    if not tasks:
        raise TaskError("cannot collate an empty list of tasks")
    for t in tasks:
        t.validate(allow_empty_ic=allow_empty_ic)
    d_x, d_y = tasks[0].d_x, tasks[0].d_y
    nc = np.array([t.n_context for t in tasks])
    nt = np.array([t.n_target for t in tasks])
    nic = np.array([t.n_ic for t in tasks])

    xc, mc = _pad([t.context.x for t in tasks], nc.max(), d_x)
    yc, _ = _pad([t.context.y for t in tasks], nc.max(), d_y)
    xt, mt = _pad([t.target_x for t in tasks], nt.max(), d_x)
    yt = None
    if all(t.target_y is not None for t in tasks):
        yt, _ = _pad([t.target_y for t in tasks], nt.max(), d_y)

    ic = [(b, ds) for b, t in enumerate(tasks) for ds in t.in_context]
    width = max((len(ds) for _, ds in ic), default=0)
    x_ic, m_ic = _pad([ds.x for _, ds in ic], width, d_x)
    y_ic, _ = _pad([ds.y for _, ds in ic], width, d_y)
    owner = np.array([b for b, _ in ic], dtype=np.intp)
    jmax = int(nic.max())
    slots = np.full((len(tasks), jmax), len(ic), dtype=np.intp)
    slot_mask = np.zeros((len(tasks), jmax), dtype=bool)
    j = 0
    for b, t in enumerate(tasks):
        slots[b, :t.n_ic] = np.arange(j, j + t.n_ic)
        slot_mask[b, :t.n_ic] = True
        j += t.n_ic
    return Batch(xc, yc, mc, xt, yt, mt, x_ic.reshape(len(ic), width, d_x),
                 y_ic.reshape(len(ic), width, d_y), m_ic.reshape(len(ic), width),
                 owner, slots, slot_mask, nc, nt, nic)
