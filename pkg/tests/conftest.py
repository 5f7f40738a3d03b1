import os

import numpy as np
import pytest

from icicl import tensor as T
from icicl.data import Dataset, Task
from icicl.idx import TEST_FILES, TRAIN_FILES, write_idx
from icicl.tensor import Tensor


def numerical_grad(f, x, h=1e-6):
    """Central finite differences of the scalar ``f()`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_grads(fn, *arrays, h=1e-6, rtol=1e-5, atol=1e-7):
    """Compare autodiff gradients of ``sum(fn(*tensors) * weights)`` with finite differences."""
    rng = np.random.default_rng(0)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)
    T.backward(T.tsum(out * weights))
    for t in tensors:
        data = t.data

        def scalar():
            return float(np.sum(fn(*[Tensor(s.data) for s in tensors]).data * weights))

        num = numerical_grad(scalar, data, h)
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


def random_task(rng, n_context=5, n_target=4, ic_sizes=(3, 6), d_x=1, d_y=1):
    def ds(n):
        return Dataset(rng.standard_normal((n, d_x)), rng.standard_normal((n, d_y)))
    return Task(ds(n_context), rng.standard_normal((n_target, d_x)),
                rng.standard_normal((n_target, d_y)), [ds(n) for n in ic_sizes])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _export_mnist(directory):
    """Write the MNIST subset bundled with mlxtend as IDX train/test files."""
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    labels = y.astype(np.uint8)
    order = np.random.default_rng(0).permutation(len(labels))
    train, test = order[:4000], order[4000:]
    write_idx(*(os.path.join(directory, n) for n in TRAIN_FILES), images[train], labels[train])
    write_idx(*(os.path.join(directory, n) for n in TEST_FILES), images[test], labels[test])
    return directory


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    env = os.environ.get("ICICL_DATA_DIR")
    if env and os.path.exists(os.path.join(env, TRAIN_FILES[0])):
        return env
    return _export_mnist(str(tmp_path_factory.mktemp("mnist")))


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
