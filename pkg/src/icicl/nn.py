"""Parameter containers and point-wise layers."""

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


def glorot_uniform(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Module:
    """Base class that discovers parameters among instance attributes.

    Attributes holding a ``Tensor`` with ``requires_grad`` set, another
    ``Module``, or a list of modules are walked in definition order, so
    parameter names are stable across runs.
    """

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Affine layers joined by ReLU; ``widths`` lists every layer size.

    ``MLP([2, 64, 64, 64], rng)`` is the two-hidden-layer network used for
    point-wise embeddings, decoders and the transformer feed-forward blocks.
    """

    def __init__(self, widths, rng):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.widths = list(widths)

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


def mlp(x, weights, biases):
    """Functional MLP: affine, ReLU, ..., affine over explicit weight lists."""
    if len(weights) != len(biases):
        raise DimensionError("mlp needs one bias per weight matrix")
    for i, (w, b) in enumerate(zip(weights, biases)):
        w, b = T.as_tensor(w), T.as_tensor(b)
        if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise DimensionError(f"mlp layer {i}: input {x.shape}, weight {w.shape}, bias {b.shape}")
        x = T.matmul(x, w) + b
        if i < len(weights) - 1:
            x = T.relu(x)
    return x


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)
