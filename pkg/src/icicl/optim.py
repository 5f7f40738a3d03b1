"""AdamW with global-norm gradient clipping."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm):
    """Scale every gradient by ``max_norm / norm`` when the joint norm exceeds it."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return [g for g in grads], norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(params, grads, state, clip=0.5):
    """One AdamW update, in place on ``params``; returns the pre-clip grad norm.

    Order: global-norm clipping, decoupled weight decay, then the bias-corrected
    Adam step.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer moments differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    grads, norm = clip_by_global_norm(grads, clip)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, params, lr=5e-4, weight_decay=0.01, clip=0.5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.clip = clip
        self.state = OptimizerState.for_params(
            self.params, lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        return adamw_step(self.params, grads, self.state, self.clip)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
