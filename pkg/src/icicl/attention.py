"""Multi-head self- and cross-attention and the pre-norm residual block.

Attention logits are the plain bilinear form ``q^T W_Q W_K^T k`` with no
``1/sqrt(D_QK)`` factor unless ``scale=True`` is requested. Heads are stored
stacked: head ``h`` of ``w_q`` is the column block ``h*D_QK:(h+1)*D_QK`` and
all heads share the output projection ``w_o``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateMaskError, DimensionError, EmptyKeysError
from .nn import MLP, LayerNorm, Module, glorot_uniform
from .tensor import Tensor


@dataclass
class TransformerBlockConfig:
    d_z: int = 128
    n_heads: int = 8
    d_v: int = 16
    d_qk: int = 16
    n_layers: int = 5
    scale: bool = False

    def __post_init__(self):
        for k in ("d_z", "n_heads", "d_v", "d_qk", "n_layers"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")


class AttentionWeights(Module):
    """Per-head query/key/value projections plus the shared output projection."""

    def __init__(self, d_z, n_heads, d_qk, d_v, rng, scale=False):
        self.w_q = Tensor(glorot_uniform(rng, d_z, n_heads * d_qk), requires_grad=True)
        self.w_k = Tensor(glorot_uniform(rng, d_z, n_heads * d_qk), requires_grad=True)
        self.w_v = Tensor(glorot_uniform(rng, d_z, n_heads * d_v), requires_grad=True)
        self.w_o = Tensor(glorot_uniform(rng, n_heads * d_v, d_z), requires_grad=True)
        self.d_z, self.n_heads, self.d_qk, self.d_v = d_z, n_heads, d_qk, d_v
        self.scale = scale

    def head(self, h):
        """Numpy copies ``(W_Q, W_K, W_V)`` of head ``h``."""
        q = slice(h * self.d_qk, (h + 1) * self.d_qk)
        v = slice(h * self.d_v, (h + 1) * self.d_v)
        return self.w_q.data[:, q], self.w_k.data[:, q], self.w_v.data[:, v]


def _split_heads(x, n_heads, d):
    # [..., N, H*d] -> [..., H, N, d]
    lead = x.shape[:-2]
    n = x.shape[-2]
    x = T.reshape(x, (*lead, n, n_heads, d))
    k = len(lead)
    return T.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x):
    # [..., H, N, d] -> [..., N, H*d]
    lead = x.shape[:-3]
    h, n, d = x.shape[-3:]
    k = len(lead)
    x = T.transpose(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * d))


def attend(queries, keys, w, mask=None, allow_empty=False, return_weights=False):
    """Multi-head attention of ``queries [..., N, D]`` over ``keys [..., M, D]``.

    ``mask`` is boolean with ``True`` for allowed pairs; either per key
    ``[..., M]`` or per pair ``[..., N, M]``.
    """
    queries, keys = T.as_tensor(queries), T.as_tensor(keys)
    if queries.shape[-1] != w.d_z or keys.shape[-1] != w.d_z:
        raise DimensionError(f"attention expects token size {w.d_z}, got {queries.shape} and {keys.shape}")
    q = _split_heads(T.matmul(queries, w.w_q), w.n_heads, w.d_qk)
    k = _split_heads(T.matmul(keys, w.w_k), w.n_heads, w.d_qk)
    v = _split_heads(T.matmul(keys, w.w_v), w.n_heads, w.d_v)
    logits = T.matmul(q, T.swap_last(k))
    if w.scale:
        logits = logits * (1.0 / np.sqrt(w.d_qk))
    m = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == keys.ndim - 1:
            m = mask[..., None, None, :]
        else:
            m = mask[..., None, :, :]
    alpha = T.softmax(logits, axis=-1, mask=m, allow_empty=allow_empty)
    out = T.matmul(_merge_heads(T.matmul(alpha, v)), w.w_o)
    return (out, alpha) if return_weights else out


def attention_weights(queries, keys, w, h=0):
    """Attention matrix ``[N, M]`` of head ``h``; rows sum to one."""
    _, alpha = attend(queries, keys, w, return_weights=True)
    return alpha[..., h, :, :]


def mhsa(Z, w):
    """Multi-head self-attention over the token set ``Z [..., N, D]``."""
    Z = T.as_tensor(Z)
    if Z.shape[-2] < 1:
        raise DimensionError("self-attention needs at least one token")
    return attend(Z, Z, w)


def masked_mhsa(Z, w, blocked):
    """Self-attention where token ``n`` ignores the tokens listed in ``blocked[n]``.

    ``blocked`` is a sequence of index collections, one per query, or an
    ``[N, N]`` boolean array with ``True`` marking blocked pairs.
    """
    Z = T.as_tensor(Z)
    n = Z.shape[-2]
    if isinstance(blocked, np.ndarray) and blocked.dtype == bool:
        allowed = ~blocked
    else:
        if len(blocked) != n:
            raise DimensionError(f"need one blocked set per token ({n}), got {len(blocked)}")
        allowed = np.ones((n, n), dtype=bool)
        for i, idx in enumerate(blocked):
            allowed[i, list(idx)] = False
    if not allowed.any(axis=-1).all():
        raise DegenerateMaskError("a query row has every key blocked")
    return attend(Z, Z, w, mask=allowed)


def mhca(queries, keys, w, key_mask=None):
    """Multi-head cross-attention: ``queries`` attend over ``keys`` only."""
    keys = T.as_tensor(keys)
    if keys.shape[-2] == 0:
        raise EmptyKeysError("cross-attention needs at least one key")
    return attend(queries, keys, w, mask=key_mask)


class TransformerBlock(Module):
    """Pre-norm residual attention block followed by a pre-norm residual MLP.

    ``x <- x + Attn(LN(x), LN(context or x))``, then ``x <- x + MLP(LN(x))``.
    The feed-forward network has two hidden layers of width ``d_z``.

    When called on a padded batch, ``key_mask`` marks real keys and ``gate``
    (one 0/1 value per batch element) switches the whole block off for
    elements that have nothing to attend to; a gated-off element passes
    through bit-unchanged.
    """

    def __init__(self, cfg, rng, cross=False):
        d = cfg.d_z
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d) if cross else None
        self.attn = AttentionWeights(d, cfg.n_heads, cfg.d_qk, cfg.d_v, rng, scale=cfg.scale)
        self.ln_ff = LayerNorm(d)
        self.ff = MLP([d, d, d, d], rng)
        self.cross = cross

    def __call__(self, x, context=None, key_mask=None, gate=None):
        if self.cross != (context is not None):
            raise ValueError("cross blocks need a context and self blocks must not get one")
        if context is not None and context.shape[-2] == 0:
            if gate is not None and not np.any(gate):
                return x
            raise EmptyKeysError("cross-attention needs at least one key")
        g = None
        if gate is not None:
            g = np.asarray(gate, dtype=np.float64).reshape(-1, *([1] * (x.ndim - 1)))
        h = self.ln_q(x)
        if context is None:
            a = attend(h, h, self.attn, mask=key_mask, allow_empty=gate is not None)
        else:
            a = attend(h, self.ln_kv(context), self.attn, mask=key_mask, allow_empty=gate is not None)
        x = x + (a * g if g is not None else a)
        f = self.ff(self.ln_ff(x))
        return x + (f * g if g is not None else f)
