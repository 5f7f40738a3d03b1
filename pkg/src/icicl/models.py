"""Conditional neural process models.

Four families map a task to a factorised Gaussian over target outputs:

* :class:`CNP` - deepset encoder with mean pooling.
* :class:`ICICLCNP` - CNP that also pools each in-context dataset, averages
  those latents and concatenates them with the context latent.
* :class:`PTTNP` - pseudo-token transformer NP, perceiver style (pseudo-tokens
  read the context, self-attend, then are read by the targets) or IST style
  (pseudo-tokens and context tokens read each other).
* :class:`ICICLTNP` - pseudo-token transformer NP with one pseudo-token set
  per in-context dataset, cross-modulated with the context pseudo-tokens.

All models run on padded :class:`~icicl.data.Batch` objects. Padding never
leaks into real outputs: padded keys are masked out of every attention and
pooling operation, and blocks whose key set is empty for a task are gated
off for that task.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import TransformerBlock, TransformerBlockConfig
from .data import Batch, Task, collate
from .errors import ConfigError, TaskError
from .nn import MLP, Module
from .rng import STREAM_INIT, make_rng
from .tensor import Tensor

MODEL_KINDS = ("cnp", "icicl_cnp", "pt_tnp", "icicl_tnp")


@dataclass
class ModelConfig:
    kind: str = "icicl_tnp"
    d_x: int = 1
    d_y: int = 1
    d_z: int = 128
    n_layers: int = 5
    n_heads: int = 8
    d_v: int = 16
    d_qk: int = 16
    n_pseudo: int = 32
    n_pseudo_ic: int = 32
    style: str = "perceiver"
    variant: str = "main"
    cnp_encoder_layers: int = 5
    var_floor: float = 1e-6
    scale: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        if self.style not in ("perceiver", "ist"):
            raise ConfigError(f"unknown PT-TNP style {self.style!r}")
        if self.variant not in ("main", "alt"):
            raise ConfigError(f"unknown ICICL-TNP variant {self.variant!r}")
        for k in ("d_x", "d_y", "d_z", "n_layers", "n_heads", "d_v", "d_qk",
                  "n_pseudo", "n_pseudo_ic", "cnp_encoder_layers"):
            if int(getattr(self, k)) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.var_floor < 0:
            raise ConfigError("var_floor must be non-negative")

    def block_config(self):
        return TransformerBlockConfig(self.d_z, self.n_heads, self.d_v, self.d_qk,
                                      self.n_layers, self.scale)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GaussianPrediction:
    """Padded predictive ``[B, Nt, Dy]`` with the target validity mask."""

    mean: Tensor
    var: Tensor
    mask: np.ndarray

    def task(self, i):
        """Unpadded ``(mean, var)`` numpy arrays of batch element ``i``."""
        n = int(self.mask[i].sum())
        return self.mean.data[i, :n], self.var.data[i, :n]


def _masked_mean(x, mask):
    """Mean over axis 1 of ``x [B, N, D]`` counting only ``mask [B, N]``; zeros when empty."""
    counts = np.maximum(mask.sum(axis=1), 1).astype(np.float64)[:, None]
    weights = mask.astype(np.float64)[..., None]
    return T.tsum(x * weights, axis=1) / counts


def _gate(flags):
    """Per-element 0/1 gate, or ``None`` when every element is active."""
    flags = np.asarray(flags, dtype=bool)
    return None if flags.all() else flags.astype(np.float64)


class NeuralProcess(Module):
    """Shared embedding/decoding plumbing and the public call surface."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        self.rng_init = rng if rng is not None else make_rng(cfg.seed, STREAM_INIT)

    def _decoder(self, d_in, rng):
        d = self.cfg.d_z
        return MLP([d_in, d, d, 2 * self.cfg.d_y], rng)

    def _decode(self, h, mask):
        dy = self.cfg.d_y
        out = self.decoder(h)
        mean = out[..., :dy]
        var = T.softplus(out[..., dy:]) + self.cfg.var_floor
        return GaussianPrediction(mean, var, mask)

    def as_batch(self, tasks):
        if isinstance(tasks, Batch):
            return tasks
        return collate(tasks, allow_empty_ic=self.accepts_empty_ic)

    accepts_empty_ic = False

    def __call__(self, tasks):
        return self.forward(self.as_batch(tasks))

    def predict(self, task):
        """``(mean, var)`` numpy arrays for one task, without recording a graph."""
        with T.no_grad():
            return self(task).task(0)

    def embed_points(self, dataset, role="context"):
        """Point-wise token embedding ``[N, D_z]`` of a dataset (context) or inputs (target)."""
        if role == "context":
            x = np.concatenate([dataset.x, dataset.y], axis=-1)
            return self.context_embed(Tensor(x))
        if role == "target":
            x = dataset.x if hasattr(dataset, "x") else np.asarray(dataset, dtype=np.float64)
            return self.target_embed(Tensor(x))
        raise ValueError(f"role must be 'context' or 'target', got {role!r}")


class CNP(NeuralProcess):
    def __init__(self, cfg, rng=None):
        super().__init__(cfg, rng)
        rng = self.rng_init
        d = cfg.d_z
        enc = [cfg.d_x + cfg.d_y] + [d] * cfg.cnp_encoder_layers
        self.context_embed = MLP(enc, rng)
        self.target_embed = MLP([cfg.d_x, d, d, d], rng)
        self.decoder = self._decoder(2 * d, rng)

    def _context_latent(self, b):
        e = self.context_embed(Tensor(np.concatenate([b.xc, b.yc], axis=-1)))
        return _masked_mean(e, b.mc)

    def forward(self, b):
        nt = b.xt.shape[1]
        lat = self._context_latent(b)
        lat = T.broadcast_to(T.reshape(lat, (b.size, 1, -1)), (b.size, nt, self.cfg.d_z))
        h = T.concat([lat, self.target_embed(Tensor(b.xt))], axis=-1)
        return self._decode(h, b.mt)


class ICICLCNP(CNP):
    accepts_empty_ic = True

    def __init__(self, cfg, rng=None):
        NeuralProcess.__init__(self, cfg, rng)
        rng = self.rng_init
        d = cfg.d_z
        enc = [cfg.d_x + cfg.d_y] + [d] * cfg.cnp_encoder_layers
        self.context_embed = MLP(enc, rng)
        self.ic_embed = MLP(enc, rng)
        self.target_embed = MLP([cfg.d_x, d, d, d], rng)
        self.decoder = self._decoder(3 * d, rng)

    def forward(self, b):
        d, nt = self.cfg.d_z, b.xt.shape[1]
        lat = self._context_latent(b)
        if b.n_ic_datasets and b.x_ic.shape[1]:
            e = self.ic_embed(Tensor(np.concatenate([b.x_ic, b.y_ic], axis=-1)))
            per_ds = _masked_mean(e, b.m_ic)                           # [J, D]
            padded = T.concat([per_ds, Tensor(np.zeros((1, d)))], axis=0)
            ic_lat = _masked_mean(T.take(padded, b.ic_slots), b.ic_slot_mask)
        else:
            ic_lat = Tensor(np.zeros((b.size, d)))
        joint = T.concat([lat, ic_lat], axis=-1)
        joint = T.broadcast_to(T.reshape(joint, (b.size, 1, 2 * d)), (b.size, nt, 2 * d))
        h = T.concat([joint, self.target_embed(Tensor(b.xt))], axis=-1)
        return self._decode(h, b.mt)


class _TNPBase(NeuralProcess):
    def __init__(self, cfg, rng=None):
        super().__init__(cfg, rng)
        rng = self.rng_init
        d = cfg.d_z
        self.context_embed = MLP([cfg.d_x + cfg.d_y, d, d, d], rng)
        self.target_embed = MLP([cfg.d_x, d, d, d], rng)
        self.pseudo = Tensor(rng.standard_normal((cfg.n_pseudo, d)), requires_grad=True)
        self.decoder = self._decoder(d, rng)

    def _tokens(self, b):
        zc = self.context_embed(Tensor(np.concatenate([b.xc, b.yc], axis=-1)))
        zt = self.target_embed(Tensor(b.xt))
        u = T.broadcast_to(self.pseudo, (b.size, *self.pseudo.shape))
        return zc, zt, u


class PTTNP(_TNPBase):
    def __init__(self, cfg, rng=None):
        super().__init__(cfg, rng)
        rng = self.rng_init
        bc = cfg.block_config()
        self.read_context = [TransformerBlock(bc, rng, cross=True) for _ in range(cfg.n_layers)]
        if cfg.style == "perceiver":
            self.pseudo_self = [TransformerBlock(bc, rng) for _ in range(cfg.n_layers)]
        else:
            self.context_read = [TransformerBlock(bc, rng, cross=True) for _ in range(cfg.n_layers)]
        self.read_pseudo = [TransformerBlock(bc, rng, cross=True) for _ in range(cfg.n_layers)]

    def forward(self, b):
        zc, zt, u = self._tokens(b)
        gate_c = _gate(b.n_context > 0)
        for layer in range(self.cfg.n_layers):
            u = self.read_context[layer](u, zc, key_mask=b.mc, gate=gate_c)
            if self.cfg.style == "perceiver":
                u = self.pseudo_self[layer](u)
            elif zc.shape[1]:
                zc = self.context_read[layer](zc, u)
            zt = self.read_pseudo[layer](zt, u)
        return self._decode(zt, b.mt)


class ICICLTNP(_TNPBase):
    """Pseudo-token TNP conditioning on a context set and a set of datasets.

    Per layer (``variant="main"``):

    1. each in-context pseudo-token set reads its dataset; the context
       pseudo-tokens read the context set
    2. in-context pseudo-tokens read the context pseudo-tokens
    3. every pseudo-token set self-attends
    4. context pseudo-tokens read the concatenation of all in-context
       pseudo-token sets of their task
    5. target tokens read the context pseudo-tokens

    ``variant="alt"`` moves step 4 ahead of step 2, so the context
    pseudo-tokens are modulated first and the in-context sets then read the
    modulated context pseudo-tokens, with self-attention last. Steps 2 and 4
    are skipped for a task without in-context datasets, which reduces the
    model to the perceiver-style PT-TNP path. One set of in-context weights
    and one learned initial in-context pseudo-token array serve every dataset.
    """

    def __init__(self, cfg, rng=None):
        super().__init__(cfg, rng)
        rng = self.rng_init
        bc = cfg.block_config()
        L = cfg.n_layers
        self.pseudo_ic = Tensor(rng.standard_normal((cfg.n_pseudo_ic, cfg.d_z)), requires_grad=True)
        self.read_context = [TransformerBlock(bc, rng, cross=True) for _ in range(L)]
        self.read_ic_data = [TransformerBlock(bc, rng, cross=True) for _ in range(L)]
        self.ic_read_pseudo = [TransformerBlock(bc, rng, cross=True) for _ in range(L)]
        self.pseudo_self = [TransformerBlock(bc, rng) for _ in range(L)]
        self.ic_self = [TransformerBlock(bc, rng) for _ in range(L)]
        self.pseudo_read_ic = [TransformerBlock(bc, rng, cross=True) for _ in range(L)]
        self.read_pseudo = [TransformerBlock(bc, rng, cross=True) for _ in range(L)]

    def _gather_ic(self, uic, b):
        # [J, Mic, D] -> [B, Jmax*Mic, D] keys and their mask
        mic, d = uic.shape[1], uic.shape[2]
        padded = T.concat([uic, Tensor(np.zeros((1, mic, d)))], axis=0)
        keys = T.take(padded, b.ic_slots)
        jmax = b.ic_slots.shape[1]
        keys = T.reshape(keys, (b.size, jmax * mic, d))
        mask = np.repeat(b.ic_slot_mask, mic, axis=1)
        return keys, mask

    def forward(self, b):
        zc, zt, u = self._tokens(b)
        has_ic = b.n_ic_datasets > 0
        gate_c = _gate(b.n_context > 0)
        gate_ic = _gate(b.n_ic > 0)
        uic = zic = None
        if has_ic:
            zic = self.context_embed(Tensor(np.concatenate([b.x_ic, b.y_ic], axis=-1)))
            uic = T.broadcast_to(self.pseudo_ic, (b.n_ic_datasets, *self.pseudo_ic.shape))
        for layer in range(self.cfg.n_layers):
            if has_ic:
                uic = self.read_ic_data[layer](uic, zic, key_mask=b.m_ic)
            u = self.read_context[layer](u, zc, key_mask=b.mc, gate=gate_c)
            if self.cfg.variant == "main":
                if has_ic:
                    uic = self.ic_read_pseudo[layer](uic, T.take(u, b.ic_owner))
                    uic = self.ic_self[layer](uic)
                u = self.pseudo_self[layer](u)
                if has_ic:
                    keys, mask = self._gather_ic(uic, b)
                    u = self.pseudo_read_ic[layer](u, keys, key_mask=mask, gate=gate_ic)
            else:
                if has_ic:
                    keys, mask = self._gather_ic(uic, b)
                    u = self.pseudo_read_ic[layer](u, keys, key_mask=mask, gate=gate_ic)
                    uic = self.ic_read_pseudo[layer](uic, T.take(u, b.ic_owner))
                    uic = self.ic_self[layer](uic)
                u = self.pseudo_self[layer](u)
            zt = self.read_pseudo[layer](zt, u)
        return self._decode(zt, b.mt)


_CLASSES = {"cnp": CNP, "icicl_cnp": ICICLCNP, "pt_tnp": PTTNP, "icicl_tnp": ICICLTNP}


def build_model(cfg, rng=None):
    if isinstance(cfg, dict):
        cfg = ModelConfig.from_dict(cfg)
    return _CLASSES[cfg.kind](cfg, rng)


# analytic multiply-accumulate counts ------------------------------------------

def _mlp_macs(n, widths):
    return n * sum(a * b for a, b in zip(widths[:-1], widths[1:]))


def _block_macs(cfg, nq, nk):
    if nq == 0 or nk == 0:
        return 0
    d, h = cfg.d_z, cfg.n_heads
    attn = (nq * d * h * cfg.d_qk + nk * d * h * (cfg.d_qk + cfg.d_v)
            + h * nq * nk * (cfg.d_qk + cfg.d_v) + nq * h * cfg.d_v * d)
    return attn + _mlp_macs(nq, [d, d, d, d])


def count_flops(model, task):
    """Multiply-accumulate count of one forward pass on ``task``.

    Counts every matrix product (projections, attention logits and
    aggregation, MLP layers); elementwise work is ignored.
    """
    cfg = model.cfg if isinstance(model, Module) else model
    kind = cfg.kind
    nc, nt = task.n_context, task.n_target
    nics = [len(ds) for ds in task.in_context]
    d, dx, dy = cfg.d_z, cfg.d_x, cfg.d_y
    decoder_in = {"cnp": 2 * d, "icicl_cnp": 3 * d}.get(kind, d)
    total = _mlp_macs(nt, [dx, d, d, d]) + _mlp_macs(nt, [decoder_in, d, d, 2 * dy])
    if kind in ("cnp", "icicl_cnp"):
        enc = [dx + dy] + [d] * cfg.cnp_encoder_layers
        total += _mlp_macs(nc, enc)
        if kind == "icicl_cnp":
            total += sum(_mlp_macs(n, enc) for n in nics)
        return total
    emb = [dx + dy, d, d, d]
    total += _mlp_macs(nc, emb)
    M, Mic = cfg.n_pseudo, cfg.n_pseudo_ic
    per_layer = _block_macs(cfg, M, nc) + _block_macs(cfg, nt, M)
    if kind == "pt_tnp":
        if cfg.style == "perceiver":
            per_layer += _block_macs(cfg, M, M)
        else:
            per_layer += _block_macs(cfg, nc, M)
        return total + cfg.n_layers * per_layer
    total += sum(_mlp_macs(n, emb) for n in nics)
    per_layer += _block_macs(cfg, M, M)
    if nics:
        per_layer += sum(_block_macs(cfg, Mic, n) for n in nics)
        per_layer += len(nics) * (_block_macs(cfg, Mic, M) + _block_macs(cfg, Mic, Mic))
        per_layer += _block_macs(cfg, M, Mic * len(nics))
    return total + cfg.n_layers * per_layer


def count_flops_full_tnp(cfg, n_context, n_target):
    """Multiply-accumulate count of a full-attention TNP of the same width.

    Context and target tokens are projected together; every token attends to
    the whole context set, so the attention term grows as ``N_c^2 + N_c N_t``.
    """
    d, h, dx, dy = cfg.d_z, cfg.n_heads, cfg.d_x, cfg.d_y
    n = n_context + n_target
    total = _mlp_macs(n_context, [dx + dy, d, d, d]) + _mlp_macs(n_target, [dx, d, d, d])
    total += _mlp_macs(n_target, [d, d, d, 2 * dy])
    per_layer = (n * d * h * cfg.d_qk + n_context * d * h * (cfg.d_qk + cfg.d_v)
                 + h * n * n_context * (cfg.d_qk + cfg.d_v) + n * h * cfg.d_v * d
                 + _mlp_macs(n, [d, d, d, d]))
    return total + cfg.n_layers * per_layer
