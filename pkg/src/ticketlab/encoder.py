"""BERT-style encoder with per-head parameters and structured mask gates.

Parameters live in a plain ``dict[str, np.ndarray]`` keyed by dotted names
(``layer0.head2.W_q``, ``layer1.mlp.W_in`` ...).  Every attention head owns
its own ``W_q, W_k, W_v`` (``d_h x d``) and ``W_o`` (``d x d_h``), so the
multi-head output is literally the sum of per-head terms and a head with
``xi = 0`` is skipped rather than multiplied by zero.

Layer wiring::

    a   = sum_h xi[l, h] * Att_h(x)
    z   = LayerNorm(x + a)
    out = LayerNorm(nu[l] * MLP(z) + z)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

INIT_STD = 0.02
LN_EPS = 1e-12


class ConfigurationError(ValueError):
    """Masks or parameters do not match the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 32
    ff_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 16
    dropout_rate: float = 0.0
    init_seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "ff_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.model_dim % self.num_heads:
            raise ConfigurationError("model_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def total_heads(self) -> int:
        return self.num_layers * self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SubnetworkMask:
    """Binary head mask ``xi`` (layers x heads) and MLP mask ``nu`` (layers)."""

    xi: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.int8)
        self.nu = np.asarray(self.nu, dtype=np.int8)
        if self.xi.ndim != 2 or self.nu.ndim != 1 or self.xi.shape[0] != self.nu.shape[0]:
            raise ConfigurationError(f"bad mask shapes xi={self.xi.shape} nu={self.nu.shape}")
        if not (np.isin(self.xi, (0, 1)).all() and np.isin(self.nu, (0, 1)).all()):
            raise ConfigurationError("mask entries must be 0 or 1")

    @classmethod
    def full(cls, config: ModelConfig) -> "SubnetworkMask":
        return cls(np.ones((config.num_layers, config.num_heads)), np.ones(config.num_layers))

    @classmethod
    def empty(cls, config: ModelConfig) -> "SubnetworkMask":
        return cls(np.zeros((config.num_layers, config.num_heads)), np.zeros(config.num_layers))

    def copy(self) -> "SubnetworkMask":
        return SubnetworkMask(self.xi.copy(), self.nu.copy())

    def check(self, config: ModelConfig):
        if self.xi.shape != (config.num_layers, config.num_heads) or self.nu.shape != (config.num_layers,):
            raise ConfigurationError("subnetwork mask does not match model config")

    @property
    def num_heads(self) -> int:
        return int(self.xi.sum())

    @property
    def num_mlps(self) -> int:
        return int(self.nu.sum())

    def __eq__(self, other):
        return (
            isinstance(other, SubnetworkMask)
            and np.array_equal(self.xi, other.xi)
            and np.array_equal(self.nu, other.nu)
        )


# A weight mask maps each prunable parameter name to a boolean array of the
# same shape.  Names absent from the mask are never masked.
WeightMask = dict


# -- parameters ----------------------------------------------------------------

def head_param_names(layer: int, head: int) -> list:
    p = f"layer{layer}.head{head}."
    return [p + "W_q", p + "W_k", p + "W_v", p + "W_o"]


def mlp_param_names(layer: int) -> list:
    p = f"layer{layer}.mlp."
    return [p + "W_in", p + "b_in", p + "W_out", p + "b_out"]


def is_embedding(name: str) -> bool:
    return name.startswith("embeddings.")


def is_task_head(name: str) -> bool:
    return name.startswith("classifier.") or name.startswith("mlm.")


def is_prunable(name: str, value: np.ndarray) -> bool:
    """Weight matrices of the body (attention, MLP, pooler) are magnitude-prunable."""
    return value.ndim == 2 and not is_embedding(name) and not is_task_head(name)


def param_shapes(config: ModelConfig, num_labels: int = 2) -> dict:
    d, dh, ff = config.model_dim, config.head_dim, config.ff_dim
    shapes = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_seq_len, d),
        "embeddings.ln_gain": (d,),
        "embeddings.ln_bias": (d,),
    }
    for l in range(config.num_layers):
        for h in range(config.num_heads):
            q, k, v, o = head_param_names(l, h)
            shapes[q] = shapes[k] = shapes[v] = (dh, d)
            shapes[o] = (d, dh)
        shapes[f"layer{l}.attn_ln_gain"] = (d,)
        shapes[f"layer{l}.attn_ln_bias"] = (d,)
        w_in, b_in, w_out, b_out = mlp_param_names(l)
        shapes[w_in] = (ff, d)
        shapes[b_in] = (ff,)
        shapes[w_out] = (d, ff)
        shapes[b_out] = (d,)
        shapes[f"layer{l}.mlp_ln_gain"] = (d,)
        shapes[f"layer{l}.mlp_ln_bias"] = (d,)
    shapes["pooler.W"] = (d, d)
    shapes["pooler.b"] = (d,)
    shapes["classifier.W"] = (num_labels, d)
    shapes["classifier.b"] = (num_labels,)
    return shapes


def init_params(config: ModelConfig, rng_seed: int | None = None, num_labels: int = 2) -> dict:
    """Draw N(0, 0.02^2) weights, unit LayerNorm gains and zero biases.

    Deterministic in ``rng_seed`` (defaults to ``config.init_seed``).
    """
    seed = config.init_seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, num_labels).items():
        if "ln_gain" in name:
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return params


def init_classifier(config: ModelConfig, num_labels: int, seed: int) -> dict:
    """Fresh task-specific layer, seeded independently of the body."""
    rng = np.random.default_rng([seed, 7919])
    return {
        "classifier.W": rng.normal(0.0, INIT_STD, size=(num_labels, config.model_dim)),
        "classifier.b": np.zeros(num_labels),
    }


def count_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


# -- forward pass ------------------------------------------------------------

class _Ctx:
    """Per-forward bookkeeping: parameter tensors, gates, dropout, recorded maps."""

    def __init__(self, params, config, weight_mask, trainable, head_gates, mlp_gates,
                 rng, record_attention):
        self.config = config
        self.rng = rng
        self.head_gates = head_gates
        self.mlp_gates = mlp_gates
        self.record_attention = record_attention
        self.attention: dict = {}
        self.values: dict = {}
        self.mhatt_outputs: dict = {}
        self.head_outputs: dict = {}
        self.tensors = {}
        for name, value in params.items():
            t = trainable.get(name) if trainable is not None else None
            if t is None:
                t = Tensor(value)
            if weight_mask is not None and name in weight_mask:
                t = t * weight_mask[name].astype(np.float64)
            self.tensors[name] = t

    def __getitem__(self, name):
        return self.tensors[name]


def _drop(ctx: _Ctx, t: Tensor) -> Tensor:
    return ag.dropout(t, ctx.config.dropout_rate, ctx.rng)


def attention_head(x: Tensor, l: int, h: int, ctx: _Ctx) -> Tensor:
    """Scaled dot-product attention of one head, projected back to ``d``.

    ``x`` is ``(batch, n, d)``; returns ``(batch, n, d)``.  The ``(batch, n, n)``
    attention weights are stored on ``ctx`` when it records attention.
    """
    if x.shape[-2] > ctx.config.max_seq_len:
        raise ValueError(f"sequence length {x.shape[-2]} exceeds max_seq_len")
    q_name, k_name, v_name, o_name = head_param_names(l, h)
    q = x @ ctx[q_name].T
    k = x @ ctx[k_name].T
    v = x @ ctx[v_name].T
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(ctx.config.head_dim))
    alpha = ag.softmax(scores, axis=-1)
    if ctx.record_attention:
        ctx.attention[(l, h)] = alpha.values
        ctx.values[(l, h)] = (v @ ctx[o_name].T).values
    return alpha @ v @ ctx[o_name].T


def mhatt_layer(x: Tensor, l: int, ctx: _Ctx, xi_row) -> Tensor | None:
    """Sum of gated head outputs; heads with ``xi == 0`` are never computed.

    Returns ``None`` when every head of the layer is masked (a zero term).
    """
    total = None
    for h in range(ctx.config.num_heads):
        if not xi_row[h]:
            continue
        out = attention_head(x, l, h, ctx)
        ctx.head_outputs[(l, h)] = out
        if ctx.head_gates is not None:
            gate = ctx.head_gates[:, l, h].reshape(-1, 1, 1)
            out = out * gate
        total = out if total is None else total + out
    return total


def mlp(z: Tensor, l: int, ctx: _Ctx) -> Tensor:
    w_in, b_in, w_out, b_out = mlp_param_names(l)
    hidden = ag.gelu(z @ ctx[w_in].T + ctx[b_in])
    return hidden @ ctx[w_out].T + ctx[b_out]


def mlp_block(z: Tensor, l: int, ctx: _Ctx, nu_l) -> Tensor:
    """``nu * MLP(z) + z``; with ``nu == 0`` the input is returned untouched."""
    if not nu_l:
        return z
    out = _drop(ctx, mlp(z, l, ctx))
    if ctx.mlp_gates is not None:
        out = out * ctx.mlp_gates[:, l].reshape(-1, 1, 1)
    return out + z


def embed(token_ids, ctx: _Ctx) -> Tensor:
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ValueError("token_ids must be batch x length")
    if ids.shape[1] > ctx.config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len")
    if ids.min() < 0 or ids.max() >= ctx.config.vocab_size:
        raise ValueError("token id out of vocabulary")
    x = ag.embedding(ctx["embeddings.token"], ids) + ctx["embeddings.position"][: ids.shape[1]]
    x = ag.layer_norm(x, ctx["embeddings.ln_gain"], ctx["embeddings.ln_bias"], LN_EPS)
    return _drop(ctx, x)


def encode(token_ids, ctx: _Ctx, subnet_mask: SubnetworkMask) -> Tensor:
    """Token ids -> final hidden states ``(batch, n, d)``."""
    x = embed(token_ids, ctx)
    for l in range(ctx.config.num_layers):
        a = mhatt_layer(x, l, ctx, subnet_mask.xi[l])
        if a is not None:
            a = _drop(ctx, a)
            if ctx.head_gates is not None:
                ctx.mhatt_outputs[l] = a
            x = x + a
        z = ag.layer_norm(x, ctx[f"layer{l}.attn_ln_gain"], ctx[f"layer{l}.attn_ln_bias"], LN_EPS)
        y = mlp_block(z, l, ctx, subnet_mask.nu[l])
        x = ag.layer_norm(y, ctx[f"layer{l}.mlp_ln_gain"], ctx[f"layer{l}.mlp_ln_bias"], LN_EPS)
    return x


def pool(hidden: Tensor, ctx: _Ctx) -> Tensor:
    first = hidden[:, 0, :]
    return (first @ ctx["pooler.W"].T + ctx["pooler.b"]).tanh()


def check_masks(config: ModelConfig, subnet_mask, weight_mask, params):
    if subnet_mask is not None:
        subnet_mask.check(config)
    if weight_mask is not None:
        for name, m in weight_mask.items():
            if name not in params or params[name].shape != m.shape:
                raise ConfigurationError(f"weight mask entry {name!r} does not match parameters")
            if is_embedding(name):
                raise ConfigurationError("embeddings cannot be masked")


@dataclass
class ForwardResult:
    logits: Tensor
    attention_maps: dict = field(default_factory=dict)
    value_outputs: dict = field(default_factory=dict)
    hidden: Tensor | None = None
    ctx: _Ctx | None = None


def forward(params: dict, config: ModelConfig, subnet_mask: SubnetworkMask | None = None,
            weight_mask: WeightMask | None = None, token_ids=None, *, trainable: dict | None = None,
            head_gates: Tensor | None = None, mlp_gates: Tensor | None = None,
            rng: np.random.Generator | None = None, return_attention: bool = False) -> ForwardResult:
    """Run the encoder plus task head.

    ``trainable`` maps parameter names to leaf Tensors that should receive
    gradients; other parameters are constants.  ``head_gates`` (batch x L x
    N_h) and ``mlp_gates`` (batch x L) are differentiable per-sample copies of
    the mask variables, used for importance scores.  Dropout is active only
    when ``rng`` is given.  Attention maps are returned for unmasked heads.
    """
    check_masks(config, subnet_mask, weight_mask, params)
    if subnet_mask is None:
        subnet_mask = SubnetworkMask.full(config)
    ctx = _Ctx(params, config, weight_mask, trainable, head_gates, mlp_gates, rng, return_attention)
    hidden = encode(token_ids, ctx, subnet_mask)
    pooled = _drop(ctx, pool(hidden, ctx))
    logits = pooled @ ctx["classifier.W"].T + ctx["classifier.b"]
    return ForwardResult(logits, ctx.attention, ctx.values, hidden, ctx)


def standalone_head(params: dict, config: ModelConfig, x: np.ndarray, l: int, h: int) -> tuple:
    """One head applied to raw ``(n, d)`` or ``(batch, n, d)`` input.

    Returns ``(output, attention_weights)`` as arrays.
    """
    ctx = _Ctx(params, config, None, None, None, None, None, True)
    xt = Tensor(x if x.ndim == 3 else x[None])
    with ag.no_grad():
        out = attention_head(xt, l, h, ctx)
    alpha = ctx.attention[(l, h)]
    if x.ndim == 2:
        return out.values[0], alpha[0]
    return out.values, alpha


def standalone_mhatt(params: dict, config: ModelConfig, x: np.ndarray, l: int, xi_row) -> np.ndarray:
    ctx = _Ctx(params, config, None, None, None, None, None, False)
    xt = Tensor(x if x.ndim == 3 else x[None])
    with ag.no_grad():
        out = mhatt_layer(xt, l, ctx, xi_row)
    res = np.zeros(xt.shape) if out is None else out.values
    return res[0] if x.ndim == 2 else res


def standalone_mlp_block(params: dict, config: ModelConfig, z: np.ndarray, l: int, nu_l,
                         include_residual: bool = True) -> np.ndarray:
    ctx = _Ctx(params, config, None, None, None, None, None, False)
    zt = Tensor(z)
    with ag.no_grad():
        out = mlp_block(zt, l, ctx, nu_l) if include_residual else mlp(zt, l, ctx)
    return out.values
