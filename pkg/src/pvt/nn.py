"""Parameter containers and transformer building blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-6


class ContractError(ValueError):
    """An input violates a documented precondition."""


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, n: int, gain: float = 1.0) -> "Linear":
        return cls(_param(rng.normal(0.0, gain / np.sqrt(k), (k, n))), _param(np.zeros(n)))

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNorm":
        return cls(_param(np.ones(d)), _param(np.zeros(d)))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, LN_EPS)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class AttentionBlockParams:
    """Pre-norm transformer block: attention and MLP sublayers, both residual."""

    q_proj: Linear
    k_proj: Linear
    v_proj: Linear
    out_proj: Linear
    ln1: LayerNorm
    ln2: LayerNorm
    mlp_in: Linear
    mlp_out: Linear
    heads: int
    use_mlp: bool = True

    def __post_init__(self):
        d = self.q_proj.w.shape[0]
        if d % self.heads:
            raise ContractError(f"width {d} not divisible by heads {self.heads}")

    @property
    def d(self) -> int:
        return self.q_proj.w.shape[0]

    @property
    def expansion(self) -> int:
        return self.mlp_in.w.shape[1] // self.d

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, expansion: int = 2,
             use_mlp: bool = True) -> "AttentionBlockParams":
        if expansion < 1:
            raise ContractError("MLP expansion must be >= 1")
        if d % heads:
            raise ContractError(f"width {d} not divisible by heads {heads}")
        return cls(Linear.init(rng, d, d), Linear.init(rng, d, d), Linear.init(rng, d, d),
                   Linear.init(rng, d, d, gain=0.5), LayerNorm.init(d), LayerNorm.init(d),
                   Linear.init(rng, d, expansion * d), Linear.init(rng, expansion * d, d, gain=0.5),
                   heads, use_mlp)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        names = ["q_proj", "k_proj", "v_proj", "out_proj", "ln1"]
        if self.use_mlp:
            names += ["ln2", "mlp_in", "mlp_out"]
        for name in names:
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def weighted_aggregate(weights, values) -> Tensor:
    """Convex combination of value rows: ``weights`` [..., 1, Tk], ``values`` [..., Tk, d].

    Computed as weight-times-value summed over keys (the same reduction
    :func:`pvt.tensor.masked_mean` uses), so one-hot and uniform weights give
    bit-exact selection and averaging.
    """
    weights, values = T.as_tensor(weights), T.as_tensor(values)
    w = weights.data
    if (w < 0).any() or np.abs(w.sum(axis=-1) - 1.0).max(initial=0.0) > 1e-9:
        raise ContractError("weighted_aggregate: weights must be nonnegative with rows summing to 1")
    # [..., Tq, Tk, 1] * [..., 1, Tk, d] -> sum over Tk
    prod = T.reshape(weights, weights.shape + (1,)) * T.reshape(values, values.shape[:-2] + (1,) + values.shape[-2:])
    return T.tsum(prod, axis=-2)


def mha_forward(q, k, v, key_mask, params: AttentionBlockParams, logit_scale: float = 1.0,
                weights_hook: Callable[[np.ndarray], np.ndarray] | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over masked keys.

    q: [B, Tq, d]; k, v: [B, Tk, d]; key_mask: [B, Tk]. Batch rows with no
    valid key produce zeros. ``weights_hook`` may replace the attention
    weights (shape [B, h, Tq, Tk]) before aggregation.
    """
    h = params.heads
    key_mask = np.asarray(key_mask, dtype=bool)
    qh = _split_heads(params.q_proj(q), h)
    kh = _split_heads(params.k_proj(k), h)
    vh = _split_heads(params.v_proj(v), h)
    scale = logit_scale / np.sqrt(params.d // h)
    logits = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * scale
    weights = T.masked_softmax(logits, key_mask[:, None, None, :], axis=-1)
    if weights_hook is not None:
        weights = Tensor(weights_hook(weights.data))
        ctx = weighted_aggregate(weights, vh)
    else:
        ctx = T.matmul(weights, vh)
    out = params.out_proj(_merge_heads(ctx))
    has_key = key_mask.any(axis=1)
    if not has_key.all():
        out = T.where_mask(out, has_key[:, None, None])
    return out


def _mlp(x: Tensor, params: AttentionBlockParams) -> Tensor:
    return params.mlp_out(T.gelu(params.mlp_in(params.ln2(x))))


def self_attention_block(x, mask, params: AttentionBlockParams) -> Tensor:
    """x: [B, T, d]; mask: [B, T] marks valid tokens (used as the key mask)."""
    hx = params.ln1(x)
    x = x + mha_forward(hx, hx, hx, mask, params)
    if params.use_mlp:
        x = x + _mlp(x, params)
    return x


def cross_attention_block(query, tokens, mask, params: AttentionBlockParams, **kw) -> Tensor:
    """query: [B, Tq, d] attends over tokens: [B, Tk, d] with key mask [B, Tk]."""
    hkv = params.ln1(tokens)
    x = query + mha_forward(params.ln1(query), hkv, hkv, mask, params, **kw)
    if params.use_mlp:
        x = x + _mlp(x, params)
    return x
