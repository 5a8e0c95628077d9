"""Linear, normalization, attention and MLP building blocks over the tape."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor


@dataclass
class LinearParams:
    weight: Tensor  # out x in
    bias: Tensor  # out

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class TransformerBlockParams:
    """One pre-norm block.

    ``q``, ``k`` and ``v`` map d -> d; head h owns output rows
    ``h * head_dim : (h + 1) * head_dim`` of each, i.e. the per-head
    projections are stored stacked.
    """
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    ff1: LinearParams
    ff2: LinearParams
    ln1: NormParams
    ln2: NormParams
    head_count: int

    @property
    def head_dim(self) -> int:
        return self.q.out_dim // self.head_count

    @property
    def width(self) -> int:
        return self.out.out_dim

    def head(self, which: str, h: int) -> np.ndarray:
        """Weight rows of one head's projection (``which`` in q/k/v)."""
        w = getattr(self, which).weight.data
        return w[h * self.head_dim:(h + 1) * self.head_dim]


LN_EPS = 1e-5


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a nested dataclass / list / dict of tensors to dotted names."""
    out: dict[str, Tensor] = {}

    def visit(o, name):
        if isinstance(o, Tensor):
            out[name] = o
        elif is_dataclass(o):
            for f in fields(o):
                visit(getattr(o, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(o, (list, tuple)):
            for i, item in enumerate(o):
                visit(item, f"{name}.{i}" if name else str(i))
        elif isinstance(o, dict):
            for key in o:
                visit(o[key], f"{name}.{key}" if name else str(key))

    visit(obj, prefix)
    return out


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int, scale: float = 1.0) -> LinearParams:
    w = rng.normal(0.0, scale / math.sqrt(in_dim), size=(out_dim, in_dim))
    return LinearParams(Tensor(w), Tensor(np.zeros(out_dim)))


def init_norm(d: int) -> NormParams:
    return NormParams(Tensor(np.ones(d)), Tensor(np.zeros(d)))


def init_block(rng: np.random.Generator, d: int, heads: int, head_dim: int, d_ff: int) -> TransformerBlockParams:
    if heads * head_dim != d:
        raise DimensionError(f"head_count x head_dim = {heads * head_dim} must equal width {d}")
    return TransformerBlockParams(
        q=init_linear(rng, d, d),
        k=init_linear(rng, d, d),
        v=init_linear(rng, d, d),
        out=init_linear(rng, d, d, scale=0.5),
        ff1=init_linear(rng, d, d_ff, scale=math.sqrt(2.0)),
        ff2=init_linear(rng, d_ff, d, scale=0.5),
        ln1=init_norm(d),
        ln2=init_norm(d),
        head_count=heads,
    )


def linear_forward(x: Tensor, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"linear: input width {x.shape[-1]} does not match weight {p.weight.shape}")
    return tn.linear(x, p.weight, p.bias)


def layer_norm(x: Tensor, p: NormParams, eps: float = LN_EPS) -> Tensor:
    return tn.layer_norm(x, p.gamma, p.beta, eps)


def dropout(x: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    if not train_mode or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return tn.mul(x, Tensor(keep / (1.0 - rate)))


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def causal_self_attention(H: Tensor, p: TransformerBlockParams, train_mode: bool = False,
                          rng: np.random.Generator | None = None, rate: float = 0.0,
                          return_weights: bool = False):
    """Multi-head scaled dot-product self-attention; step t sees steps 1..t only.

    ``H`` is [T, d] or [B, T, d]; the output has the same shape.  Dropout
    (``rate``, train mode only) acts on the attention weights.
    """
    T = H.shape[-2]
    keep = None
    if train_mode and rate > 0.0:
        keep = (rng.random(H.shape[:-2] + (p.head_count, T, T)) >= rate) / (1.0 - rate)
    q = linear_forward(H, p.q)
    k = linear_forward(H, p.k)
    v = linear_forward(H, p.v)
    heads, weights = tn.multi_head_attention(q, k, v, p.head_count, causal_mask(T), keep, return_weights=True)
    out = linear_forward(heads, p.out)
    if return_weights:
        return out, weights
    return out


def feed_forward(x: Tensor, p: TransformerBlockParams) -> Tensor:
    return linear_forward(tn.relu(linear_forward(x, p.ff1)), p.ff2)


def transformer_block(H: Tensor, p: TransformerBlockParams, train_mode: bool = False,
                      rng: np.random.Generator | None = None, rate: float = 0.0) -> Tensor:
    """Pre-norm residual block: H + Attn(LN(H)), then + FFN(LN(.))."""
    H = tn.add(H, causal_self_attention(layer_norm(H, p.ln1), p, train_mode, rng, rate))
    ff = dropout(feed_forward(layer_norm(H, p.ln2), p), rate, train_mode, rng)
    return tn.add(H, ff)


def mlp_forward(x: Tensor, layers: list[LinearParams]) -> Tensor:
    """Alternate linear and relu; the last layer stays linear."""
    for i, layer in enumerate(layers):
        x = linear_forward(x, layer)
        if i < len(layers) - 1:
            x = tn.relu(x)
    return x


def init_mlp(rng: np.random.Generator, dims: list[int], scale: float = 1.0) -> list[LinearParams]:
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        gain = math.sqrt(2.0) if i < len(dims) - 2 else 1.0
        layers.append(init_linear(rng, a, b, scale * gain))
    return layers
