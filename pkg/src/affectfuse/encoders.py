"""Per-modality encoders: linear feature projection, positions, causal transformer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .data import ModalityStream
from .layers import (LinearParams, NormParams, TransformerBlockParams, init_block, init_linear, init_norm,
                     layer_norm, linear_forward, transformer_block)
from .tensor import Tensor


class CapacityError(ValueError):
    pass


@dataclass
class EncoderParams:
    projection: LinearParams
    positional: Tensor  # t_max x d
    blocks: list[TransformerBlockParams]
    final_norm: NormParams | None  # present whenever blocks is nonempty

    @property
    def width(self) -> int:
        return self.projection.out_dim

    @property
    def t_max(self) -> int:
        return self.positional.shape[0]


def init_encoder(rng: np.random.Generator, raw_dim: int, d: int, n_layers: int, heads: int, head_dim: int,
                 d_ff: int, t_max: int, scale: float = 1.0) -> EncoderParams:
    return EncoderParams(
        projection=init_linear(rng, raw_dim, d, scale),
        positional=Tensor(rng.normal(0.0, 0.02, size=(t_max, d))),
        blocks=[init_block(rng, d, heads, head_dim, d_ff) for _ in range(n_layers)],
        final_norm=init_norm(d) if n_layers else None,
    )


def apply_missing_mask(stream: ModalityStream, mask: np.ndarray) -> ModalityStream:
    """Zero the rows where ``mask`` is False; idempotent."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != stream.present.shape:
        raise tn.DimensionError(f"mask length {mask.shape[0]} does not match T={stream.present.shape[0]}")
    raw = np.where(mask[:, None], stream.raw, 0.0)
    return ModalityStream(stream.modality, raw, stream.present & mask)


def encode_modality(raw, p: EncoderParams, train_mode: bool = False, rng: np.random.Generator | None = None,
                    rate: float = 0.0) -> Tensor:
    """Encode raw features [T, D] or [B, T, D] to [.., T, d]; step t sees rows 1..t only."""
    x = raw if isinstance(raw, Tensor) else Tensor(raw)
    T = x.shape[-2]
    if T > p.t_max:
        raise CapacityError(f"sequence length {T} exceeds positional capacity {p.t_max}")
    h = tn.add(linear_forward(x, p.projection), tn.take(p.positional, slice(0, T)))
    for block in p.blocks:
        h = transformer_block(h, block, train_mode, rng, rate)
    if p.final_norm is not None:
        h = layer_norm(h, p.final_norm)
    return h
