"""Cross-modal attention alignment, modality confidence weights and weighted fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import MODALITIES
from .layers import LinearParams, causal_mask, init_linear, init_mlp, linear_forward, mlp_forward
from .tensor import DimensionError, Tensor

SCORE_EPS = 1e-8


@dataclass
class PairParams:
    q: LinearParams  # d -> dk, applied to the querying modality
    k: LinearParams  # d -> dk, applied to the attended modality
    v: LinearParams  # d -> d


@dataclass
class MieParams:
    shared: list[LinearParams] | None  # 2d -> hidden -> 1
    per_modality: dict[str, list[LinearParams]] | None

    def mlp_for(self, modality: str) -> list[LinearParams]:
        return self.shared if self.shared is not None else self.per_modality[modality]


def pair_key(i: str, j: str) -> str:
    return f"{i}_{j}"


def ordered_pairs() -> list[tuple[str, str]]:
    return [(i, j) for i in MODALITIES for j in MODALITIES if i != j]


def init_cmaa(rng: np.random.Generator, d: int, dk: int) -> dict[str, PairParams]:
    return {pair_key(i, j): PairParams(init_linear(rng, d, dk), init_linear(rng, d, dk), init_linear(rng, d, d))
            for i, j in ordered_pairs()}


def init_mie(rng: np.random.Generator, d: int, hidden: int, shared: bool) -> MieParams:
    if shared:
        return MieParams(init_mlp(rng, [2 * d, hidden, 1]), None)
    return MieParams(None, {m: init_mlp(rng, [2 * d, hidden, 1]) for m in MODALITIES})


def cmaa_pairwise(h_i: Tensor, h_j: Tensor, p: PairParams, return_weights: bool = False):
    """g^{i<->j}: queries from modality i attend over modality j's causal prefix."""
    if h_i.shape != h_j.shape:
        raise DimensionError(f"cmaa: stream shapes {h_i.shape} and {h_j.shape} differ")
    T = h_i.shape[-2]
    q = linear_forward(h_i, p.q)
    k = linear_forward(h_j, p.k)
    v = linear_forward(h_j, p.v)
    out, att = tn.multi_head_attention(q, k, v, 1, causal_mask(T), return_weights=True)
    return (out, att[..., 0, :, :]) if return_weights else out


def cmaa_aggregate(g_ij: Tensor, g_ik: Tensor) -> Tensor:
    if g_ij.shape != g_ik.shape:
        raise DimensionError(f"cmaa_aggregate: shapes {g_ij.shape} and {g_ik.shape} differ")
    return tn.scale(tn.add(g_ij, g_ik), 0.5)


def cmaa(h: dict[str, Tensor], params: dict[str, PairParams]) -> dict[str, Tensor]:
    g = {}
    for i in MODALITIES:
        j, k = (m for m in MODALITIES if m != i)
        g[i] = cmaa_aggregate(cmaa_pairwise(h[i], h[j], params[pair_key(i, j)]),
                              cmaa_pairwise(h[i], h[k], params[pair_key(i, k)]))
    return g


def mie_logits(h: dict[str, Tensor], g: dict[str, Tensor], p: MieParams) -> Tensor:
    """Raw MLP outputs, one column per modality: [.., T, 3]."""
    cols = [mlp_forward(tn.concat_last_axis([h[m], g[m]]), p.mlp_for(m)) for m in MODALITIES]
    return tn.concat_last_axis(cols)


def normalize_scores(logits: Tensor, mode: str = "sigmoid") -> Tensor:
    """sigmoid then (s + eps) / sum(s + eps); or a plain softmax over modalities."""
    if mode == "softmax":
        return tn.softmax_rows(logits)
    s = tn.add(tn.sigmoid(logits), SCORE_EPS)
    return tn.div(s, tn.reshape(tn.sum_axis(s, -1), s.shape[:-1] + (1,)))


def mie_weights(h: dict[str, Tensor], g: dict[str, Tensor], p: MieParams, mode: str = "sigmoid") -> Tensor:
    return normalize_scores(mie_logits(h, g, p), mode)


def fuse(g: dict[str, Tensor], w: Tensor) -> Tensor:
    """z_t = sum_i w_t^i g_t^i."""
    if w.shape[-1] != len(MODALITIES) or w.shape[:-1] != g[MODALITIES[0]].shape[:-1]:
        raise DimensionError(f"fuse: weights {w.shape} do not match streams {g[MODALITIES[0]].shape}")
    z = None
    for i, m in enumerate(MODALITIES):
        term = tn.mul(tn.take(w, (Ellipsis, slice(i, i + 1))), g[m])
        z = term if z is None else tn.add(z, term)
    return z
