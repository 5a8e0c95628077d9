"""The full network: encoders -> alignment -> confidence fusion -> feedback head."""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from .config import MODALITIES, ModelConfig, canonical_text, derive_seed
from .encoders import EncoderParams, encode_modality, init_encoder
from .fusion import MieParams, PairParams, cmaa, fuse, init_cmaa, init_mie, mie_weights
from .layers import named_tensors
from .tensor import DimensionError, Tensor
from .tfl import TflParams, classify_direct, init_tfl, run_sequence


@dataclass
class ModelParams:
    encoders: dict[str, EncoderParams]
    cmaa: dict[str, PairParams]
    mie: MieParams
    tfl: TflParams

    def named(self) -> dict[str, Tensor]:
        return named_tensors(self)

    def copy(self) -> "ModelParams":
        return _clone(self)


def _clone(obj):
    if isinstance(obj, Tensor):
        return Tensor(obj.data.copy())
    if is_dataclass(obj):
        return type(obj)(**{f.name: _clone(getattr(obj, f.name)) for f in fields(obj)})
    if isinstance(obj, list):
        return [_clone(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _clone(v) for k, v in obj.items()}
    return obj


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization; each module draws from its own derived stream."""
    cfg.validate()

    def rng(label):
        return np.random.default_rng(derive_seed(seed, f"init/{label}"))

    dims = cfg.dims()
    encoders = {m: init_encoder(rng(f"encoder/{m}"), dims[m], cfg.d, cfg.n_layers, cfg.n_heads, cfg.head_dim,
                                cfg.d_ff, cfg.t_max, cfg.init_scale) for m in MODALITIES}
    return ModelParams(
        encoders=encoders,
        cmaa=init_cmaa(rng("cmaa"), cfg.d, cfg.cmaa_dk),
        mie=init_mie(rng("mie"), cfg.d, cfg.mie_hidden, cfg.mie_shared),
        tfl=init_tfl(rng("tfl"), cfg.d, cfg.n_classes, cfg.cls_hidden, cfg.tfl_init_scale),
    )


@dataclass
class ForwardResult:
    y: Tensor  # [.., T, K] predicted distributions
    weights: Tensor  # [.., T, 3] confidence weights (audio, visual, text)
    h: dict[str, Tensor]
    g: dict[str, Tensor]
    z: Tensor


def forward(params: ModelParams, cfg: ModelConfig, X: dict[str, np.ndarray], train_mode: bool = False,
            rng: np.random.Generator | None = None, feedback: np.ndarray | None = None) -> ForwardResult:
    """Run the network on raw features X[m] of shape [T, D_m] or [B, T, D_m]."""
    dims = cfg.dims()
    for m in MODALITIES:
        if np.shape(X[m])[-1] != dims[m]:
            raise DimensionError(f"{m}: raw width {np.shape(X[m])[-1]} but model expects {dims[m]}")
    rate = cfg.dropout if train_mode else 0.0
    h = {m: encode_modality(X[m], params.encoders[m], train_mode, rng, rate) for m in MODALITIES}
    g = h if cfg.variant == "no_cmaa" else cmaa(h, params.cmaa)
    if cfg.variant == "no_mie":
        lead = h[MODALITIES[0]].shape[:-1]
        w = Tensor(np.full(lead + (len(MODALITIES),), 1.0 / len(MODALITIES)))
    else:
        w = mie_weights(h, g, params.mie, cfg.mie_norm)
    z = fuse(g, w)
    if cfg.variant == "no_tfl":
        y = classify_direct(z, params.tfl)
    else:
        y = run_sequence(z, params.tfl, feedback=feedback, feedback_grad=cfg.feedback_grad)
    return ForwardResult(y, w, h, g, z)


class Model:
    """Parameters plus configuration; the object the harness evaluates."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, data_fingerprint: str | None = None):
        self.cfg = cfg
        self.params = params
        self.data_fingerprint = data_fingerprint  # dataset the parameters were fitted on

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int, data_fingerprint: str | None = None) -> "Model":
        return cls(cfg, init_params(cfg, seed), data_fingerprint)

    def predict_proba(self, X: dict[str, np.ndarray]) -> np.ndarray:
        return forward(self.params, self.cfg, X).y.data

    def confidence(self, X: dict[str, np.ndarray]) -> np.ndarray:
        return forward(self.params, self.cfg, X).weights.data

    @property
    def config_text(self) -> str:
        return canonical_text(self.cfg)
