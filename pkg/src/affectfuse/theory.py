"""Theory checks: gradient verification, the feedback fixed point, and Lipschitz bounds.

Lipschitz bounds are taken for the map from one modality's whole raw sequence
(T x D_m, Frobenius norm) to the whole prediction sequence (T x K). Sequence
mixing happens in three places: self-attention, cross-attention and the
feedback recurrence. Each contributes a factor that depends on T. LayerNorm
caps every row norm before attention reads it, which keeps those factors
finite.

Per-stage factors used below:

* LayerNorm: Lipschitz <= max|gamma| / sqrt(eps). Output rows satisfy
  ||y|| <= max|gamma| sqrt(d) + ||beta||.
* Attention over rows bounded by R (per head, with R_Q, R_K, R_V the
  projected row bounds including biases):
  ``sqrt(T) ||W_V|| + 2 R_V (R_K ||W_Q|| + sqrt(T) R_Q ||W_K||) / sqrt(dk)``.
  The first term is the value path. Attention columns sum to at most T,
  hence sqrt(T). The second term is the softmax path, because
  ``sum_s da_s v_s = sum_s a_s (v_s - vbar) dl_s``.
* Residual block: ``(1 + L_LN1 L_attn) (1 + L_LN2 ||W2|| ||W1||)``.
* Feedback recurrence: ``|dy_t| <= a |dz_t| + rho |dy_{t-1}|`` with
  ``rho`` = contraction_bound, so the sequence factor is ``sum_{k<T} rho^k``.

A zero-layer encoder has no final LayerNorm. Its rows are then unbounded
and the bound is infinite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .config import MODALITIES, ModelConfig, derive_seed
from .fusion import pair_key
from .layers import LN_EPS, LinearParams, NormParams, TransformerBlockParams
from .losses import kl_divergence, sequence_loss
from .model import Model, forward, init_params
from .spectral import power_iteration
from .tfl import TflParams, contraction_bound, feedback_map, init_tfl, iterate_fixed_point, uniform

NORM_TOL = 1e-9


def _norm(w: np.ndarray) -> float:
    # a relative 1e-9 underestimate is absorbed by the final margin factor
    return power_iteration(w, tol=NORM_TOL)


def _ln_lipschitz(p: NormParams, eps: float = LN_EPS) -> float:
    return float(np.max(np.abs(p.gamma.data))) / math.sqrt(eps)


def _ln_radius(p: NormParams) -> float:
    d = p.gamma.shape[0]
    return float(np.max(np.abs(p.gamma.data))) * math.sqrt(d) + float(np.linalg.norm(p.beta.data))


def _proj_radius(w: np.ndarray, b: np.ndarray, radius: float) -> float:
    return _norm(w) * radius + float(np.linalg.norm(b))


def _softmax_path(rq: float, rk: float, rv: float, wq: float, wk: float, dk: int, T: int) -> float:
    return 2.0 * rv * (rk * wq + math.sqrt(T) * rq * wk) / math.sqrt(dk)


def attention_lipschitz(p: TransformerBlockParams, radius: float, T: int) -> float:
    """Bound for multi-head causal self-attention on rows of norm <= radius."""
    dk = p.head_dim
    per_head = []
    for h in range(p.head_count):
        rows = slice(h * dk, (h + 1) * dk)
        wq, wk, wv = (getattr(p, n).weight.data[rows] for n in "qkv")
        bq, bk, bv = (getattr(p, n).bias.data[rows] for n in "qkv")
        rq, rk, rv = (_proj_radius(w, b, radius) for w, b in ((wq, bq), (wk, bk), (wv, bv)))
        per_head.append(math.sqrt(T) * _norm(wv) + _softmax_path(rq, rk, rv, _norm(wq), _norm(wk), dk, T))
    return _norm(p.out.weight.data) * math.sqrt(sum(x * x for x in per_head))


def block_lipschitz(p: TransformerBlockParams, T: int) -> float:
    attn = _ln_lipschitz(p.ln1) * attention_lipschitz(p, _ln_radius(p.ln1), T)
    ffn = _ln_lipschitz(p.ln2) * _norm(p.ff2.weight.data) * _norm(p.ff1.weight.data)
    return (1.0 + attn) * (1.0 + ffn)


def encoder_lipschitz(enc, T: int) -> float:
    if enc.final_norm is None:
        return math.inf
    L = _norm(enc.projection.weight.data)
    for block in enc.blocks:
        L *= block_lipschitz(block, T)
    return L * _ln_lipschitz(enc.final_norm)


def _mlp_lipschitz(layers: list[LinearParams]) -> float:
    L = 1.0
    for layer in layers:
        L *= _norm(layer.weight.data)
    return L


def _mlp_radius(layers: list[LinearParams], radius: float) -> float:
    for layer in layers:
        radius = _proj_radius(layer.weight.data, layer.bias.data, radius)
    return radius


@dataclass
class _Cross:
    query: float  # g^i w.r.t. h^i
    keyval: float  # g^i w.r.t. h^j
    value_radius: float


def _cross_terms(p, r_i: float, r_j: float, T: int) -> _Cross:
    dk = p.q.out_dim
    rq = _proj_radius(p.q.weight.data, p.q.bias.data, r_i)
    rk = _proj_radius(p.k.weight.data, p.k.bias.data, r_j)
    rv = _proj_radius(p.v.weight.data, p.v.bias.data, r_j)
    wq, wk, wv = (_norm(getattr(p, n).weight.data) for n in "qkv")
    query = 2.0 * rv * rk * wq / math.sqrt(dk)
    keyval = math.sqrt(T) * wv + 2.0 * rv * math.sqrt(T) * rq * wk / math.sqrt(dk)
    return _Cross(query, keyval, rv)


def lipschitz_bound(model: Model, T: int | None = None) -> dict[str, float]:
    """Upper bound on ||d y_hat||_F / ||d x^m||_F for each modality m.

    ``T`` defaults to the positional capacity, and the bound is nondecreasing
    in T. It therefore holds for every admissible sequence length.
    """
    cfg, params = model.cfg, model.params
    T = cfg.t_max if T is None else T
    enc_L = {m: encoder_lipschitz(params.encoders[m], T) for m in MODALITIES}
    radius = {m: (_ln_radius(params.encoders[m].final_norm) if params.encoders[m].final_norm is not None
                  else math.inf) for m in MODALITIES}
    if any(math.isinf(v) for v in radius.values()):
        return {m: math.inf for m in MODALITIES}

    cross = {}
    if cfg.variant != "no_cmaa":
        for i in MODALITIES:
            for j in MODALITIES:
                if i != j:
                    cross[(i, j)] = _cross_terms(params.cmaa[pair_key(i, j)], radius[i], radius[j], T)
        r_g = max(c.value_radius for c in cross.values())
    else:
        r_g = max(radius.values())

    tfl = params.tfl
    d = tfl.width
    W_fb = tfl.feedback.weight.data
    cls_L = _mlp_lipschitz(tfl.classifier)
    if cfg.variant == "no_tfl":
        head = 0.5 * cls_L
    else:
        rho = contraction_bound(tfl) * (1.0 + 1e-6)
        geom = T if abs(rho - 1.0) < 1e-12 else (1.0 - rho ** T) / (1.0 - rho)
        head = 0.5 * cls_L * _norm(W_fb[:, :d]) * geom

    out = {}
    for m in MODALITIES:
        if cfg.variant == "no_cmaa":
            cg = 1.0
        else:
            others = [i for i in MODALITIES if i != m]
            terms = [0.5 * sum(cross[(m, j)].query for j in others)]
            terms += [0.5 * cross[(i, m)].keyval for i in others]
            cg = math.sqrt(sum(x * x for x in terms))
        if cfg.variant == "no_mie":
            dz = cg / math.sqrt(len(MODALITIES))
        else:
            mlps = [params.mie.mlp_for(i) for i in MODALITIES]
            mlp_L = max(_mlp_lipschitz(layers) for layers in mlps)
            if cfg.mie_norm == "softmax":
                norm_L = 0.5
            else:
                r_in = math.sqrt(max(radius.values()) ** 2 + r_g ** 2)
                r_u = max(_mlp_radius(layers, r_in) for layers in mlps)
                s_min = 1.0 / (1.0 + math.exp(min(r_u, 700.0)))
                norm_L = 0.25 * (1.0 + math.sqrt(3.0)) / (3.0 * s_min)
            dw = norm_L * mlp_L * math.sqrt(1.0 + cg * cg)
            dz = math.sqrt(3.0) * r_g * dw + cg
        out[m] = float(enc_L[m] * dz * head * (1.0 + 1e-6))
    return out


def _modality_batch(session, modality: str, zero_other: str | None):
    X = {m: session.streams[m].raw.copy() for m in MODALITIES}
    if zero_other is not None:
        if zero_other == modality:
            raise ValueError("the zeroed modality must differ from the perturbed one")
        X[zero_other] = np.zeros_like(X[zero_other])
    return X


def lipschitz_empirical(model: Model, session, modality: str, n_samples: int = 1000, eps_scale: float = 1e-3,
                        zero_other: str | None = None, seed: int = 0, chunk: int = 250) -> float:
    """Max ||d y_hat||_F / ||d x||_F over random single-step perturbations of one modality.

    Each sample picks a step uniformly and a Gaussian direction rescaled to
    norm ``eps_scale``. ``zero_other`` blanks another modality for the whole
    session.
    """
    rng = np.random.default_rng(derive_seed(seed, f"lipschitz/{session.id}/{modality}/{zero_other}"))
    X = _modality_batch(session, modality, zero_other)
    T, D = X[modality].shape
    steps = rng.integers(T, size=n_samples)
    dirs = rng.normal(size=(n_samples, D))
    dirs *= eps_scale / np.linalg.norm(dirs, axis=1, keepdims=True)
    base = model.predict_proba(X)
    best = 0.0
    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        B = hi - lo
        Xb = {m: np.broadcast_to(X[m], (B,) + X[m].shape).copy() for m in MODALITIES}
        Xb[modality][np.arange(B), steps[lo:hi]] += dirs[lo:hi]
        y = model.predict_proba(Xb)
        num = np.linalg.norm((y - base).reshape(B, -1), axis=1)
        best = max(best, float(np.max(num / eps_scale)))
    return best


def toy_model_config(feedback_grad: bool = False) -> ModelConfig:
    """The small network used for gradient checks (d=8, one block)."""
    return ModelConfig(d=8, n_layers=1, n_heads=2, head_dim=4, d_ff=8, t_max=8, cmaa_dk=4, mie_hidden=4,
                       mie_shared=True, cls_hidden=8, dim_audio=5, dim_visual=6, dim_text=4, dropout=0.0,
                       feedback_grad=feedback_grad)


def toy_batch(cfg: ModelConfig, n_sessions: int = 2, T: int = 3, seed: int = 0):
    rng = np.random.default_rng(derive_seed(seed, "toy-batch"))
    X = {m: rng.normal(size=(n_sessions, T, dim)) for m, dim in cfg.dims().items()}
    y = rng.integers(cfg.n_classes, size=(n_sessions, T))
    return X, y


def gradient_check(feedback_grad: bool = False, seed: int = 0, lam: float = 0.1, h: float = 1e-5,
                   tol: float = 1e-4, n_sessions: int = 2, T: int = 3) -> dict[str, dict]:
    """Analytic vs central-difference gradients for every parameter block of the toy model.

    With detached feedback the loss is not the function that autodiff
    differentiates: the previous predictions count as constants. The check
    therefore freezes the feedback sequence at its value under the base
    parameters. With ``feedback_grad`` it differentiates through the full
    unroll instead.
    """
    cfg = toy_model_config(feedback_grad)
    params = init_params(cfg, seed)
    named = params.named()
    for t in named.values():
        t.requires_grad = True
    X, y = toy_batch(cfg, n_sessions, T, seed)
    frozen = None
    if not feedback_grad:
        base = forward(params, cfg, X).y.data
        lead = base.shape[:-2]
        frozen = np.concatenate([uniform(cfg.n_classes, lead + (1,)), base[..., :-1, :]], axis=-2)

    def loss():
        return sequence_loss(forward(params, cfg, X, feedback=frozen).y, y, lam).total

    return tn.finite_diff_check(loss, named, h=h, tol=tol)


@dataclass
class FixedPointReport:
    bound: float
    n_trials: int
    converged: int
    max_iterations: int
    max_residual: float
    max_kl: float
    max_uniqueness_gap: float
    max_step_ratio: float

    @property
    def passed(self) -> bool:
        return (self.bound < 1.0 and self.converged == self.n_trials and self.max_iterations <= 500
                and self.max_residual < 1e-8 and self.max_kl < 1e-8 and self.max_uniqueness_gap < 1e-8
                and self.max_step_ratio <= self.bound + 1e-6)


def random_simplex(rng: np.random.Generator, K: int) -> np.ndarray:
    return rng.dirichlet(np.ones(K))


def fixed_point_check(tfl: TflParams | None = None, n_trials: int = 100, seed: int = 0, d: int = 8, K: int = 4,
                      init_scale: float = 0.05, max_iter: int = 500, tol: float = 1e-9) -> FixedPointReport:
    """Iterate the feedback map from random (z, y0) pairs and audit every fixed point."""
    rng = np.random.default_rng(derive_seed(seed, "fixed-point"))
    if tfl is None:
        tfl = init_tfl(np.random.default_rng(derive_seed(seed, "fixed-point/init")), d, K, 2 * d, init_scale)
    d, K = tfl.width, tfl.n_classes
    bound = contraction_bound(tfl)
    conv = 0
    iters = 0
    resid = kl = gap = ratio = 0.0
    for _ in range(n_trials):
        z = rng.normal(size=d)
        y_a, traj, ok = iterate_fixed_point(z, random_simplex(rng, K), tfl, max_iter, tol)
        y_b, _, ok_b = iterate_fixed_point(z, random_simplex(rng, K), tfl, max_iter, tol)
        conv += int(ok and ok_b)
        iters = max(iters, len(traj) - 1)
        nxt = feedback_map(z, y_a, tfl)
        resid = max(resid, float(np.max(np.abs(nxt - y_a))))
        kl = max(kl, kl_divergence(y_a, nxt))
        gap = max(gap, float(np.max(np.abs(y_a - y_b))))
        for prev, cur, new in zip(traj, traj[1:], traj[2:]):
            den = np.linalg.norm(cur - prev)
            if den > 1e-10:
                ratio = max(ratio, float(np.linalg.norm(new - cur) / den))
    return FixedPointReport(bound, n_trials, conv, iters, resid, kl, gap, ratio)


def scaled_model(model: Model, name: str, c: float) -> Model:
    """Copy of ``model`` with the named parameter multiplied by c."""
    params = model.params.copy()
    t = params.named()[name]
    t.data = t.data * c
    return Model(model.cfg, params, getattr(model, "data_fingerprint", None))


def zero_model(cfg: ModelConfig) -> Model:
    params = init_params(cfg, 0)
    for t in params.named().values():
        t.data = np.zeros_like(t.data)
    return Model(replace(cfg), params)
