"""Training objective and classification metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ContractError, DimensionError, Tensor

LOG_EPS = 1e-12
KL_EPS = 1e-12


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    kl: float
    lam: float

    @property
    def value(self) -> float:
        return float(self.total.data[0])


def cross_entropy(y_hat, y) -> Tensor:
    """-log(y_hat[..., y] + 1e-12), averaged over any leading axes."""
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    y = np.asarray(y, dtype=np.int64)
    K = y_hat.shape[-1]
    if np.any(y < 0) or np.any(y >= K):
        raise ContractError(f"class index out of range [0, {K})")
    onehot = np.eye(K)[y]
    picked = tn.sum_axis(tn.mul(y_hat, Tensor(onehot)), -1)
    return tn.scale(tn.mean_axis(tn.log(tn.add(picked, LOG_EPS))), -1.0)


def kl_terms(p: Tensor, q: Tensor) -> Tensor:
    """Per-row sum_i p_i log((p_i + eps) / (q_i + eps)); rows with p_i = 0 terms add 0."""
    if p.shape != q.shape:
        raise DimensionError(f"kl: shapes {p.shape} and {q.shape} differ")
    ratio = tn.sub(tn.log(tn.add(p, KL_EPS)), tn.log(tn.add(q, KL_EPS)))
    return tn.sum_axis(tn.mul(p, ratio), -1)


def kl_divergence(p, q) -> float:
    p = p if isinstance(p, Tensor) else Tensor(p)
    q = q if isinstance(q, Tensor) else Tensor(q)
    return float(kl_terms(p, q).data.sum())


def sequence_loss(y_hat: Tensor, labels, lam: float = 0.1, kl_stop_grad: bool = False) -> LossBreakdown:
    """(1/T) sum_t CE(y_t) + lam (1/T) sum_{t>=2} KL(y_{t-1} || y_t), averaged over sessions.

    ``y_hat`` is [T, K] or [B, T, K].
    """
    labels = np.asarray(labels)
    if y_hat.shape[:-1] != labels.shape:
        raise DimensionError(f"predictions {y_hat.shape[:-1]} and labels {labels.shape} differ in length")
    T = y_hat.shape[-2]
    ce = cross_entropy(y_hat, labels)
    if T > 1 and lam > 0:
        prev = tn.take(y_hat, (Ellipsis, slice(0, T - 1), slice(None)))
        if kl_stop_grad:
            prev = Tensor(prev.data)
        nxt = tn.take(y_hat, (Ellipsis, slice(1, T), slice(None)))
        # sum over t >= 2, divide by T: mean over the T-1 pairs times (T-1)/T
        kl = tn.scale(tn.mean_axis(kl_terms(prev, nxt)), (T - 1) / T)
        total = tn.add(ce, tn.scale(kl, lam))
        kl_value = float(kl.data[0])
    else:
        total = ce
        kl_value = 0.0 if T == 1 or lam == 0 else _kl_value(y_hat.data)
    return LossBreakdown(total, float(ce.data[0]), kl_value, lam)


def _kl_value(y: np.ndarray) -> float:
    T = y.shape[-2]
    p, q = y[..., :-1, :], y[..., 1:, :]
    terms = (p * (np.log(p + KL_EPS) - np.log(q + KL_EPS))).sum(axis=-1)
    return float(terms.mean() * (T - 1) / T)


def _check_pair(preds, labels):
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.size == 0:
        raise ContractError("metrics need at least one prediction")
    if preds.shape != labels.shape:
        raise DimensionError(f"{preds.size} predictions but {labels.size} labels")
    return preds, labels


def confusion_matrix(preds, labels, K: int) -> np.ndarray:
    preds, labels = _check_pair(preds, labels)
    if preds.min() < 0 or labels.min() < 0 or preds.max() >= K or labels.max() >= K:
        raise ContractError(f"class index out of range [0, {K})")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_f1(preds, labels, K: int) -> np.ndarray:
    """F1 per class; 0 for a class with no support in either argument."""
    cm = confusion_matrix(preds, labels, K)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / denom, 0.0)
    return f1


def macro_f1(preds, labels, K: int) -> float:
    return float(per_class_f1(preds, labels, K).mean())


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.mean(preds == labels))
