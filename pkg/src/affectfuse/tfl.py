"""Temporal feedback loop: previous soft prediction fed back into the classifier input."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import LinearParams, init_linear, init_mlp, linear_forward, mlp_forward
from .spectral import power_iteration
from .tensor import ContractError, Tensor

SIMPLEX_TOL = 1e-9


@dataclass
class TflParams:
    feedback: LinearParams  # (d + K) -> d
    classifier: list[LinearParams]  # d -> ... -> K

    @property
    def width(self) -> int:
        return self.feedback.out_dim

    @property
    def n_classes(self) -> int:
        return self.classifier[-1].out_dim


def init_tfl(rng: np.random.Generator, d: int, n_classes: int, cls_hidden: int, scale: float = 1.0) -> TflParams:
    dims = [d, cls_hidden, n_classes] if cls_hidden else [d, n_classes]
    return TflParams(init_linear(rng, d + n_classes, d, scale), init_mlp(rng, dims, scale))


def uniform(n_classes: int, batch: tuple[int, ...] = ()) -> np.ndarray:
    return np.full(batch + (n_classes,), 1.0 / n_classes)


def check_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    p = np.asarray(p)
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ContractError("previous prediction is not a point on the probability simplex")


def tfl_step(z_t: Tensor, y_prev, p: TflParams, feedback_grad: bool = False) -> tuple[Tensor, Tensor]:
    """One recurrence step; returns (y_t, z_tilde_t).

    ``y_prev`` enters as a constant unless ``feedback_grad`` is set and it is a
    taped tensor.
    """
    y_data = y_prev.data if isinstance(y_prev, Tensor) else np.asarray(y_prev, dtype=float)
    check_simplex(y_data)
    if not (feedback_grad and isinstance(y_prev, Tensor)):
        y_prev = Tensor(y_data)
    z_tilde = linear_forward(tn.concat_last_axis([z_t, y_prev]), p.feedback)
    y_t = tn.softmax_rows(mlp_forward(z_tilde, p.classifier))
    return y_t, z_tilde


def run_sequence(Z: Tensor, p: TflParams, y0=None, feedback=None, feedback_grad: bool = False) -> Tensor:
    """Unroll over the step axis of Z ([T, d] or [B, T, d]); returns [.., T, K].

    ``feedback`` ([.., T, K]) replaces the running previous predictions with
    fixed values; the gradient checker uses it to freeze the feedback path.
    """
    T = Z.shape[-2]
    lead = Z.shape[:-2]
    y_prev = uniform(p.n_classes, lead) if y0 is None else y0
    outs = []
    for t in range(T):
        z_t = tn.take(Z, (Ellipsis, t, slice(None)))
        fb = y_prev if feedback is None else np.asarray(feedback)[..., t, :]
        y_t, _ = tfl_step(z_t, fb, p, feedback_grad)
        outs.append(y_t)
        y_prev = y_t
    return tn.stack(outs, axis=Z.ndim - 2)


def classify_direct(Z: Tensor, p: TflParams) -> Tensor:
    """Classifier applied to z without feedback (the no-feedback ablation)."""
    return tn.softmax_rows(mlp_forward(Z, p.classifier))


def feedback_map(z: np.ndarray, y: np.ndarray, p: TflParams) -> np.ndarray:
    """y -> softmax(cls(W_fb [z; y] + b)) in plain numpy, for fixed-point analysis."""
    W = p.feedback.weight.data
    u = W @ np.concatenate([z, y]) + p.feedback.bias.data
    for i, layer in enumerate(p.classifier):
        u = layer.weight.data @ u + layer.bias.data
        if i < len(p.classifier) - 1:
            u = np.maximum(u, 0.0)
    u = u - u.max()
    e = np.exp(u)
    return e / e.sum()


def iterate_fixed_point(z: np.ndarray, y0: np.ndarray, p: TflParams, max_iter: int = 500,
                        tol: float = 1e-9) -> tuple[np.ndarray, list[np.ndarray], bool]:
    """Iterate y <- map(y) until the sup-norm step falls below ``tol``."""
    if tol <= 0:
        raise ContractError("tolerance must be positive")
    z = np.asarray(z, dtype=float)
    y = np.asarray(y0, dtype=float)
    check_simplex(y)
    traj = [y]
    for _ in range(max_iter):
        y_next = feedback_map(z, y, p)
        traj.append(y_next)
        if np.max(np.abs(y_next - y)) < tol:
            return y_next, traj, True
        y = y_next
    return y, traj, False


def contraction_bound(p: TflParams) -> float:
    """Lipschitz bound of the y -> y map in the 2-norm.

    ||W_fb[:, y-block]|| * prod ||W_cls_l|| * 1/2; relu layers contribute 1 and
    1/2 bounds the softmax Jacobian norm.
    """
    d = p.width
    bound = power_iteration(p.feedback.weight.data[:, d:])
    for layer in p.classifier:
        bound *= power_iteration(layer.weight.data)
    return 0.5 * bound
