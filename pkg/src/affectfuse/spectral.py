"""Operator 2-norms by power iteration."""
from __future__ import annotations

import numpy as np


class NumericalError(ArithmeticError):
    pass


def power_iteration(W: np.ndarray, tol: float = 1e-6, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value of ``W`` via power iteration on W^T W.

    Stops once successive estimates agree to relative tolerance ``tol``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if not np.all(np.isfinite(W)):
        raise NumericalError("matrix has non-finite entries")
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).normal(size=W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = W @ v
        nu = np.linalg.norm(u)
        w = W.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector fell in the null space; reseed deterministically
            v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
            continue
        v = w / nw
        est = nw / nu
        if abs(est - sigma) <= tol * est:
            return float(est)
        sigma = est
    raise NumericalError(f"power iteration did not converge in {max_iter} steps")
