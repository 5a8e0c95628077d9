"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded when
at least one input requires a gradient.  ``tape.backward(loss)`` then walks the
recorded nodes once, in reverse order, accumulating gradients into the leaves.
Outside a tape nothing is recorded, which doubles as an inference mode.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_NDIM = 3


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_id")

    _counter = 0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_NDIM:
            raise DimensionError(f"tensors hold 1 to {MAX_NDIM} axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        Tensor._counter += 1
        self._id = Tensor._counter

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        Tensor._counter += 1
        t._id = Tensor._counter
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every one of these records like the named functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str = ""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("affectfuse_tape", default=None)


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        return backward(self, loss, params)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, rule) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(inputs, out, rule, name))
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Gradients land in ``.grad`` of every leaf that requires them.  Leaves in
    ``params`` that never touched the loss get an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(node.output._id)
        g = grads.pop(node.output._id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t._id)
            grads[t._id] = gi if prev is None else prev + gi
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._id not in produced:
                leaves[t._id] = t
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is not None:
            t.grad = g.copy() if t.grad is None else t.grad + g
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
    return {tid: grads[tid] for tid in leaves if tid in grads}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat: leading shapes {lead} and {t.shape[:-1]} differ")
    sizes = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, cuts, axis=-1)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _record("stack", tuple(tensors), out,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.array([a.data.sum()]), lambda g: (np.full(shape, g[0]),))


def mean_axis(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        shape = a.shape
        return _record("mean", (a,), np.array([a.data.mean()]), lambda g: (np.full(shape, g[0] / n),))
    axis = axis % a.ndim
    n = a.shape[axis]
    out = a.data.mean(axis=axis)
    if out.ndim == 0:
        out = out.reshape(1)
    shape = a.shape
    return _record("mean_axis", (a,), out,
                   lambda g: (np.broadcast_to(np.expand_dims(g.reshape(np.delete(shape, axis)), axis), shape) / n,))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    shape = a.shape
    out = a.data.sum(axis=axis)
    if out.ndim == 0:
        out = out.reshape(1)
    return _record("sum_axis", (a,), out,
                   lambda g: (np.broadcast_to(np.expand_dims(g.reshape(np.delete(shape, axis)), axis), shape).copy(),))


def elementwise(kind: str, x: Tensor, y=None) -> Tensor:
    """Dispatch by name over the enumerated elementwise kinds."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if kind in binary:
        if y is None:
            raise DimensionError(f"{kind} needs two operands")
        return binary[kind](x, y)
    if kind == "scale":
        return scale(x, float(y))
    if kind == "concat_last_axis":
        return concat_last_axis([x, y])
    if kind == "mean_axis":
        return mean_axis(x, None if y is None else int(y))
    unary = {"sigmoid": sigmoid, "relu": relu, "log": log}
    if kind in unary:
        return unary[kind](x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2D or 3D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", (a, b), ad @ bd, rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w.T + b for x [.., in], w [out, in], b [out]."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1]), g2.sum(axis=0)

    return _record("linear", (x, w, b), out, rule)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None,
                         keep: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` equal column blocks.

    q, k: [.., T, heads * dh]; v: [.., S, heads * dv].  ``mask`` [T, S] keeps
    True entries; ``keep`` is an optional pre-scaled dropout multiplier on the
    attention weights, shaped [.., heads, T, S].  Output columns follow the
    head order.
    """
    def split(a):
        lead, T, w = a.shape[:-2], a.shape[-2], a.shape[-1]
        return np.moveaxis(a.reshape(lead + (T, heads, w // heads)), -2, -3)

    def merge(a):
        a = np.moveaxis(a, -3, -2)
        return a.reshape(a.shape[:-2] + (a.shape[-2] * a.shape[-1],))

    if q.shape[-1] % heads or v.shape[-1] % heads or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: widths {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]} vs {heads} heads")
    Q, K, V = split(q.data), split(k.data), split(v.data)
    c = 1.0 / np.sqrt(Q.shape[-1])
    logits = (Q @ np.swapaxes(K, -1, -2)) * c
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    P = e / e.sum(axis=-1, keepdims=True)
    Pd = P * keep if keep is not None else P
    out = merge(Pd @ V)

    def rule(g):
        G = split(g)
        dPd = G @ np.swapaxes(V, -1, -2)
        dV = np.swapaxes(Pd, -1, -2) @ G
        dP = dPd * keep if keep is not None else dPd
        dL = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * c
        dQ = dL @ K
        dK = np.swapaxes(dL, -1, -2) @ Q
        return merge(dQ), merge(dK), merge(dV)

    res = _record("attention", (q, k, v), out, rule)
    return (res, P) if return_weights else res


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    shape = a.shape
    raw = np.asarray(a.data[index])
    inner = raw.shape
    fancy = _has_fancy(index)

    def rule(g):
        full = np.zeros(shape)
        g = g.reshape(inner)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record("take", (a,), raw.reshape(inner or (1,)).copy(), rule)


def _has_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (broadcastable, True = keep) excludes entries; every row must keep
    at least one entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), out, rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least two features")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def rule(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return dx, gg, gb

    return _record("layer_norm", (x, gamma, beta), out, rule)


def finite_diff_check(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                      tol: float = 1e-4, max_entries: int | None = None,
                      rng: np.random.Generator | None = None, abs_floor: float = 1e-6) -> dict[str, dict]:
    """Compare tape gradients of a scalar ``f`` with central differences.

    ``f`` must rebuild its graph from the current contents of ``params`` on
    every call.  Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is 1e-3 of the block's largest analytic magnitude, and
    never below ``abs_floor``.  Entries that are negligible within their
    block are then judged against the block scale.  Entries whose true
    gradient is zero (attention key biases, which softmax ignores) are judged
    against ``abs_floor``, so rounding noise in the difference quotient is
    not amplified.  ``max_entries`` samples that many coordinates per block
    instead of sweeping all of them.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    tensors = list(params.values())
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss, tensors)
    base = float(loss.data[0])
    if float(f().data[0]) != base:
        raise ContractError("objective is not deterministic: two evaluations differ")

    report = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        analytic = t.grad.reshape(-1)
        floor = max(1e-3 * float(np.abs(analytic).max(initial=0.0)), abs_floor)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data[0])
            flat[i] = orig - h
            fm = float(f().data[0])
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, err)
        report[name] = {"max_rel_error": float(worst), "checked": int(idx.size), "passed": bool(worst < tol)}
    return report
