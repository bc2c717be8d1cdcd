"""A small reverse-mode autodiff engine over numpy arrays.

Only leading-batch broadcasting is supported: a binary op accepts operands of
equal shape, or one operand whose shape is a suffix of the other's (a bias
added to every row, say).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import reps as _reps

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        Graph.trace(self).backward(self, grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root: Tensor, grad: np.ndarray) -> None:
        grads = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)
    _check_suffix(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)
    _check_suffix(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    x2 = x * x
    t = np.tanh(c * (x + k * x2 * x))
    out = half * x * (1 + t)

    def back(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x2)
        return (g * (half * (1 + t) + half * x * dt),)

    return _node(out, (a,), back, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` with batch dims; a 2-D ``b`` is shared across the batch."""
    a, b = _wrap(a), _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes differ {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold the batch into rows so the weight gradient is a single GEMM
        ad, bd = a.data, b.data
        flat = ad.reshape(-1, ad.shape[-1])
        out = (flat @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def back(g):
            gf = g.reshape(-1, g.shape[-1])
            return ((gf @ bd.T).reshape(ad.shape) if a.requires_grad else None,
                    flat.T @ gf if b.requires_grad else None)

        return _node(out, (a, b), back, "matmul")
    ad, bd = a.data, b.data
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError("matmul: batched right operand needs a batched left operand")

    def back(g):
        return (np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None,
                np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None)

    return _node(np.matmul(ad, bd), (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shp = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(shp),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _node(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    return _node(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def getitem(a: Tensor, idx) -> Tensor:
    shp, dt = a.shape, a.dtype

    def back(g):
        full = np.zeros(shp, dtype=dt)
        np.add.at(full, idx, g) if _needs_add_at(idx) else full.__setitem__(idx, g)
        return (full,)

    return _node(a.data[idx], (a,), back, "getitem")


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def broadcast_rows(a: Tensor, shape: tuple) -> Tensor:
    """Broadcast ``a`` to ``shape`` (numpy rules), e.g. a learned constant per batch."""
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from None

    def back(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _node(out, (a,), back, "broadcast")


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    shp, dt = a.shape, a.dtype
    return _node(np.asarray(a.data.sum(), dtype=dt), (a,),
                 lambda g: (np.broadcast_to(g, shp).astype(dt),), "sum")


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (a,), back, "softmax")


def layer_norm(a: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    parents = [a]
    out = xhat
    if gain is not None:
        parents.append(gain)
        out = out * gain.data
    if bias is not None:
        parents.append(bias)
        out = out + bias.data

    def back(g):
        gx = g * gain.data if gain is not None else g
        gm = gx.mean(axis=-1, keepdims=True)
        gxm = (gx * xhat).mean(axis=-1, keepdims=True)
        grads = [inv * (gx - gm - xhat * gxm)]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _node(out, parents, back, "layer_norm")


def neg_sq_dist(q: Tensor, k: Tensor) -> Tensor:
    """Logits ``-|q_i - k_j|^2`` for ``q: (..., n, d)`` and ``k: (..., m, d)``."""
    if q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"neg_sq_dist: incompatible shapes {q.shape} and {k.shape}")
    qd, kd = q.data, k.data
    qq = (qd * qd).sum(-1)[..., :, None]
    kk = (kd * kd).sum(-1)[..., None, :]
    out = 2 * np.matmul(qd, np.swapaxes(kd, -1, -2)) - qq - kk

    def back(g):
        gq = 2 * (np.matmul(g, kd) - g.sum(-1)[..., None] * qd)
        gk = 2 * (np.matmul(np.swapaxes(g, -1, -2), qd) - g.sum(-2)[..., None] * kd)
        return gq, gk

    return _node(out, (q, k), back, "neg_sq_dist")


def mse_loss(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _node(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,),
                 lambda g: (g * (2.0 / n) * diff,), "mse")


def rep_apply_node(P, X: Tensor, mode: str = "plain", counter=None) -> Tensor:
    """Differentiable token-wise representation product.

    ``P`` is constant; the backward pass multiplies incoming gradients by the
    transposed per-token blocks of ``rho^mode``.
    """
    Pm = _reps._modeled(_reps._as_rep(P), mode)
    out = _reps.rep_apply(Pm, X.data, "plain", counter)
    lead = X.shape

    def back(g):
        gx = _reps.rep_apply(Pm, g, "transpose")
        return (gx.reshape(lead) if gx.shape == lead else _unbroadcast(gx, lead),)

    return _node(out, (X,), back, "rep_apply")


# ---------------------------------------------------------------- parameters and init

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    return Tensor(w, requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """One decoupled-weight-decay Adam update; mutates and returns ``params``.

    ``params`` and ``grads`` map names to arrays.
    """
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        dt = p.dtype.type
        if state.weight_decay:
            p *= dt(1.0 - state.lr * state.weight_decay)
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        g2 = g * g
        g2 *= dt(1.0 - b2)
        v += g2
        denom = np.sqrt(v, out=g2)
        denom *= dt(1.0 / np.sqrt(bc2))
        denom += dt(state.eps)
        upd = np.divide(m, denom, out=denom)
        upd *= dt(state.lr / bc1)
        p -= upd
    return params


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for named :class:`Tensor` parameters."""

    def __init__(self, params: dict, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-3):
        self.params = params
        self.state = AdamWState(lr, tuple(betas), eps, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step({k: p.data for k, p in self.params.items()},
                   {k: p.grad for k, p in self.params.items() if p.grad is not None},
                   self.state)


# ---------------------------------------------------------------- gradient check

class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradient_check(closure: Callable[[], Tensor], params: dict, tol: float = 1e-6,
                   h: float = 1e-5, max_entries: Optional[int] = None,
                   seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``closure`` must rebuild the scalar loss from the current parameter data.
    The error for one parameter is ``max|a - n| / max(max|a|, max|n|)`` over
    the checked entries. ``max_entries`` caps the entries probed per
    parameter (chosen by a seeded generator).
    """
    for p in params.values():
        p.grad = None
    loss = closure()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    per_param = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(idx.size)
        with no_grad():
            for k, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = float(closure().data)
                flat[i] = old - h
                fm = float(closure().data)
                flat[i] = old
                num[k] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(num)) or not np.all(np.isfinite(analytic)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        a = analytic.reshape(-1)[idx]
        denom = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        err = float(np.abs(a - num).max(initial=0.0) / denom) if denom > 0 else 0.0
        per_param[name] = err
    return GradCheckReport(max(per_param.values(), default=0.0), tol, per_param)
