"""Minimal dense tensor with reverse-mode gradients.

Only the operations needed by the adapter equations are provided. Every op
accepts arbitrary leading (batch) dimensions, so the same code path serves a
single ``[T, N, D]`` sample and a ``[B, T, N, D]`` minibatch.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
        self.data = arr.astype(dtype, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # interior nodes hold transient grads; only leaves keep theirs
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for tests and loss code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{what}: non-finite input")


# --- products -------------------------------------------------------------

def matmul_bt(x: Tensor, y: Tensor) -> Tensor:
    """Batched ``x @ y^T`` over the last two axes: [..., N, D] x [..., M, D] -> [..., N, M]."""
    if x.ndim < 2 or x.shape[:-2] != y.shape[:-2] or x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"matmul_bt: incompatible shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    out = np.matmul(xd, np.swapaxes(yd, -1, -2))

    def backward(g):
        return (np.matmul(g, yd) if x.requires_grad else None,
                np.matmul(np.swapaxes(g, -1, -2), xd) if y.requires_grad else None)

    return _make(out, (x, y), backward)


def matmul(a: Tensor, y: Tensor) -> Tensor:
    """Batched product over the last two axes: [..., N, M] x [..., M, D] -> [..., N, D]."""
    if a.ndim < 2 or a.shape[:-2] != y.shape[:-2] or a.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {y.shape}")
    ad, yd = a.data, y.data
    out = np.matmul(ad, yd)

    def backward(g):
        return (np.matmul(g, np.swapaxes(yd, -1, -2)) if a.requires_grad else None,
                np.matmul(np.swapaxes(ad, -1, -2), g) if y.requires_grad else None)

    return _make(out, (a, y), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape [D_in, D_out] shared over all leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, "
                         f"{None if b is None else b.shape}")
    xd, wd = x.data, w.data
    # flatten leading axes: one GEMM instead of many small batched ones
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# --- normalisation and reductions -------------------------------------------

def softmax_last(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax_last: empty last axis")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_last: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward)


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def mean_axis(x: Tensor, axis: int) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "mean_axis")
    n = x.shape[ax]
    out = x.data.mean(axis=ax)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape),)

    return _make(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(x.data.sum()), (x,), backward)


def concat(x: Tensor, y: Tensor, axis: int) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "concat")
    if x.ndim != y.ndim or any(a != b for i, (a, b) in enumerate(zip(x.shape, y.shape)) if i != ax):
        raise ShapeError(f"concat: incompatible shapes {x.shape} and {y.shape} on axis {axis}")
    n = x.shape[ax]
    out = np.concatenate([x.data, y.data], axis=ax)

    def backward(g):
        gx, gy = np.split(g, [n], axis=ax)
        return gx, gy

    return _make(out, (x, y), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "slice_axis")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(out, (x,), backward)


def expand_prefix(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``(*lead, *x.shape)``; the gradient sums over the new axes."""
    lead = tuple(int(n) for n in lead)
    out = np.broadcast_to(x.data, lead + x.shape)
    axes = tuple(range(len(lead)))

    def backward(g):
        return (g.sum(axis=axes),)

    return _make(out, (x,), backward)


# --- elementwise ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"add: shapes differ {x.shape} vs {y.shape}")

    def backward(g):
        return g, g

    return _make(x.data + y.data, (x, y), backward)


def scale(x: Tensor, s) -> Tensor:
    """Multiply every element of ``x`` by a scalar (float or 0-d/1-element tensor)."""
    s = _as_tensor(s)
    if s.data.size != 1:
        raise ShapeError(f"scale: expected a scalar factor, got shape {s.shape}")
    sv = s.data.reshape(())
    xd = x.data
    out = xd * sv

    def backward(g):
        gx = g * sv if x.requires_grad else None
        gs = np.reshape((g * xd).sum(), s.shape) if s.requires_grad else None
        return gx, gs

    return _make(out, (x, s), backward)


def broadcast_mul(mask: Tensor, x: Tensor) -> Tensor:
    """Multiply ``x`` by ``mask`` broadcast along trailing axes.

    ``mask.shape`` must be a prefix of ``x.shape`` (e.g. [T] against [T, N, M]).
    """
    mask = _as_tensor(mask)
    k = mask.ndim
    if x.shape[:k] != mask.shape:
        raise ShapeError(f"broadcast_mul: mask shape {mask.shape} is not a prefix of {x.shape}")
    extra = x.ndim - k
    md = mask.data.reshape(mask.shape + (1,) * extra)
    xd = x.data
    out = md * xd

    def backward(g):
        gm = (g * xd).sum(axis=tuple(range(k, x.ndim))) if mask.requires_grad else None
        gx = g * md if x.requires_grad else None
        return gm, gx

    return _make(out, (mask, x), backward)


# --- losses ---------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for logits [B, C] (or [C]) and integer labels."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z2.ndim != 2 or y.shape != (z2.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    if np.any(y < 0) or np.any(y >= z2.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, y].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        p *= g / z2.shape[0]
        return (p[0] if single else p,)

    return _make(np.asarray(loss), (logits,), backward)


# --- verification ---------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               floor: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None, kink_tol: float | None = None,
               stats: dict | None = None) -> float:
    """Maximum relative error between reverse-mode and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current values of ``params``. Where
    both gradients are smaller than ``floor`` in magnitude the absolute error
    is used instead. With ``max_entries`` only that many randomly chosen
    coordinates of each larger tensor are perturbed.

    With ``kink_tol`` set, a coordinate whose forward and backward one-sided
    slopes differ by more than ``kink_tol`` (relative) is skipped: the
    perturbation crossed a non-differentiable point such as a ReLU corner,
    where no finite difference estimates the derivative. ``stats`` receives
    ``checked`` and ``skipped`` counts.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite objective")
    f0 = out.item()
    out.backward()
    worst = 0.0
    checked = skipped = 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        else:
            picks = np.arange(flat.size)
        numeric = np.empty(picks.size)
        keep = np.ones(picks.size, dtype=bool)
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: non-finite objective in eps-neighbourhood")
            numeric[j] = (fp - fm) / (2 * eps)
            if kink_tol is not None:
                up, down = (fp - f0) / eps, (f0 - fm) / eps
                if abs(up - down) > kink_tol * max(abs(up), abs(down), floor):
                    keep[j] = False
        a = analytic.reshape(-1)[picks][keep]
        numeric = numeric[keep]
        checked += int(keep.sum())
        skipped += int((~keep).sum())
        denom = np.maximum(np.abs(a), np.abs(numeric))
        err = np.abs(a - numeric)
        rel = np.where(denom < floor, err, err / np.where(denom < floor, 1.0, denom))
        if rel.size:
            worst = max(worst, float(rel.max()))
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst
