"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Operations are recorded on the active
:class:`Tape` only when at least one input is tracked (a parameter with
``requires_grad`` or the output of a recorded operation); outside a tape every
operation is a plain numpy evaluation, which is what inference uses.

Broadcasting follows numpy's trailing-axis alignment. Incompatible shapes raise
:class:`ShapeError` instead of being coerced.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class FullyMaskedRowError(RuntimeError):
    """A softmax slice had every position masked with -inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    nodes: list[_Node] = field(default_factory=list)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        output.node = len(self.nodes)
        self.nodes.append(_Node(inputs, output, backward))

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def tape():
    """Activate a fresh gradient tape for the enclosed forward pass."""
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    tp = Tape()
    stack.append(tp)
    try:
        yield tp
    finally:
        stack.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    result = Tensor(out)
    tp = _active_tape()
    if tp is not None and any(t.tracked for t in inputs):
        tp.record(inputs, result, backward)
    return result


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b} (trailing-axis alignment)") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of negative input")
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def prelu(x, slope) -> Tensor:
    """``x`` where positive, ``slope * x`` otherwise.

    ``slope`` is a scalar or per-channel (last axis) tensor.
    """
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.ndim > 1 or (slope.ndim == 1 and slope.shape[0] not in (1, x.shape[-1])):
        raise ShapeError(f"prelu slope shape {slope.shape} does not match channels of {x.shape}")
    xd, sd = x.data, slope.data
    pos = xd > 0
    out = np.where(pos, xd, sd * xd)

    def backward(g):
        gx = np.where(pos, g, g * sd)
        gs = np.where(pos, 0.0, g * xd)
        if slope.ndim == 0:
            gs = np.asarray(gs.sum())
        else:
            gs = unbroadcast(gs, slope.shape)
        return gx, gs

    return _make(out, (x, slope), backward)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    peak = ad.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(ad - peak)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + peak).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _make(out, (a,), backward)


def l2_norm(a) -> Tensor:
    """Euclidean norm over the last axis; the gradient at the origin is taken as 0."""
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=-1))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out[..., None] > 0, ad / safe[..., None], 0.0) * g[..., None],)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    return _make(out, ts, lambda g: tuple(np.moveaxis(g, ax, 0)))


def index(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[key]

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), backward)


def scatter_rows(a, rows: np.ndarray, n: int) -> Tensor:
    """Place the rows of ``a`` at positions ``rows`` of an ``n``-row zero tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:], dtype=DTYPE)
    out[rows] = a.data
    return _make(out, (a,), lambda g: (g[rows],))


# ---------------------------------------------------------------- fused nn ops


def masked_softmax(logits, additive_mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``logits + additive_mask`` over the last axis.

    Mask entries are 0, finite negatives, or ``-inf``; ``-inf`` positions get
    exactly zero weight. A slice masked entirely raises FullyMaskedRowError.
    """
    logits = as_tensor(logits)
    if axis not in (-1, logits.ndim - 1):
        raise ShapeError("masked_softmax normalizes over the last axis only")
    x = logits.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, DTYPE)
        if np.any(np.isnan(m)) or np.any(m == np.inf):
            raise DomainError("attention mask entries must be finite or -inf")
        _broadcast_shape(x.shape, m.shape)
        x = x + m
    peak = x.max(axis=-1, keepdims=True)
    if np.any(peak == -np.inf):
        raise FullyMaskedRowError("fully masked row in softmax: every position is -inf")
    e = np.exp(x - peak)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _make(y, (logits,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        gb = unbroadcast(g, bias.shape)
        gg = unbroadcast(g * xhat, gain.shape)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, tp: Tape | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Populates ``.grad`` on every ``requires_grad`` leaf reached. Parameters in
    ``params`` that the loss does not reach receive zero gradients.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tp = tp or _active_tape()
    if tp is None or loss.node is None or loss.node >= len(tp.nodes) or tp.nodes[loss.node].output is not loss:
        raise TapeError("loss is not recorded on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tp.nodes[: loss.node + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=DTYPE)
            if inp.node is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key].reshape(leaf.shape)
    if params is not None:
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data)
    return grads


class NonDeterministicError(RuntimeError):
    pass


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error of analytic gradients against central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. The
    relative error of one entry is ``|analytic - numeric| / max(1, |analytic|)``.
    With ``max_entries`` only a random subset of entries per parameter is probed.
    """
    with tape():
        loss = f()
        backward(loss, params)
    base = loss.item()
    again = f().item()
    if base != again:
        raise NonDeterministicError(f"f is not deterministic: {base!r} != {again!r}")
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, max_entries, replace=False)
        for i in entries:
            old = flat[i]
            flat[i] = old + h
            up = f().item()
            flat[i] = old - h
            down = f().item()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
