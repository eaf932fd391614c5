"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a plain function over :class:`Tensor`. When a :class:`Tape` is
active and at least one input requires a gradient, the op appends a node
(output, inputs, local backward rule) to the tape. ``backward(loss)`` replays
that tape once, in reverse.

Compute runs in float32. Float64 inputs stay float64, which is what
``grad_check`` relies on to keep central differences out of float32 noise.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Used as a context manager; ops executed inside the block are recorded.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("tape already replayed")
        self.consumed = True
        # grads of intermediates live here; leaves accumulate into .grad
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_state = _State()


def _active() -> Tape | None:
    return _state.stack[-1] if _state.stack else None


def _track(out_data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, rule)
    return out


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced under a Tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if b.shape == a.shape or b.size == 1:
        return
    if a.shape[len(a.shape) - len(b.shape):] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not trailing-compatible")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim > a.data.ndim:
        a, b = b, a
    _check_trailing(a, b, "add")
    sa, sb = a.shape, b.shape
    return _track(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim > a.data.ndim:
        a, b = b, a
    _check_trailing(a, b, "mul")
    ad, bd = a.data, b.data
    return _track(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape) if a.requires_grad else None,
                                              _reduce_to(g * ad, bd.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return _track(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _track(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """``a + c`` for a constant array ``c`` broadcastable to ``a``."""
    return _track(a.data + c.astype(a.dtype, copy=False), (a,), lambda g: (g,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=a.dtype)
    return _track(a.data * c, (a,), lambda g: (_reduce_to(g * c, a.shape),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return _track(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _track(np.asarray([a.data.sum()], dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g[0], shape).copy(),))


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; ``b`` may also be a plain 2-D weight."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _track(ad @ bd, (a, b), rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _track(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _track(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _track(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; the backward pass scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]

    def rule(g):
        if not table.requires_grad:
            return (None,)
        out = np.zeros((vocab, table.shape[1]), dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _track(table.data[ids], (table,), rule)


# ---------------------------------------------------------------------------
# normalisation, attention pieces


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _track(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm: weight {weight.shape} vs last dim of {x.shape}")
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xn = xd * r

    def rule(g):
        u = g * wd
        gx = r * u - xn * (u * xn).mean(axis=-1, keepdims=True) * r if x.requires_grad else None
        gw = (g * xn).reshape(-1, xd.shape[-1]).sum(axis=0) if weight.requires_grad else None
        return gx, gw

    return _track(xn * wd, (x, weight), rule)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding, half-split convention; cos/sin broadcast against x."""
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    xd = x.data
    y = xd * cos + _rotate_half(xd) * sin
    return _track(y, (x,), lambda g: (g * cos + _rotate_half_t(g * sin),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul_const(x, keep)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions."""
    ld = logits.data
    vocab = ld.shape[-1]
    flat = ld.reshape(-1, vocab)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} positions vs {tgt.shape[0]} targets")
    keep = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy: every position is masked, loss undefined")
    sel = tgt[keep]
    if sel.min() < 0 or sel.max() >= vocab:
        raise DimensionError(f"cross_entropy: target outside [0, {vocab})")
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, sel].sum() / count

    def rule(g):
        p = np.exp(logp)
        p[rows, sel] -= 1.0
        p *= keep[:, None]
        return ((p * (g[0] / count)).reshape(ld.shape).astype(ld.dtype, copy=False),)

    return _track(np.asarray([loss], dtype=ld.dtype), (logits,), rule)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               atol: float = 1e-8) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` receives float64 copies of ``params`` and must build its graph from
    them. The error for each parameter tensor is ``max|auto - numeric|``
    divided by ``max(max|numeric|, max|auto|)``. A tensor whose true gradient
    is zero (a key bias under softmax, say) leaves only round-off in both
    estimates, so when both stay below ``atol`` it contributes zero.
    """
    work = [Tensor(p.data.astype(np.float64), requires_grad=True, name=p.name) for p in params]
    with Tape():
        loss = f(work)
        backward(loss)
    auto = [np.zeros_like(w.data) if w.grad is None else w.grad.copy() for w in work]
    worst = 0.0
    for w, a in zip(work, auto):
        flat = w.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(work).item()
            flat[i] = orig - eps
            down = f(work).item()
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        denom = max(np.abs(num).max(initial=0.0), np.abs(a).max(initial=0.0))
        if denom < atol:
            continue
        worst = max(worst, float(np.abs(a.reshape(-1) - num).max() / denom))
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
