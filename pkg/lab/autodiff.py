"""
Dense-tensor engine with an explicit reverse-mode tape.

Every primitive takes an optional ``tape``. With ``tape=None`` (or when none
of the inputs live on the tape) the primitive is a plain numpy evaluation;
otherwise the output is registered as a node together with a vector-Jacobian
closure, and ``Tape.backward`` replays the records in exact reverse order.
There is no global autodiff state: whoever owns the tape owns the gradients.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from lab.core.exceptions import ConfigError, MaskError, NumericError, ShapeError, TapeError, TargetIndexError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_GELU_C = float(np.sqrt(2.0 / np.pi))


class Tensor:
    """Row-major float64 array with an optional gradient slot and tape handle"""

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data, grad: Optional[np.ndarray] = None, node_id: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        if grad is not None and np.shape(grad) != self.data.shape:
            raise ShapeError(f"grad shape {np.shape(grad)} does not match data shape {self.data.shape}")
        self.grad = grad
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {list(self.data.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, node_id={self.node_id})"


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of primitive operations; single owner, single thread"""

    def __init__(self):
        self._tensors: List[Tensor] = []
        self._records: List[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def node(self, t: Tensor) -> Optional[int]:
        """Node index of ``t`` on this tape, or None if it is a constant here"""
        i = t.node_id
        if i is not None and i < len(self._tensors) and self._tensors[i] is t:
            return i
        return None

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf so gradients flow into it"""
        if self.node(t) is None:
            t.node_id = len(self._tensors)
            self._tensors.append(t)
        return t

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
        ids = tuple(self.node(t) for t in inputs)
        result = Tensor(out)
        if all(i is None for i in ids):
            return result
        self.watch(result)
        self._records.append(_Record(op, ids, result.node_id, vjp))
        return result

    def backward(self, loss: Tensor) -> None:
        """Fill ``grad`` of every node with d(loss)/d(node)"""
        loss_id = self.node(loss)
        if loss_id is None:
            raise TapeError("loss tensor is not on this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {list(loss.shape)}")

        grads: List[Optional[np.ndarray]] = [None] * len(self._tensors)
        grads[loss_id] = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g = grads[rec.output]
            if g is None:
                continue
            for idx, gi in zip(rec.inputs, rec.vjp(g)):
                if idx is None or gi is None:
                    continue
                grads[idx] = gi if grads[idx] is None else grads[idx] + gi

        for t, g in zip(self._tensors, grads):
            t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.data.shape)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _emit(tape: Optional[Tape], op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if tape is None:
        return Tensor(out)
    return tape.record(op, out, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def matmul(a: ArrayLike, b: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs arrays, got shapes {list(a.shape)} and {list(b.shape)}")
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    out2 = np.matmul(a2, b2)
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def vjp(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ga, gb

    return _emit(tape, "matmul", out, (a, b), vjp)


def add(a: ArrayLike, b: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(tape, "add", a.data + b.data, (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(tape, "sub", a.data - b.data, (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(tape, "mul", a.data * b.data, (a, b), vjp)


def scale(a: ArrayLike, c: float, tape: Optional[Tape] = None) -> Tensor:
    a = as_tensor(a)
    return _emit(tape, "scale", a.data * c, (a,), lambda g: (g * c,))


def transpose(a: ArrayLike, axes: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(tape, "transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: ArrayLike, shape: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    a = as_tensor(a)
    return _emit(tape, "reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),))


def take(a: ArrayLike, index, tape: Optional[Tape] = None) -> Tensor:
    """Numpy-style indexing (gather); repeated indices accumulate gradient"""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=np.float64, copy=True)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, index, g)
        return (z,)

    return _emit(tape, "take", out, (a,), vjp)


def scatter_rows(x: ArrayLike, index, values: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    """Copy of ``x`` with ``x[index]`` replaced by ``values`` (replacement, not addition)"""
    x, values = as_tensor(x), as_tensor(values)
    out = x.data.copy()
    out[index] = values.data

    def vjp(g):
        gx = g.copy()
        gx[index] = 0.0
        return gx, np.array(g[index]).reshape(values.shape)

    return _emit(tape, "scatter_rows", out, (x, values), vjp)


def softmax_rows(x: ArrayLike, mask: Optional[np.ndarray] = None, tape: Optional[Tape] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` True marks entries excluded from normalization"""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if mask.all(axis=-1).any():
            raise MaskError("softmax row is fully masked")
        z = np.where(mask, -np.inf, z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    if mask is not None:
        e = np.where(mask, 0.0, e)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(tape, "softmax_rows", y, (x,), vjp)


def log_softmax_rows(x: ArrayLike, mask: Optional[np.ndarray] = None, tape: Optional[Tape] = None) -> Tensor:
    """Log-softmax over the last axis; masked entries are excluded and read as 0"""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if mask.all(axis=-1).any():
            raise MaskError("log-softmax row is fully masked")
        z = np.where(mask, -np.inf, z)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    if mask is not None:
        out = np.where(mask, 0.0, out)
        p = np.where(mask, 0.0, p)

    def vjp(g):
        if mask is not None:
            g = np.where(mask, 0.0, g)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(tape, "log_softmax_rows", out, (x,), vjp)


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5,
               tape: Optional[Tape] = None) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _emit(tape, "layer_norm", out, (x, gamma, beta), vjp)


def gelu(x: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    """tanh approximation (GPT-2)"""
    x = as_tensor(x)
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return _emit(tape, "gelu", out, (x,), vjp)


def elu_plus_one(x: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    """Positive feature map elu(x) + 1"""
    x = as_tensor(x)
    v = x.data
    ev = np.exp(np.minimum(v, 0.0))
    out = np.where(v > 0, v + 1.0, ev)
    return _emit(tape, "elu_plus_one", out, (x,), lambda g: (g * np.where(v > 0, 1.0, ev),))


def l2_normalize(x: ArrayLike, eps: float = 1e-12, tape: Optional[Tape] = None) -> Tensor:
    """Unit-normalize along the last axis"""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)) + eps
    y = x.data / n

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _emit(tape, "l2_normalize", y, (x,), vjp)


def sum_all(x: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    x = as_tensor(x)
    return _emit(tape, "sum_all", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    x = as_tensor(x)
    n = max(x.size, 1)
    return _emit(tape, "mean_all", np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def cross_entropy(logits: ArrayLike, targets: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    """Mean negative log-softmax probability of ``targets`` (logits [n, V])"""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, V] logits, got {list(logits.shape)}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} logit rows")
    bad = (targets < 0) | (targets >= vocab)
    if bad.any():
        raise TargetIndexError(f"target {int(targets[bad][0])} outside [0, {vocab})")
    lp = log_softmax_rows(logits, tape=tape)
    picked = take(lp, (np.arange(n), targets), tape=tape)
    return scale(mean_all(picked, tape=tape), -1.0, tape=tape)


# ---------------------------------------------------------------- checks


def grad_check(f: Callable[[Optional[Tape], Tensor], Tensor], x: ArrayLike, eps: float = 1e-4) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f(tape, x)`` must build a scalar from ``x`` using the primitives above.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    base = np.array(as_tensor(x).data, dtype=np.float64, copy=True)

    tape = Tape()
    xt = tape.watch(Tensor(base.copy()))
    loss = f(tape, xt)
    tape.backward(loss)
    analytic = xt.grad
    if not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite analytic gradient")

    numeric = np.zeros_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus.flat[i] += eps
        minus.flat[i] -= eps
        fp = f(None, Tensor(plus)).item()
        fm = f(None, Tensor(minus)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near entry {i}")
        numeric.flat[i] = (fp - fm) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
