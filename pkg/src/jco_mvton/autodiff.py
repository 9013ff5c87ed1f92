"""Dense tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a node carrying a
global sequence number.  ``backward`` walks the recorded nodes reachable from
the output in exact reverse recording order, which is a valid reverse
topological order because a node can only be recorded after its inputs.

numpy provides storage and the dense kernels; differentiation rules live here.
"""

from __future__ import annotations

import itertools
import struct
import threading
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_SEQ = itertools.count()
_state = threading.local()

TENSOR_MAGIC = b"PTNSR1"


class FullyMaskedRowWarning(RuntimeWarning):
    """A softmax row had every entry masked; it was defined as all zeros."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _check_finite_enabled() -> bool:
    return getattr(_state, "check_finite", False)


@contextmanager
def no_grad():
    """Disable recording inside the block (used by samplers and evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def check_finite(enabled: bool = True):
    """Raise NonFiniteError as soon as any op produces NaN or inf."""
    prev = _check_finite_enabled()
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


def mask_sentinel(dtype=np.float64) -> float:
    """Finite stand-in for minus infinity in score arithmetic."""
    return float(-np.finfo(dtype).max / 2)


class Tensor:
    """An immutable n-d array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad=None) -> "ComputationTape":
        tape = ComputationTape.from_output(self)
        tape.backward(self, grad)
        return tape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _check_finite_enabled() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op {op!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out_data = np.asarray(out_data)
    out_data.setflags(write=False)
    out.data = out_data
    out.grad = None
    out.name = None
    out._op = op
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_SEQ)
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


@dataclass(frozen=True)
class TapeRecord:
    seq: int
    op: str
    input_ids: tuple[int, ...]
    output_id: int


class ComputationTape:
    """The recorded ops reachable from one output, in recording order."""

    def __init__(self, nodes: list[Tensor]):
        self._nodes = sorted(nodes, key=lambda n: n._seq)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            node = stack.pop()
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        return cls(nodes)

    @property
    def records(self) -> list[TapeRecord]:
        return [
            TapeRecord(n._seq, n._op, tuple(id(p) for p in n._parents), id(n))
            for n in self._nodes
        ]

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, out: Tensor, grad=None) -> list[int]:
        """Propagate ``grad`` (default: ones, scalar outputs only) to the leaves.

        Leaf gradients accumulate into ``.grad``.  Returns the sequence numbers
        in the order they were visited.
        """
        if grad is None:
            if out.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        if out.is_leaf and out.requires_grad:
            out.grad = grads[id(out)] if out.grad is None else out.grad + grads[id(out)]
        visited = []
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            visited.append(node._seq)
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        return visited


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def back(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _record(out, (a,), back, "silu")


def rms_norm(x, gain=None, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x = as_tensor(x)
    parents = [x]
    if gain is not None:
        gain = as_tensor(gain)
        if gain.shape != x.shape[-1:]:
            raise DimensionError(f"rms_norm gain {gain.shape} vs features {x.shape[-1:]}")
        parents.append(gain)
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out = normed * gain.data if gain is not None else normed

    def back(g):
        dn = g * gain.data if gain is not None else g
        dx = inv * (dn - normed * np.mean(dn * normed, axis=-1, keepdims=True))
        if gain is None:
            return (dx,)
        dgain = (g * normed).reshape(-1, normed.shape[-1]).sum(axis=0)
        return (dx, dgain)

    return _record(out, parents, back, "rms_norm")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"bad permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(a) -> Tensor:
    """Transpose of the trailing two axes."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of nothing")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[x.shape for x in xs]} on axis {axis}") from exc
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        ]

    return _record(out, xs, back, "concat")


def slice_(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous span ``[start, stop)`` along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"span [{start}, {stop}) outside extent {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record(a.data[index], (a,), back, "slice")


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, broadcasting leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents: {a.shape} @ {b.shape}") from exc

    def back(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return (da, db)

    return _record(out, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, swap_last(weight))
    return add(y, bias) if bias is not None else y


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def softmax_lastdim(x, additive_mask=None) -> Tensor:
    """Row softmax over the last axis with an optional additive 0 / -inf mask.

    Mask entries at or below half the sentinel count as blocked: they are left
    out of the row max and forced to exactly zero weight.  A row with every
    entry blocked comes back as zeros with a FullyMaskedRowWarning.
    """
    x = as_tensor(x)
    logits = x.data
    blocked = None
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        try:
            shape = np.broadcast_shapes(logits.shape, m.shape)
        except ValueError as exc:
            raise DimensionError(f"mask {m.shape} does not broadcast to {logits.shape}") from exc
        if shape != logits.shape:
            raise DimensionError(f"mask {m.shape} would enlarge scores {logits.shape}")
        ref = m.dtype if m.dtype.kind == "f" else np.float64
        blocked = np.broadcast_to(m <= mask_sentinel(ref) / 2, logits.shape)
        logits = np.where(blocked, -np.inf, logits + np.where(blocked, 0.0, m).astype(logits.dtype))
    row_max = np.max(logits, axis=-1, keepdims=True)
    dead = ~np.isfinite(row_max)
    row_max = np.where(dead, 0.0, row_max)
    e = np.exp(logits - row_max)
    total = e.sum(axis=-1, keepdims=True)
    if np.any(dead):
        warnings.warn("softmax row with every entry masked; returning zeros", FullyMaskedRowWarning, stacklevel=2)
        total = np.where(dead, 1.0, total)
    y = e / total
    if blocked is not None:
        y = np.where(blocked, 0.0, y).astype(x.dtype, copy=False)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record(y, (x,), back, "softmax")


def mse(pred, target) -> Tensor:
    diff = sub(pred, target)
    return mean(square(diff))


# ----------------------------------------------------------------------------
# gradient checking


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x)).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest ``|autodiff - central difference| / max(1, |central difference|)``."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    auto = xt.grad if xt.grad is not None else np.zeros_like(x)
    num = numeric_grad(f, x, h)
    return float(np.max(np.abs(auto - num) / np.maximum(1.0, np.abs(num))))


# ----------------------------------------------------------------------------
# portable tensor files


def save_tensor(path, array) -> None:
    """Write ``PTNSR1``, u32 rank, u32 dims, then a little-endian f32 payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:6] != TENSOR_MAGIC or len(raw) < 10:
        raise ContractError(f"{path}: not a portable tensor file")
    (rank,) = struct.unpack_from("<I", raw, 6)
    offset = 10 + 4 * rank
    if len(raw) < offset:
        raise ContractError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 10)
    count = int(np.prod(dims)) if rank else 1
    if offset + 4 * count != len(raw):
        raise ContractError(f"{path}: payload size does not match header")
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return payload.reshape(dims).astype(np.float32)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
