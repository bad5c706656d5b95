"""Dense tensors with reverse-mode differentiation.

The op set is closed and enumerated in ``OP_SET``; every op there has a
forward rule, a backward rule, and a finite-difference test.  Adding an
op means adding all three.  Forward values are checked for NaN/Inf so a
numeric fault surfaces at the op that produced it instead of three
modules later.

Precision is a process-global switch: tests run at float64 (finite
differences are meaningless at float32), training may drop to float32
for speed.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericFault

_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True
_GRAD_ENABLED = True

# The closed operation set. conv2d carries 2D convolution, maxpool2d the
# 2D max-pool, layernorm the layer normalization of the contract; scale
# is multiplication by a python scalar; gather_rows indexes rows of an
# embedding table; reshape/transpose/clip are the structural and
# clamping ops the model graph needs (enumerated here so they fall under
# the same gradient-test rule as everything else).
OP_SET = (
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "softmax",
    "log",
    "exp",
    "relu",
    "sigmoid",
    "mean",
    "sum",
    "concat",
    "conv2d",
    "maxpool2d",
    "layernorm",
    "reshape",
    "transpose",
    "gather_rows",
    "clip",
)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the process-global dtype."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / detached phases)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericFault(f"non-finite value produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense nd-array plus an optional slot in the backward graph.

    ``grad`` accumulates additively across backward passes; zeroing is
    explicit (the optimizer clears it after each step).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        _ensure_finite(self.data, _op)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = _op

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _ensure_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"expected a scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        return out

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; grads accumulate with +=."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no graph attached")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g

    # -- elementwise / arithmetic ops ----------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        data = self.data + other.data
        a, b = self, other

        def backward(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

        return Tensor._from_op(data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        data = self.data - other.data
        a, b = self, other

        def backward(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

        return Tensor._from_op(data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        other = self._coerce(other)
        data = self.data * other.data
        a, b = self, other

        def backward(g):
            return (
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            )

        return Tensor._from_op(data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, c: float) -> "Tensor":
        c = float(c)
        a = self

        def backward(g):
            return ((a, g * c),)

        return Tensor._from_op(self.data * c, (a,), backward, "scale")

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ContractError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ContractError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
        data = np.matmul(a.data, b.data)

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

        return Tensor._from_op(data, (a, b), backward, "matmul")

    def log(self) -> "Tensor":
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(a.data)

        def backward(g):
            return ((a, g / a.data),)

        return Tensor._from_op(data, (a,), backward, "log")

    def exp(self) -> "Tensor":
        a = self
        data = np.exp(a.data)

        def backward(g):
            return ((a, g * data),)

        return Tensor._from_op(data, (a,), backward, "exp")

    def relu(self) -> "Tensor":
        a = self
        data = np.maximum(a.data, 0.0)

        def backward(g):
            return ((a, g * (a.data > 0)),)

        return Tensor._from_op(data, (a,), backward, "relu")

    def sigmoid(self) -> "Tensor":
        a = self
        # Split by sign to avoid overflow in exp.
        data = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(a.data))),
            np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
        )

        def backward(g):
            return ((a, g * data * (1.0 - data)),)

        return Tensor._from_op(data, (a,), backward, "sigmoid")

    def softmax(self) -> "Tensor":
        """Row softmax over the last axis."""
        a = self
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            inner = (g * data).sum(axis=-1, keepdims=True)
            return ((a, (g - inner) * data),)

        return Tensor._from_op(data, (a,), backward, "softmax")

    def clip(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        if lo is None and hi is None:
            raise ContractError("clip needs at least one bound")
        a = self
        data = np.clip(a.data, lo, hi)
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data >= lo
        if hi is not None:
            inside &= a.data <= hi

        def backward(g):
            return ((a, g * inside),)

        return Tensor._from_op(data, (a,), backward, "clip")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, a.shape).copy()),)

        return Tensor._from_op(np.asarray(data), (a,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.mean(axis=axis, keepdims=keepdims)
        count = a.data.size if axis is None else np.prod(
            [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, a.shape).copy() / count),)

        return Tensor._from_op(np.asarray(data), (a,), backward, "mean")

    # -- structural ops ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = a.data.reshape(shape)

        def backward(g):
            return ((a, g.reshape(a.shape)),)

        return Tensor._from_op(data, (a,), backward, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        perm = axes if axes else tuple(reversed(range(a.ndim)))
        data = a.data.transpose(perm)
        inv = np.argsort(perm)

        def backward(g):
            return ((a, g.transpose(inv)),)

        return Tensor._from_op(data, (a,), backward, "transpose")


# -- multi-input and window ops ------------------------------------------------


def concat(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    ts = list(tensors)
    if not ts:
        raise ContractError("concat of zero tensors")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ContractError(
                f"concat shape mismatch: {ts[0].shape} vs {t.shape}"
            )
    data = np.concatenate([t.data for t in ts], axis=-1)
    widths = [t.shape[-1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(
            (t, g[..., offsets[i]: offsets[i + 1]]) for i, t in enumerate(ts)
        )

    return Tensor._from_op(data, ts, backward, "concat")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Index rows of ``table`` (axis 0) by an integer array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"gather_rows needs integer ids, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids.min() if ids.min() < 0 else ids.max()
        raise ContractError(f"id {bad} out of table range [0, {table.shape[0]})")
    a = table
    data = a.data[ids]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, ids, g)
        return ((a, ga),)

    return Tensor._from_op(data, (a,), backward, "gather_rows")


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """2D convolution, stride 1, NHWC input, kernel (kh, kw, cin, cout)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractError(f"conv2d needs NHWC x and 4D kernel, got {x.shape}, {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ContractError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    a, k = x, kernel
    xp = np.pad(a.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else a.data
    b, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho <= 0 or wo <= 0:
        raise ContractError(f"conv2d kernel {kernel.shape} larger than padded input {xp.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # windows: (b, ho, wo, cin, kh, kw) -> columns (b*ho*wo, kh*kw*cin)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * cin)
    k2 = k.data.reshape(kh * kw * cin, cout)
    data = (cols @ k2).reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(b * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kh, kw, cin, cout)
        gcols = (g2 @ k2.T).reshape(b, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:hp - padding, padding:wp - padding, :] if padding else gxp
        return ((a, gx), (k, gk))

    return Tensor._from_op(data, (a, k), backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Max-pool with window == stride == size, NHWC input."""
    if x.ndim != 4:
        raise ContractError(f"maxpool2d needs NHWC input, got {x.shape}")
    b, h, w, c = x.shape
    if h % size or w % size:
        raise ContractError(f"maxpool2d size {size} does not divide input {x.shape}")
    a = x
    ho, wo = h // size, w // size
    win = a.data.reshape(b, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(b, ho, wo, c, size * size)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(b, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        return ((a, gx.reshape(b, h, w, c).copy()),)

    return Tensor._from_op(data, (a,), backward, "maxpool2d")


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance."""
    a = x
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = (a.data - mu) * inv
    n = a.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * data).mean(axis=-1, keepdims=True)
        return ((a, inv * (g - gm - data * gy)),)

    return Tensor._from_op(data, (a,), backward, "layernorm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis (composite of matmul and add)."""
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out
