"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations record a closure that maps the
output gradient to input gradients; ``Tensor.backward`` walks the recorded
graph in reverse topological order and accumulates into ``.grad``.

Training runs in float32. ``precision(np.float64)`` switches the dtype used
for newly created tensors, which is what the finite-difference checks use.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype of newly created tensors."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, frozen feature extraction)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- graph ------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every tensor reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # Intermediate gradients live in a side table so only leaves keep .grad.
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                if not np.all(np.isfinite(node.grad)):
                    raise NumericError(f"non-finite gradient in {node!r}")
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    if data.dtype != _DTYPE:
        data = data.astype(_DTYPE)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward = backward if needs else None
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE))


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    # only trailing-dimension bias style broadcasting is allowed
    sa, sb = a.shape, b.shape
    short, long_ = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    tail = long_[len(long_) - len(short):]
    if all(s == t or s == 1 for s, t in zip(short, tail)):
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return ((a, g), (b, g))

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (
            (a, g * b.data if a.requires_grad else None),
            (b, g * a.data if b.requires_grad else None),
        )

    return _make(a.data * b.data, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return ((x, g * d),)

    return _make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: ((x, g * (1.0 - t * t)),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(orig)),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: ((x, g.transpose(inv)),))


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _is_fancy(index) else _assign_add(full, index, g)
        return ((x, full),)

    return _make(np.ascontiguousarray(x.data[index]), (x,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, index, g):
    full[index] += g


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, splits, axis=ax)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def take_rows(table: Tensor, index: np.ndarray, unique: bool = False) -> Tensor:
    """Gather rows of a 2-D table; ``index`` may have any shape.

    ``unique=True`` promises no row is gathered twice, which lets the backward
    pass scatter with plain assignment.
    """
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    flat = index.reshape(-1)

    def backward(g):
        full = np.zeros_like(table.data)
        rows = g.reshape(-1, table.shape[1])
        if unique:
            full[flat] = rows
        else:
            np.add.at(full, flat, rows)
        return ((table, full),)

    return _make(table.data[index], (table,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape)),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``numpy.matmul``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the leading axes of ``x`` flattened for one GEMM."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [
            (x, (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None),
            (weight, x2.T @ g2 if weight.requires_grad else None),
        ]
        if bias is not None:
            grads.append((bias, g2.sum(axis=0)))
        return grads

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation / probabilities
# ---------------------------------------------------------------------------

LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: last dim {d} vs gain {gain.shape} / bias {bias.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = g.reshape(-1, d)
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return (
            (x, gx),
            (gain, (lead * xhat.reshape(-1, d)).sum(axis=0)),
            (bias, lead.sum(axis=0)),
        )

    return _make(out, (x, gain, bias), backward)


def softmax(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``additive_mask`` (e.g. -inf above the
    diagonal) is added to the logits and is not differentiated."""
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((x, p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _make(p, (x,), backward)


def softmax_cross_entropy(
    logits: Tensor, targets: Sequence[int] | np.ndarray, mask: Sequence[bool] | np.ndarray
) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over rows where ``mask`` is set.

    ``logits`` is [n, v] (leading axes are flattened).
    """
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    n = z.shape[0]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape[0] != n or mask.shape[0] != n:
        raise DimensionError(
            f"cross entropy: {n} rows but {targets.shape[0]} targets / {mask.shape[0]} mask"
        )
    if not mask.any():
        raise ValueError("cross entropy: mask selects no positions; mean is undefined")
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= v):
        raise IndexError(f"cross entropy: target out of range for {v} classes")
    rows = np.nonzero(mask)[0]
    zs = z[rows]
    zmax = zs.max(axis=-1, keepdims=True)
    shifted = zs - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    count = rows.shape[0]
    loss = -logp[np.arange(count), sel].sum() / count
    if not np.isfinite(loss):
        raise NumericError("cross entropy produced a non-finite loss")

    def backward(g):
        full = np.zeros_like(z)
        p = np.exp(logp)
        p[np.arange(count), sel] -= 1.0
        full[rows] = p * (float(g) / count)
        return ((logits, full.reshape(logits.shape)),)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int) -> int:
    if size < k or (size - k) % stride:
        raise ValueError(
            f"conv2d: input size {size} with kernel {k} and stride {stride} "
            "does not give an integral output size"
        )
    return (size - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation without padding.

    ``x`` is [c_in, h, w] or batched [n, c_in, h, w]; ``kernel`` is
    [c_out, c_in, kh, kw].
    """
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or kernel.ndim != 4 or xd.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c_in, h, w = xd.shape
    c_out, _, kh, kw = kernel.shape
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)

    if kh == stride and kw == stride:
        # non-overlapping windows: im2col is a reshape
        cols = (
            xd.reshape(n, c_in, oh, kh, ow, kw)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(n * oh * ow, c_in * kh * kw)
        )
    else:
        win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]  # n, c_in, oh, ow, kh, kw
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c_in * kh * kw)
    wmat = kernel.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grads = [(kernel, (gmat.T @ cols).reshape(kernel.shape))]
        if bias is not None:
            grads.append((bias, gmat.sum(axis=0)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c_in, kh, kw)
            gx = np.zeros_like(xd)
            if kh == stride and kw == stride:
                gx = gcols.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_in, h, w)
            else:
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
            grads.append((x, gx if batched else gx[0]))
        return grads

    return _make(np.ascontiguousarray(out), parents, backward)


# ---------------------------------------------------------------------------
# numerical checking
# ---------------------------------------------------------------------------


def numerical_grad(
    fn: Callable[[], Tensor], param: Tensor, coords: Sequence[int], h: float = 1e-5
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. flat coordinates of ``param``."""
    flat = param.data.reshape(-1)
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = float(fn().data)
        flat[c] = orig - h
        down = float(fn().data)
        flat[c] = orig
        out[k] = (up - down) / (2 * h)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from
    turning finite-difference noise into huge relative errors."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
