"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the transformer are provided.  Every op
checks its output for NaN/Inf and raises :class:`NonFiniteError` instead of
propagating it.  Operations are recorded only while a :class:`Tape` is
active and at least one input requires a gradient, so plain inference runs
without any bookkeeping.

    >>> x = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape():
    ...     loss = x.sum()
    >>> grad(loss, {"x": x})["x"]
    array([1., 1., 1.])
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

__all__ = [
    "Tensor", "Tape", "grad", "TapeError", "NonFiniteError", "ShapeError",
    "add", "sub", "mul", "matmul", "gelu", "layer_norm", "masked_softmax",
    "masked_attention", "reshape", "transpose", "take", "concat",
    "sum", "mean", "var", "mse", "dropout", "numerical_grad", "grad_rel_error",
]


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended in creation order, which is a topological order of
    the graph, so backward is a reverse walk.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def _push(self, node: "Tensor") -> None:
        self._index[id(node)] = len(self.nodes)
        self.nodes.append(node)

    def position(self, node: "Tensor") -> int | None:
        return self._index.get(id(node))

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        """Drop recorded nodes; nodes point back at the tape, so this breaks the cycle."""
        self.nodes.clear()
        self._index.clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like.dtype, copy=False)
    return Tensor(arr)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        tape = _ACTIVE_TAPES[-1]
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.tape = tape
        out.name = op
        tape._push(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)

    def backward(g):
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, "gelu", (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be a 2-D weight shared by the batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, "matmul", (a, b), backward)


# ---------------------------------------------------------------- reshaping

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), "transpose", (x,),
                 lambda g: (g.transpose(inverse),))


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {x.shape}")
    src = x.shape

    def backward(g):
        out = np.zeros(src, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (out,)

    return _make(np.take(x.data, index, axis=axis), "take", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), backward)


# --------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axes, keepdims) * (1.0 / count)


def var(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance."""
    centered = x - mean(x, axis, keepdims=True)
    return mean(centered * centered, axis, keepdims)


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred.data)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    return mean(diff * diff)


# ------------------------------------------------------------ normalisation

def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine terms."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = inv_std * (g - gm - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = _make(xhat.astype(xd.dtype, copy=False), "layer_norm", (x,), backward)
    if weight is not None:
        if weight.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm: weight {weight.shape} vs input {x.shape}")
        out = out * weight
    if bias is not None:
        if bias.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm: bias {bias.shape} vs input {x.shape}")
        out = out + bias
    return out


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = allowed).

    Disallowed entries get a -inf logit, so they carry exactly zero weight and
    the remaining weights still sum to one.
    """
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, xd.shape)
        except ValueError:
            raise ShapeError(f"masked_softmax: mask {mask.shape} vs logits {xd.shape}") from None
        if not mask.any(axis=-1).all():
            raise ValueError("empty attention row")
        # additive bias on the small [L, L] mask instead of a full-size where
        bias = np.where(mask, 0.0, -np.inf).astype(xd.dtype)
        z = xd + bias
        z -= z.max(axis=-1, keepdims=True)
    y = np.exp(z, out=z)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return _make(y, "masked_softmax", (x,), backward)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention over the last two axes ``[..., L, dh]``."""
    if q.shape[-1] < 1:
        raise ShapeError("masked_attention: head dimension must be >= 1")
    if k.shape != q.shape[:-2] + k.shape[-2:] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"masked_attention: q {q.shape} vs k {k.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise ShapeError(f"masked_attention: mask {mask.shape} vs q {q.shape}, k {k.shape}")
    nd = k.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = matmul(q, kt) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(masked_softmax(scores, mask), v)


# ----------------------------------------------------------------- backward

def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each named parameter.

    Parameters that did not participate get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise TapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    wanted = {id(p): name for name, p in params.items()}
    out = {name: np.zeros_like(p.data) for name, p in params.items()}
    if id(loss) in wanted:
        out[wanted[id(loss)]] += 1.0
    tape = loss.tape
    if tape is None:
        return out
    end = tape.position(loss)
    if end is None:
        raise TapeError("grad: loss is not on its tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for i in range(end, -1, -1):
        node = tape.nodes[i]
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted and node is not loss:
            out[wanted[id(node)]] += g
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            if parent.tape is None:
                if id(parent) in wanted:
                    out[wanted[id(parent)]] += pg
                continue
            pos = parent.tape.position(parent) if parent.tape is tape else None
            if pos is None or pos >= i:
                raise TapeError("grad: tape cycle detected")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return out


# ---------------------------------------------------- finite differences

def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def parameters(named: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in named}
