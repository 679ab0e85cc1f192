"""Dense-array ops with reverse-mode autodiff on a per-forward dynamic tape.

Backed by NumPy. Only the ops the dialogue model needs are implemented.
float64 is mandatory for gradient checking; float32 is the usual training
dtype. Every op validates that its output is finite and raises
NumericsError otherwise (disable via set_finite_checks for hot loops at
your own risk).
"""
from __future__ import annotations

import math
import threading

import numpy as np

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


class NumericsError(RuntimeError):
    """Numerical failure: non-finite values or an invalid reduction."""


class ShapeError(NumericsError):
    """Operand shapes are incompatible for the requested op."""


_DEFAULT_DTYPE = np.float32
_FINITE_CHECKS = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class no_grad:
    """Context manager: ops built inside record no tape (inference mode).

    The flag is thread-local so concurrent inference (e.g. request handler
    threads) never disturbs a training thread's tape.
    """

    def __enter__(self):
        self._prev = _grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_STATE.enabled = self._prev
        return False


def _assert_finite(arr: np.ndarray, op: str) -> None:
    if not _FINITE_CHECKS:
        return
    # sum() of a finite array stays finite at the magnitudes we use; a single
    # NaN/Inf poisons it, which makes this much cheaper than isfinite().all().
    if not np.isfinite(arr.sum()):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Immutable-by-convention array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
        return out

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf with a stable name and a zero-initialized grad buffer."""

    __slots__ = ("name",)

    def __init__(self, value, name: str, dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._bwd is not None


def _make(data: np.ndarray, parents, bwd, op: str) -> Tensor:
    _assert_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to `shape` after NumPy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        data = a.data + float(b)

        def bwd_scalar(g):
            return ((a, g),)

        return _make(data, (a,), bwd_scalar, "add")
    b = _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(data, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        data = a.data * c

        def bwd_scalar(g):
            return ((a, g * c),)

        return _make(data, (a,), bwd_scalar, "mul")
    b = _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _make(data, (a, b), bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")

    if a.data.ndim > 2 and b.data.ndim == 2:
        # batched activations against a 2-D parameter: one flat GEMM beats
        # NumPy's per-slice batched path on this machine
        lead = a.data.shape[:-1]
        k = a.data.shape[-1]
        flat = np.ascontiguousarray(a.data).reshape(-1, k)
        data = (flat @ b.data).reshape(lead + (b.data.shape[-1],))

        def bwd_flat(g):
            gflat = np.ascontiguousarray(g).reshape(-1, b.data.shape[-1])
            out = []
            if _needs_grad(a):
                out.append((a, (gflat @ b.data.T).reshape(a.data.shape)))
            if _needs_grad(b):
                out.append((b, flat.T @ gflat))
            return out

        return _make(data, (a, b), bwd_flat, "matmul")

    data = a.data @ b.data

    def bwd(g):
        out = []
        if _needs_grad(a):
            ga = g @ b.data.swapaxes(-1, -2)
            out.append((a, _unbroadcast(ga, a.data.shape)))
        if _needs_grad(b):
            gb = a.data.swapaxes(-1, -2) @ g
            out.append((b, _unbroadcast(gb, b.data.shape)))
        return out

    return _make(data, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one tape node. x: (..., k), w: (k, n), b: (n,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise ShapeError(
            f"linear: incompatible shapes {x.data.shape} x {w.data.shape} + {b.data.shape}"
        )
    lead = x.data.shape[:-1]
    k, n = w.data.shape
    flat = np.ascontiguousarray(x.data).reshape(-1, k)
    data = (flat @ w.data + b.data).reshape(lead + (n,))

    def bwd(g):
        gflat = np.ascontiguousarray(g).reshape(-1, n)
        out = []
        if _needs_grad(x):
            out.append((x, (gflat @ w.data.T).reshape(x.data.shape)))
        if _needs_grad(w):
            out.append((w, flat.T @ gflat))
        if _needs_grad(b):
            out.append((b, gflat.sum(axis=0)))
        return out

    return _make(data, (x, w, b), bwd, "linear")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return ((a, g.transpose(inv)),)

    return _make(data, (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g):
        return ((a, g.reshape(orig)),)

    return _make(data, (a,), bwd, "reshape")


def sum_along(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.data.shape)),)

    return _make(data, (a,), bwd, "sum")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.data.shape[0]} rows"
        )
    data = table.data[ids]

    def bwd(g):
        rows = table.data.shape[0]
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, table.data.shape[-1])
        if rows <= 1024:
            # one-hot GEMM beats np.add.at by a wide margin for small tables
            onehot = np.zeros((rows, flat_ids.size), dtype=g.dtype)
            onehot[flat_ids, np.arange(flat_ids.size)] = 1.0
            gt = onehot @ flat_g
        else:
            gt = np.zeros_like(table.data)
            np.add.at(gt, flat_ids, flat_g)
        return ((table, gt),)

    return _make(data, (table,), bwd, "embedding")


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = _as_tensor(x)
    xd = x.data
    inner = xd * xd
    inner *= xd
    inner *= GELU_CUBIC
    inner += xd
    inner *= SQRT_2_OVER_PI
    t = np.tanh(inner)
    data = 1.0 + t
    data *= xd
    data *= 0.5

    def bwd(g):
        dinner = xd * xd
        dinner *= 3.0 * GELU_CUBIC
        dinner += 1.0
        dinner *= SQRT_2_OVER_PI
        dx = t * t
        np.subtract(1.0, dx, out=dx)
        dx *= dinner
        dx *= xd
        half = 1.0 + t
        half *= 0.5
        dx *= 0.5
        dx += half
        dx *= g
        return ((x, dx),)

    return _make(data, (x,), bwd, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return ((x, g * data * (1.0 - data)),)

    return _make(data, (x,), bwd, "sigmoid")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) normalization to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return ((x, gx), (gain, ggain), (bias, gbias))

    return _make(data, (x, gain, bias), bwd, "layer_norm")


def softmax_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked positions get exactly 0.

    mask is a boolean array broadcastable to x (True = keep). Every row must
    keep at least one position.
    """
    x = _as_tensor(x)
    if mask is None:
        data = x.data - x.data.max(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        keep = np.broadcast_to(mask, x.data.shape)
        if not keep.any(axis=-1).all():
            raise NumericsError("softmax_masked: a row is fully masked")
        data = np.where(keep, x.data, -np.inf)
        data -= data.max(axis=-1, keepdims=True)
    # exp(-inf) underflows to exactly 0, so masked positions stay exactly 0
    with np.errstate(invalid="ignore"):
        np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return ((x, data * (g - dot)),)

    return _make(data, (x,), bwd, "softmax_masked")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean negative log softmax probability of targets, over non-ignored rows."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy: expected logits (n, V) with n targets, "
            f"got {logits.data.shape} and {targets.shape}"
        )
    n, v = logits.data.shape
    if ignore_index is None:
        kept = np.ones(n, dtype=bool)
    else:
        kept = targets != ignore_index
    if not kept.any():
        raise NumericsError("cross_entropy: every position is ignored")
    if targets[kept].min() < 0 or targets[kept].max() >= v:
        raise ShapeError(f"cross_entropy: target outside vocabulary of size {v}")

    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    logp = logits.data - lse
    idx = np.where(kept, targets, 0)
    picked = logp[np.arange(n), idx]
    n_kept = int(kept.sum())
    data = np.asarray(-(picked * kept).sum() / n_kept, dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), idx] -= 1.0
        p *= (kept / n_kept)[:, None]
        return ((logits, g * p),)

    return _make(data, (logits,), bwd, "cross_entropy")


def binary_cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE of sigmoid(logits) against {0,1} labels, numerically stable."""
    labels = np.asarray(labels, dtype=logits.data.dtype)
    z = logits.data
    data = np.asarray(
        (np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))).mean(),
        dtype=z.dtype,
    )
    n = z.size

    def bwd(g):
        p = 1.0 / (1.0 + np.exp(-z))
        return ((logits, g * (p - labels) / n),)

    return _make(data, (logits,), bwd, "bce_with_logits")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls keep accumulating until grads are zeroed.
    """
    if loss.data.size != 1:
        raise NumericsError(f"backward: loss must be a scalar, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is not None:
            for parent, pg in node._bwd(g):
                if not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
