"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
Nodes receive a monotonically increasing id at creation, so sorting the
reachable subgraph by id (descending) gives a valid reverse topological
order without keeping a global tape alive between training steps.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_node_ids = itertools.count()

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.node_id = next(_node_ids)
        out._parents = parents
        out._backward = backward_fn
    else:
        out.node_id = None
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to a gradient graph")

    nodes: dict[int, Tensor] = {}
    leaves: dict[int, Tensor] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is None:
            if t.requires_grad:
                leaves[id(t)] = t
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    # row-bias broadcast: [N x D] with [D]
    if len(a.shape) == 2 and len(b.shape) == 1 and a.shape[1] == b.shape[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), bw)


# ---------------------------------------------------------------------------
# shape / indexing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows ``table[ids]``; the backward pass scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows: {idx.tolist()}")
    out = table.data[idx] if idx.size else np.zeros((0,) + table.shape[1:])

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (table,), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop].copy(), (x,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_rows(x: Tensor) -> Tensor:
    """Arithmetic mean over the first axis: [K x D] -> [D]."""
    k = x.shape[0]
    if k == 0:
        raise ValueError("mean_rows over an empty sequence")
    return _make(x.data.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / k, x.shape).copy(),))


def mean_scalars(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    n = len(xs)
    val = np.asarray(sum(float(x.data) for x in xs) / n)
    return _make(val, xs, lambda g: tuple(g / n for _ in xs))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalisation with population variance and affine output."""
    if len(x.shape) != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = gxhat = None
        if x.requires_grad:
            gxhat = g * gd
            gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        ggamma = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation, no bias.

    ``x`` is ``C_in x H x W`` and ``kernels`` is ``C_out x C_in x k x k``.
    """
    if len(x.shape) != 3 or len(kernels.shape) != 4:
        raise DimensionError(f"conv2d: expected 3-d input and 4-d kernels, got {x.shape}, {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernels expect {kc}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    kflat = kernels.data.reshape(c_out, -1)
    out = (cols @ kflat.T).T.reshape(c_out, ho, wo)

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        gk = (g2 @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2.T @ kflat).reshape(ho, wo, c_in, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, i, j].transpose(2, 0, 1)
                    )
        return gx, gk

    return _make(out, (x, kernels), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over positions of ``-log softmax(logits)[target]``."""
    if len(logits.shape) != 2:
        raise DimensionError(f"cross_entropy expects L x V logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size != n:
        raise DimensionError(f"cross_entropy: {n} logit rows but {t.size} targets")
    if n == 0:
        raise ValueError("cross_entropy over zero positions")
    if t.min() < 0 or t.max() >= v:
        raise IndexError(f"target id out of range [0, {v}): {t.tolist()}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, t]).mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Batch mean of squared L2 row distances: ``(1/B) sum_i ||a_i - b_i||^2``."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    if len(a.shape) == 1:
        batch = 1
    else:
        batch = a.shape[0]
    diff = a.data - b.data
    val = np.asarray((diff * diff).sum() / batch)

    def bw(g):
        ga = 2.0 * float(g) / batch * diff
        return ga, -ga

    return _make(val, (a, b), bw)
