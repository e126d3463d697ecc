"""Small reverse-mode autodiff layer over float64 numpy arrays.

Feature maps are channels-last (N, H, W, C) so convolutions and attention
reduce to plain GEMMs. Every op builds its output through ``_node`` which
rejects non-finite values and, when gradients are enabled, records a closure
that maps the output gradient to input gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar")
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
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # free graph references as we go
            node._prev = ()
            node._backward = None


def _check_finite(arr: np.ndarray) -> None:
    # a single reduction is cheaper than isfinite().all(); inf/nan propagate into the sum
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteValue("non-finite value in tensor data")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._prev = parents if track else ()
    out._backward = backward if track else None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1
    )
    return g.sum(axis=axes).reshape(shape)


def _check_rhs_broadcast(a: Tensor, b: Tensor) -> None:
    # only the right operand may broadcast (bias add, per-sample channel add)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot combine {a.shape} and {b.shape}") from None
    if shape != a.shape:
        raise ShapeMismatch(f"right operand {b.shape} must broadcast into {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_rhs_broadcast(a, b)
    bs = b.shape
    return _node(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, bs)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_rhs_broadcast(a, b)
    bs = b.shape
    return _node(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, bs)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_rhs_broadcast(a, b)
    ad, bd, bs = a.data, b.data, b.shape
    return _node(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, bs)))


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeMismatch(f"batched matmul needs equal batch dims, got {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., in) @ w (in, out) + b (out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = (flat @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    if b is not None:
        out += b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = flat.T @ g2
        return (gx, gw, g2.sum(axis=0)) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get a
    -inf logit and therefore exactly zero weight. Every row needs at least one
    True entry.
    """
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every entry masked")
        logits = np.where(mask, logits, -np.inf)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _node(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, channels-last.

    x: (N, H, W, Cin); w: (3, 3, Cin, Cout); b: (Cout,).
    """
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeMismatch(f"conv2d input {x.shape} with kernel {w.shape}")
    if stride == 1:
        out, backward = _conv3x3_s1(x.data, w.data)
    elif stride == 2:
        out, backward = _conv3x3_s2(x.data, w.data)
    else:
        raise ValueError("stride must be 1 or 2")
    if b is None:
        return _node(out, (x, w), backward)
    out += b.data

    def backward_b(g):
        gx, gw = backward(g)
        return gx, gw, g.sum(axis=(0, 1, 2))

    return _node(out, (x, w, b), backward_b)


def _conv3x3_s1(xd: np.ndarray, wd: np.ndarray):
    # Output pixel (y, x) in a padded row-major buffer reads input rows at a fixed
    # flat offset per tap, so each tap is one contiguous GEMM with no im2col copy.
    n, h, w_, cin = xd.shape
    cout = wd.shape[3]
    hp, wp = h + 2, w_ + 2
    xp = np.zeros((n, hp, wp, cin), dtype=DTYPE)
    xp[:, 1:-1, 1:-1] = xd
    flat = xp.reshape(-1, cin)
    total = flat.shape[0]
    rows = total - 2 * wp - 2
    offsets = [(dy, dx, dy * wp + dx) for dy in range(3) for dx in range(3)]
    acc = np.empty((total, cout), dtype=DTYPE)
    head = acc[:rows]
    np.matmul(flat[:rows], wd[0, 0], out=head)
    for dy, dx, off in offsets[1:]:
        head += flat[off:off + rows] @ wd[dy, dx]
    out = np.ascontiguousarray(acc.reshape(n, hp, wp, cout)[:, :h, :w_])

    def backward(g):
        gfull = np.zeros((n, hp, wp, cout), dtype=DTYPE)
        gfull[:, :h, :w_] = g
        gflat = gfull.reshape(-1, cout)[:rows]
        gw = np.empty_like(wd)
        gxf = np.zeros((total, cin), dtype=DTYPE)
        for dy, dx, off in offsets:
            gw[dy, dx] = flat[off:off + rows].T @ gflat
            gxf[off:off + rows] += gflat @ wd[dy, dx].T
        gx = np.ascontiguousarray(gxf.reshape(n, hp, wp, cin)[:, 1:-1, 1:-1])
        return gx, gw

    return out, backward


def _conv3x3_s2(xd: np.ndarray, wd: np.ndarray):
    n, h, w_, cin = xd.shape
    cout = wd.shape[3]
    ho, wo = (h + 1) // 2, (w_ + 1) // 2
    xp = np.zeros((n, h + 2, w_ + 2, cin), dtype=DTYPE)
    xp[:, 1:-1, 1:-1] = xd
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]  # n, ho, wo, cin, 3, 3
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, 9 * cin)
    wmat = wd.reshape(9 * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wd.shape)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, 3, 3, cin)
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2] += gcols[:, :, :, dy, dx]
        return np.ascontiguousarray(gxp[:, 1:-1, 1:-1]), gw

    return out, backward


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-6) -> Tensor:
    """Group normalization over (H, W, C/groups) for channels-last input."""
    n, h, w_, c = x.shape
    if c % groups:
        raise ShapeMismatch(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, h * w_, groups, c // groups)
    mean = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(1, 1, groups, c // groups)
    out = (xhat * gd + beta.data.reshape(1, 1, groups, c // groups)).reshape(x.shape)

    def backward(g):
        gg = g.reshape(xhat.shape)
        ggamma = (gg * xhat).sum(axis=(0, 1)).reshape(c)
        gbeta = gg.sum(axis=(0, 1)).reshape(c)
        dxhat = gg * gd
        m1 = dxhat.mean(axis=(1, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(1, 3), keepdims=True)
        gx = (inv * (dxhat - m1 - xhat * m2)).reshape(x.shape)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), backward)


def upsample2x(x: Tensor) -> Tensor:
    n, h, w_, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _node(out, (x,), lambda g: (g.reshape(n, h, 2, w_, 2, c).sum(axis=(2, 4)),))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _node(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError("embedding id out of range")
    return _node(table.data[ids], (table,), backward)


def mean(x: Tensor) -> Tensor:
    shape, size = x.shape, x.data.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / size),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse {a.shape} vs {b.shape}")
    diff = a.data - b.data
    size = diff.size
    loss = np.asarray((diff * diff).sum() / size)

    def backward(g):
        ga = (2.0 * g / size) * diff
        return ga, -ga

    return _node(loss, (a, b), backward)
