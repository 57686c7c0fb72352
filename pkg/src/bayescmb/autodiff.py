"""Small reverse-mode autodiff over float64 numpy arrays.

Every primitive creates a node carrying a monotonically increasing sequence
number.  ``backward`` collects the nodes reachable from the loss into a
:class:`Tape` sorted by that number and runs their backward closures in
exact reverse recording order.

Shapes are never broadcast implicitly: elementwise binary ops require equal
shapes, per-channel scaling goes through :func:`affine`, and scalars must be
widened with :func:`expand`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from . import graph as _graph

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_counter)
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad, name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _same_shape(op: str, *ts: Tensor):
    s0 = ts[0].shape
    for t in ts[1:]:
        if t.shape != s0:
            raise ValueError(f"{op}: shape mismatch {s0} vs {t.shape}")


# ---------------------------------------------------------------------------
# tape / backward


class Tape:
    """Nodes reachable from a loss, ordered by recording sequence."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = sorted(nodes, key=lambda t: t._seq)

    def __len__(self):
        return len(self.nodes)

    def reverse(self):
        return reversed(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        stack = [out]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        return cls(nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf.

    Gradients add to existing ``.grad`` buffers, so calling this twice
    without zeroing doubles every gradient.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in tape.reverse():
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    return _record(np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record(np.mean(a.data), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def expand(a, shape) -> Tensor:
    """Broadcast a scalar (or size-1) tensor to ``shape`` explicitly."""
    a = _as_tensor(a)
    if a.data.size != 1:
        raise ValueError(f"expand: only size-1 tensors can be expanded, got {a.shape}")
    src = a.shape
    return _record(np.full(shape, float(a.data.reshape(()))), (a,),
                   lambda g: (np.reshape(np.sum(g), src),), "expand")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(s)) if i != axis % len(s)):
            raise ValueError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 3 or not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for shape {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop].copy(), (x,), bw, "slice")


def affine(x, scale=None, shift=None) -> Tensor:
    """Per-channel ``x * scale + shift`` on a ``(B, C, N)`` tensor.

    ``scale``/``shift`` have shape ``(C,)`` or ``(B, C)``; either may be None.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"affine: expected (B, C, N), got {x.shape}")
    B, C, _ = x.shape
    parents = [x]

    def _expand(t, what):
        if t.shape == (C,):
            return t.data[None, :, None]
        if t.shape == (B, C):
            return t.data[:, :, None]
        raise ValueError(f"affine: {what} shape {t.shape} incompatible with {x.shape}")

    out = x.data
    sc = sh = None
    if scale is not None:
        scale = _as_tensor(scale)
        sc = _expand(scale, "scale")
        out = out * sc
        parents.append(scale)
    if shift is not None:
        shift = _as_tensor(shift)
        sh = _expand(shift, "shift")
        out = out + sh
        parents.append(shift)
    xd = x.data

    def bw(g):
        grads = [g * sc if sc is not None else g]
        if scale is not None:
            gs = np.sum(g * xd, axis=2)
            grads.append(gs if scale.shape == (B, C) else gs.sum(axis=0))
        if shift is not None:
            gb = np.sum(g, axis=2)
            grads.append(gb if shift.shape == (B, C) else gb.sum(axis=0))
        return tuple(grads)

    return _record(out, parents, bw, "affine")


# ---------------------------------------------------------------------------
# sparse graph ops


def laplacian_apply(x, op: "_graph.LaplacianOperator") -> Tensor:
    """Apply a (symmetric) Laplacian along the pixel axis."""
    x = _as_tensor(x)
    if x.shape[-1] != op.n:
        raise ValueError(f"laplacian_apply: {x.shape[-1]} pixels, operator has {op.n}")
    return _record(op.matvec(x.data), (x,), lambda g: (op.matvec(g),), "laplacian")


def cheb_basis(x, Lhat: "_graph.LaplacianOperator", K: int) -> Tensor:
    """``(B, C, N) -> (K+1, B, C, N)`` stack of ``T_k(Lhat) x``."""
    x = _as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != Lhat.n:
        raise ValueError(f"cheb_basis: shape {x.shape} incompatible with {Lhat.n} pixels")
    B, C, N = x.shape
    basis = _graph.cheb_basis(Lhat, x.data.reshape(B * C, N), K).reshape(K + 1, B, C, N)

    def bw(g):
        return (_graph.cheb_adjoint(Lhat, g.reshape(K + 1, B * C, N)).reshape(B, C, N),)

    return _record(basis, (x,), bw, "cheb_basis")


def channel_mix(basis, theta) -> Tensor:
    """``out[b, o, n] = sum_{k, c} theta[k, c, o] * basis[k, b, c, n]``."""
    basis, theta = _as_tensor(basis), _as_tensor(theta)
    if basis.ndim != 4 or theta.ndim != 3 or basis.shape[0] != theta.shape[0] \
            or basis.shape[2] != theta.shape[1]:
        raise ValueError(f"channel_mix: basis {basis.shape} incompatible with theta {theta.shape}")
    X, W = basis.data, theta.data
    out = np.tensordot(W, X, axes=([0, 1], [0, 2])).transpose(1, 0, 2)

    def bw(g):
        gW = np.tensordot(X, g, axes=([1, 3], [0, 2]))  # (k, c, o)
        gX = np.tensordot(W, g, axes=([2], [1])).transpose(0, 2, 1, 3)  # (k, b, c, n)
        return (gX, gW)

    return _record(np.ascontiguousarray(out), (basis, theta), bw, "channel_mix")


# ---------------------------------------------------------------------------
# pixel gathers


def gather_pixels(x, index) -> Tensor:
    """``out[..., j] = x[..., index[..., j]]``; backward scatter-adds."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape
    if index.ndim == 1:
        out = x.data[..., index]
    else:
        out = np.take_along_axis(x.data, index, axis=-1)

    def bw(g):
        full = np.zeros(shape)
        if index.ndim == 1:
            np.add.at(full, (Ellipsis, index), g)
        else:
            flat = full.reshape(-1, shape[-1])
            rows = np.repeat(np.arange(flat.shape[0]), index.shape[-1])
            np.add.at(flat, (rows, index.reshape(-1)), g.reshape(-1))
        return (full,)

    return _record(out, (x,), bw, "gather")


def max_pool4(x):
    """Max over nested children blocks ``4p..4p+3``.

    Returns ``(pooled, argmax)``; ties resolve to the lowest child.
    """
    x = _as_tensor(x)
    if x.ndim != 3 or x.shape[-1] % 4 != 0:
        raise ValueError(f"max_pool4: pixel axis must be divisible by 4, got {x.shape}")
    B, C, N = x.shape
    blocks = x.data.reshape(B, C, N // 4, 4)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros((B, C, N // 4, 4))
        np.put_along_axis(full, arg[..., None], g[..., None], axis=-1)
        return (full.reshape(B, C, N),)

    return _record(out, (x,), bw, "max_pool4"), arg


def upsample4(x) -> Tensor:
    """Copy each parent value into its 4 nested children."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"upsample4: expected (B, C, N), got {x.shape}")
    B, C, N = x.shape
    out = np.repeat(x.data, 4, axis=-1)
    return _record(out, (x,), lambda g: (g.reshape(B, C, N, 4).sum(axis=-1),), "upsample4")


# ---------------------------------------------------------------------------
# normalization


def batch_norm_train(x, gamma, beta, eps: float):
    """Batch norm with statistics over batch and pixels jointly.

    Returns ``(out, batch_mean, batch_var)`` where the statistics are plain
    arrays (biased variance).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 3:
        raise ValueError(f"batch_norm: expected (B, C, N), got {x.shape}")
    B, C, N = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError("batch_norm: gamma/beta must have shape (C,)")
    m = B * N
    mu = x.data.mean(axis=(0, 2))
    xc = x.data - mu[None, :, None]
    var = (xc * xc).mean(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]
    gd = gamma.data

    def bw(g):
        dbeta = g.sum(axis=(0, 2))
        dgamma = (g * xhat).sum(axis=(0, 2))
        dxhat = g * gd[None, :, None]
        dx = (inv[None, :, None] / m) * (
            m * dxhat - dxhat.sum(axis=(0, 2))[None, :, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
        )
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bw, "batch_norm"), mu, var


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``fn`` maps a tensor to a scalar tensor.  The error per component is
    ``|g - fd| / max(|g|, |fd|, 1e-12)``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    backward(fn(x))
    analytic = np.zeros_like(x0) if x.grad is None else x.grad
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(Tensor(x0.copy())).data)
        flat[i] = orig - eps
        fm = float(fn(Tensor(x0.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
