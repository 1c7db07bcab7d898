"""Tape-based reverse-mode automatic differentiation on numpy arrays.

Operations only record onto a :class:`Tape` while one is active, so
inference runs without graph overhead::

    with Tape() as tape:
        loss = mse_loss(model(x), y)
    tape.backward(loss)

All tensors are real.  Complex spectral quantities are carried as real
arrays with the real and imaginary parts stacked on a leading axis of
size 2, and gradients follow the real-composite convention.
"""
from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from sphemu.errors import InvalidArgumentError, InvalidDataError

DEBUG = bool(os.environ.get("SPHEMU_DEBUG"))

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self) -> None:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate, so call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.out) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key not in produced:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out_data)):
        raise InvalidDataError("non-finite value produced in forward pass")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(Node(out, tuple(parents), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def grad(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _record(y, (x,), grad)


def reduce_sum(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def concat_channels(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis
        ):
            raise InvalidArgumentError(f"cannot concatenate shapes {ref} and {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# -- layers ---------------------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Channel mixing ``y[b, o, ...] = sum_c W[o, c] x[b, c, ...] + b[o]``."""
    if x.data.ndim < 2 or x.shape[1] != weight.shape[1]:
        raise InvalidArgumentError(
            f"linear: input channels {x.shape[1:2]} do not match weight {weight.shape}"
        )
    lead, rest = x.shape[:2], x.shape[2:]
    xr = x.data.reshape(lead[0], lead[1], -1)
    y = np.matmul(weight.data, xr)
    if bias is not None:
        y = y + bias.data[None, :, None]
    out_shape = (lead[0], weight.shape[0]) + rest

    def grad(g):
        gr = g.reshape(lead[0], weight.shape[0], -1)
        gx = np.matmul(weight.data.T, gr).reshape(x.shape)
        gw = np.tensordot(gr, xr, axes=([0, 2], [0, 2]))
        if bias is None:
            return gx, gw
        return gx, gw, gr.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(y.reshape(out_shape), parents, grad)


def pointwise_mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                  rate: float = 0.0, rngs=None) -> Tensor:
    """Two pointwise layers with GELU and dropout on the hidden activations."""
    h = gelu(linear(x, w1, b1))
    h = dropout(h, rate, rngs)
    return linear(h, w2, b2)


def instance_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each (batch, channel) map over its last two axes."""
    mu = x.data.mean(axis=(-2, -1), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(-2, -1), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def grad(g):
        gm = g.mean(axis=(-2, -1), keepdims=True)
        gy = (g * y).mean(axis=(-2, -1), keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (x,), grad)


def scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * scale + shift`` with ``(B, C)`` modulation broadcast over space."""
    if scale.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise InvalidArgumentError(
            f"scale/shift shapes {scale.shape}, {shift.shape} do not match {x.shape[:2]}"
        )
    s = scale.data[:, :, None, None]
    y = x.data * s + shift.data[:, :, None, None]

    def grad(g):
        return g * s, (g * x.data).sum(axis=(-2, -1)), g.sum(axis=(-2, -1))

    return _record(y, (x, scale, shift), grad)


def affine_channels(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine map with ``(C,)`` parameters."""
    gs = gamma.data[None, :, None, None]
    y = x.data * gs + beta.data[None, :, None, None]

    def grad(g):
        return g * gs, (g * x.data).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record(y, (x, gamma, beta), grad)


# -- spectral -------------------------------------------------------------
def sht_analysis(x: Tensor, sht) -> Tensor:
    """Grid ``(B, C, I, J)`` to the spectral pair ``(2, M, B, C, L)``."""
    return _record(sht.analysis_pair(x.data), (x,), lambda g: (sht.analysis_pair_adjoint(g),))


def sht_synthesis(c: Tensor, sht) -> Tensor:
    return _record(sht.synthesis_pair(c.data), (c,), lambda g: (sht.synthesis_pair_adjoint(g),))


def complex_spectral_multiply(c: Tensor, w_re: Tensor, w_im: Tensor) -> Tensor:
    """Per-degree complex channel mixing ``out_l = W_l c_l``, shared across orders.

    ``c`` is a spectral pair ``(2, M, B, C, L)``; weights are ``(L, O, C)``
    real and imaginary parts.  Output ``(2, M, B, O, L)``.
    """
    _, nm, nb, nc, nl = c.shape
    if w_re.shape != w_im.shape or w_re.shape[0] != nl or w_re.shape[2] != nc:
        raise InvalidArgumentError(f"spectral weights {w_re.shape} incompatible with input {c.shape}")
    no = w_re.shape[1]
    # (2, L, C, M*B) so each degree is one matmul
    cl = np.ascontiguousarray(c.data.transpose(0, 4, 3, 1, 2)).reshape(2, nl, nc, nm * nb)
    cr, ci = cl[0], cl[1]
    wr, wi = w_re.data, w_im.data
    out = np.empty((2, nl, no, nm * nb))
    np.subtract(np.matmul(wr, cr), np.matmul(wi, ci), out=out[0])
    np.add(np.matmul(wr, ci), np.matmul(wi, cr), out=out[1])
    out = np.ascontiguousarray(out.reshape(2, nl, no, nm, nb).transpose(0, 3, 4, 2, 1))

    def grad(g):
        gl = np.ascontiguousarray(g.transpose(0, 4, 3, 1, 2)).reshape(2, nl, no, nm * nb)
        gr, gi = gl[0], gl[1]
        wrt, wit = wr.transpose(0, 2, 1), wi.transpose(0, 2, 1)
        gc = np.empty((2, nl, nc, nm * nb))
        np.add(np.matmul(wrt, gr), np.matmul(wit, gi), out=gc[0])
        np.subtract(np.matmul(wrt, gi), np.matmul(wit, gr), out=gc[1])
        gc = np.ascontiguousarray(gc.reshape(2, nl, nc, nm, nb).transpose(0, 3, 4, 2, 1))
        crt, cit = cr.transpose(0, 2, 1), ci.transpose(0, 2, 1)
        gwr = np.matmul(gr, crt) + np.matmul(gi, cit)
        gwi = np.matmul(gi, crt) - np.matmul(gr, cit)
        return gc, gwr, gwi

    return _record(out, (c, w_re, w_im), grad)


# -- stochastic -----------------------------------------------------------
def _per_sample(rngs, nb: int):
    if isinstance(rngs, np.random.Generator):
        return [rngs] * nb
    rngs = list(rngs)
    if len(rngs) != nb:
        raise InvalidArgumentError(f"need one generator per batch row ({nb}), got {len(rngs)}")
    return rngs


def dropout(x: Tensor, rate: float, rngs=None) -> Tensor:
    """Inverted dropout; each batch row draws its mask from its own generator."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    gens = _per_sample(rngs, x.shape[0])
    keep = np.stack([g.random(x.shape[1:]) >= rate for g in gens])
    mask = keep / (1.0 - rate)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def drop_path(branch: Tensor, rate: float, rngs=None) -> Tensor:
    """Zero the whole residual branch of a batch row with probability ``rate``.

    Survivors are not rescaled, so a fired row leaves its block an exact
    identity and an unfired row is unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"drop_path rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return branch
    gens = _per_sample(rngs, branch.shape[0])
    keep = np.array([g.random() >= rate for g in gens], dtype=np.float64)
    mask = keep.reshape((-1,) + (1,) * (branch.data.ndim - 1))
    return _record(branch.data * mask, (branch,), lambda g: (g * mask,))


# -- losses ---------------------------------------------------------------
def _check_pair(pred: Tensor, target) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise InvalidArgumentError(f"prediction {pred.shape} and target {t.shape} differ")
    return t


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at ties is 0."""
    t = _check_pair(pred, target)
    d = pred.data - t
    n = d.size
    return _record(np.asarray(np.abs(d).mean()), (pred,), lambda g: (g * np.sign(d) / n,))


def mse_loss(pred: Tensor, target) -> Tensor:
    t = _check_pair(pred, target)
    d = pred.data - t
    n = d.size
    return _record(np.asarray((d * d).mean()), (pred,), lambda g: (g * 2.0 * d / n,))


def relative_l2_loss(pred: Tensor, target) -> Tensor:
    """``||pred - target|| / ||target||`` per (batch, channel) map, then averaged.

    Maps whose target norm is zero use the absolute norm instead.
    """
    t = _check_pair(pred, target)
    d = pred.data - t
    axes = tuple(range(2, d.ndim))
    dn = np.sqrt((d * d).sum(axis=axes, keepdims=True))
    tn = np.sqrt((t * t).sum(axis=axes, keepdims=True))
    denom = np.where(tn > 0.0, tn, 1.0)
    n = dn.size
    value = (dn / denom).mean()

    def grad(g):
        safe = np.where(dn > 0.0, dn, 1.0)
        return (g * np.where(dn > 0.0, d / (safe * denom), 0.0) / n,)

    return _record(np.asarray(value), (pred,), grad)
