"""Minimal dense reverse-mode autodiff engine.

Everything in the model stack is expressed over `Tensor`, a thin wrapper
around a numpy array that records a backward closure per operation.
Training runs in float32; gradient-check oracles rebuild the same graph in
float64 (see `grad_check`).

Additive masks use -1e9 instead of -inf so the forward pass never produces
(-inf) - (-inf) NaNs; after softmax the masked weights underflow to exactly 0.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

MASK_NEG = -1.0e9

_grad_enabled = True
_check_finite = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class MaskError(ValueError):
    """An attention mask row forbids every position."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks():
    """Raise on any non-finite op output inside the block (oracle mode)."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "grad", "trainable", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, trainable=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.trainable = trainable
        self.requires_grad = trainable
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        if self.data.ndim != 0 and self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.data.shape}")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # frozen leaves never hold gradient
        for node in order:
            if not node._parents and not node.trainable:
                node.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, trainable={self.trainable})"


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.trainable = False
    out.op = op
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def parameter(rng, shape, fan_in=None, dtype=np.float32):
    """Trainable weight with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), trainable=True, dtype=dtype)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dims must agree, got {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(out_data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _result(a.data.T.copy(), (a,), backward, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a row vector broadcast over a's rows."""
    if a.data.shape != b.data.shape and b.data.shape != a.data.shape[-1:]:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not align")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            if b.data.shape == a.data.shape:
                b._accumulate(g)
            else:
                b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(out_data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape and b.data.shape != a.data.shape[-1:]:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not align")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            if b.data.shape == a.data.shape:
                b._accumulate(gb)
            else:
                b._accumulate(gb.reshape(-1, gb.shape[-1]).sum(axis=0))

    return _result(out_data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _result(a.data * c, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * keep)

    return _result(a.data * keep, (a,), backward, "relu")


def ssum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward, "ssum")


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax of logits + mask; mask entries are 0 or MASK_NEG.

    Positions at MASK_NEG come out as exactly zero probability. A row with
    no open position is an upstream bug and is rejected.
    """
    mask = np.asarray(mask)
    if mask.shape != logits.data.shape:
        raise ShapeError(
            f"masked_softmax: mask shape {mask.shape} != logits shape {logits.data.shape}")
    if not np.all((mask == 0).any(axis=-1)):
        bad = int(np.argmin((mask == 0).any(axis=-1)))
        raise MaskError(f"masked_softmax: row {bad} has every position masked")
    z = logits.data + mask.astype(logits.data.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            logits._accumulate(p * (g - dot))

    return _result(p, (logits,), backward, "masked_softmax")


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, np.zeros(logits.data.shape, dtype=logits.data.dtype))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            n = x.data.shape[-1]
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx.astype(x.data.dtype))

    return _result(out_data, (x, gain, bias), backward, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range for table of {table.data.shape[0]} rows")
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _result(out_data, (table,), backward, "embedding_lookup")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over token positions (rows of logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape} vs targets {targets.shape}")
    n = targets.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), targets]
    out_data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(n), targets] -= 1.0
            logits._accumulate((g / n) * p)

    return _result(out_data, (logits,), backward, "cross_entropy")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * keep)

    return _result(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update on raw arrays; t is the 1-based step index."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a list of trainable Tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, leaves, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the given leaf Tensors to a scalar Tensor; leaves must be
    float64 and trainable. The error per entry is
    |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ValueError("grad_check: leaves must be float64")
        leaf.grad = None
    with finite_checks():
        out = f(*leaves)
    out.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    worst = 0.0
    with no_grad():
        for leaf, ana in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(*leaves).data)
                flat[i] = orig - eps
                lo = float(f(*leaves).data)
                flat[i] = orig
                num = (hi - lo) / (2.0 * eps)
                a = ana.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
