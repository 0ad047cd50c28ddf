"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the operations the context model needs are provided. A node records its
parents and a closure that pushes its output gradient to them; nothing is
recorded when no input requires a gradient, so inference builds no graph.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed=None):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents and node is not self:
                    node.grad = None  # interior gradients are dead once pushed


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), back)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), back)


def scale(a, c: float):
    def back(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), back)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, gb)

    return _node(a.data @ b.data, (a, b), back)


def reshape(a, shape):
    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), back)


def transpose(a, axes):
    inv = np.argsort(axes)

    def back(g):
        _accumulate(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), back)


def concat(ts, axis=-1):
    sizes = [t.data.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        for t, part in zip(ts, np.split(g, cuts, axis=axis)):
            _accumulate(t, part)

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def sum_last(a, keepdims=True):
    def back(g):
        _accumulate(a, np.broadcast_to(g if keepdims else g[..., None], a.data.shape))

    return _node(a.data.sum(axis=-1, keepdims=keepdims), (a,), back)


def where(cond, a, b):
    """``cond`` is a constant boolean array; gradients go to the chosen side."""
    a, b = _wrap(a), _wrap(b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.where(cond, g, 0.0))
        if b.requires_grad:
            _accumulate(b, np.where(cond, 0.0, g))

    return _node(np.where(cond, a.data, b.data), (a, b), back)


def embedding(table, idx):
    idx = np.asarray(idx)

    def back(g):
        if table.requires_grad:
            d = table.data.shape[1]
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
            _accumulate(table, gt)

    return _node(table.data[idx], (table,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            d = xhat.shape[-1]
            _accumulate(x, inv / d * (d * gx - gx.sum(-1, keepdims=True)
                                      - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), back)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation; smooth, so finite differences behave everywhere."""
    x2 = x.data * x.data
    th = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(x, g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du))

    return _node(0.5 * x.data * (1.0 + th), (x,), back)


def masked_softmax(x, allow):
    """Softmax over the last axis; disallowed entries get exactly zero weight.
    Every row must allow at least one entry."""
    s = np.where(allow, x.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        _accumulate(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (x,), back)


def log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, weights):
    """Weighted mean negative log-likelihood (nats). ``targets`` index the last
    axis of ``logits``; rows with weight 0 contribute nothing."""
    logp = log_softmax_np(logits.data)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    t = np.asarray(targets)
    nll = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    value = float((nll * w).sum() / total)

    def back(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], axis=-1) - 1.0, axis=-1)
        _accumulate(logits, g * grad * (w / total)[..., None])

    return _node(np.asarray(value), (logits,), back)
