"""Minimal reverse-mode autodiff on numpy arrays.

Every operation the network needs is a primitive with a hand-written
backward closure; `backward()` walks the tape in reverse topological
order. Gradients accumulate in float64 when the data is float64, which is
what the finite-difference verification runs in.
"""

import numpy as np
from scipy.special import erf

# Test hook: when True, the softmax backward uses a deliberately wrong
# sign, so gradient checking must detect the corruption.
SOFTMAX_BACKWARD_SIGN_BUG = False


class Tensor:
    __slots__ = ("data", "grad", "parents", "bw", "requires_grad")

    def __init__(self, data, parents=(), bw=None, requires_grad=True):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.bw = bw
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.bw is not None and node.grad is not None:
                node.bw(node.grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse a numpy broadcast)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))
    out.bw = bw
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(-_unbroadcast(g, b.data.shape))
    out.bw = bw
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))
    out.bw = bw
    return out


def scale(a, c):
    out = Tensor(a.data * c, (a,))
    out.bw = lambda g: a.accumulate(g * c)
    return out


def linear(x, w, b=None):
    """(..., in) @ (in, out) + (out,)."""
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, parents)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(np.tensordot(x.data, g, axes=(range(x.data.ndim - 1),
                                                       range(g.ndim - 1))))
        if b is not None and b.requires_grad:
            b.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
    out.bw = bw
    return out


def bmm(a, b):
    """Stacked matmul with identical leading dims."""
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate(np.swapaxes(a.data, -1, -2) @ g)
    out.bw = bw
    return out


def transpose(a, axes):
    out = Tensor(a.data.transpose(axes), (a,))
    inv = np.argsort(axes)
    out.bw = lambda g: a.accumulate(g.transpose(inv))
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), (a,))
    out.bw = lambda g: a.accumulate(g.reshape(a.data.shape))
    return out


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = Tensor(x * cdf, (a,))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        a.accumulate(g * (cdf + x * pdf))
    out.bw = bw
    return out


def softmax(a):
    """Softmax over the last axis, with max subtraction for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (a,))

    def bw(g):
        s = (g * y).sum(axis=-1, keepdims=True)
        if SOFTMAX_BACKWARD_SIGN_BUG:
            a.accumulate((g + s) * y)
        else:
            a.accumulate((g - s) * y)
    out.bw = bw
    return out


def layer_norm(a, gamma, beta, eps=1e-5):
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, (a, gamma, beta))
    d = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            a.accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
    out.bw = bw
    return out


def dropout(a, p, rng, training):
    if not training or p <= 0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep, (a,))
    out.bw = lambda g: a.accumulate(g * keep)
    return out


def conv1d_same(x, w, b):
    """x (B, Cin, L), w (Cout, Cin, K), b (Cout,); stride 1, same padding."""
    k = w.data.shape[2]
    pl, pr = (k - 1) // 2, k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # B,Cin,L,K
    y = np.einsum("bilk,oik->bol", cols, w.data, optimize=True) + b.data[:, None]
    out = Tensor(y, (x, w, b))
    L = x.data.shape[2]

    def bw(g):
        if w.requires_grad:
            w.accumulate(np.einsum("bol,bilk->oik", g, cols, optimize=True))
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                gxp[:, :, kk:kk + L] += np.einsum(
                    "bol,oi->bil", g, w.data[:, :, kk], optimize=True)
            x.accumulate(gxp[:, :, pl:pl + L])
    out.bw = bw
    return out


def take_rows(x, idx):
    """Gather rows: x (B, N, d), idx (B, n) -> (B, n, d)."""
    batch = np.arange(x.data.shape[0])[:, None]
    out = Tensor(x.data[batch, idx], (x,))

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, idx), g)
        x.accumulate(gx)
    out.bw = bw
    return out


def take_param_rows(p, idx):
    """Gather parameter rows: p (N, d), idx (..., n) -> (..., n, d)."""
    out = Tensor(p.data[idx], (p,))

    def bw(g):
        gp = np.zeros_like(p.data)
        np.add.at(gp, idx.ravel(), g.reshape(-1, p.data.shape[-1]))
        p.accumulate(gp)
    out.bw = bw
    return out


def scatter_rows(n_total, parts):
    """Reassemble a (B, n_total, d) sequence from (tokens, idx) parts,
    where each tokens is (B, n_i, d) and idx is (B, n_i). Indices must
    partition 0..n_total-1 per batch element."""
    b, _, d = parts[0][0].data.shape
    y = np.empty((b, n_total, d), dtype=parts[0][0].data.dtype)
    batch = np.arange(b)[:, None]
    for tokens, idx in parts:
        y[batch, idx] = tokens.data
    out = Tensor(y, tuple(t for t, _ in parts))

    def bw(g):
        for tokens, idx in parts:
            if tokens.requires_grad:
                tokens.accumulate(g[batch, idx])
    out.bw = bw
    return out


def ssum(a):
    out = Tensor(np.asarray(a.data.sum()), (a,))
    out.bw = lambda g: a.accumulate(np.broadcast_to(g, a.data.shape).copy())
    return out
