"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray and, while gradients are enabled, records how it
was produced. backward() on a scalar walks the recorded graph once in
reverse topological order and accumulates gradients on every reachable
tensor with requires_grad set. Everything is float64; there is no
broadcasting beyond numpy's own rules, and matmul is strictly 2-D.

Rollouts run under no_grad(): the same code paths execute the same numpy
operations in the same order (so values match the recording path bitwise),
they just skip building the graph.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        """Reverse-mode sweep from this scalar; frees the graph as it goes."""
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior node: release graph edges and gradient buffer
                node._parents = ()
                node._backward = None
                node.grad = None
        # gradients survive only on leaves (parameters and constants)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + o.data)
        if _grad_enabled and (self.requires_grad or o.requires_grad):
            out.requires_grad = True
            out._parents = (self, o)

            def bw(g, a=self, b=o):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))

            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            out._backward = lambda g, a=self: a._accumulate(-g)
        return out

    def __sub__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data - o.data)
        if _grad_enabled and (self.requires_grad or o.requires_grad):
            out.requires_grad = True
            out._parents = (self, o)

            def bw(g, a=self, b=o):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.data.shape))

            out._backward = bw
        return out

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * o.data)
        if _grad_enabled and (self.requires_grad or o.requires_grad):
            out.requires_grad = True
            out._parents = (self, o)

            def bw(g, a=self, b=o):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))

            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data / o.data)
        if _grad_enabled and (self.requires_grad or o.requires_grad):
            out.requires_grad = True
            out._parents = (self, o)

            def bw(g, a=self, b=o):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

            out._backward = bw
        return out

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise UsageError("only constant exponents are supported")
        out = Tensor(self.data ** exponent)
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            out._backward = lambda g, a=self, e=exponent: a._accumulate(
                g * e * a.data ** (e - 1)
            )
        return out

    def __matmul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim != 2 or o.data.ndim != 2:
            raise ShapeError("matmul requires 2-D tensors")
        if self.data.shape[1] != o.data.shape[0]:
            raise ShapeError(
                f"matmul shape mismatch: {self.data.shape} @ {o.data.shape}"
            )
        out = Tensor(self.data @ o.data)
        if _grad_enabled and (self.requires_grad or o.requires_grad):
            out.requires_grad = True
            out._parents = (self, o)

            def bw(g, a=self, b=o):
                if a.requires_grad:
                    a._accumulate(g @ b.data.T)
                if b.requires_grad:
                    b._accumulate(a.data.T @ g)

            out._backward = bw
        return out

    # -- elementwise nonlinearities -----------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data))
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            out._backward = lambda g, a=self, y=out.data: a._accumulate(g * y)
        return out

    def log(self):
        out = Tensor(np.log(self.data))
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            out._backward = lambda g, a=self: a._accumulate(g / a.data)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data))
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            out._backward = lambda g, a=self, y=out.data: a._accumulate(g * (1.0 - y * y))
        return out

    def sigmoid(self):
        x = self.data
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out = Tensor(y)
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            out._backward = lambda g, a=self, s=y: a._accumulate(g * s * (1.0 - s))
        return out

    def softplus(self):
        x = self.data
        e = np.exp(-np.abs(x))
        out = Tensor(np.maximum(x, 0.0) + np.log1p(e))
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            out._parents = (self,)
            out._backward = lambda g, a=self, d=s: a._accumulate(g * d)
        return out

    def clip(self, lo: float, hi: float):
        """Clamp to [lo, hi]; zero gradient outside the open interval."""
        out = Tensor(np.clip(self.data, lo, hi))
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            inside = (self.data > lo) & (self.data < hi)
            out._parents = (self,)
            out._backward = lambda g, a=self, m=inside: a._accumulate(g * m)
        return out

    # -- reductions / reshaping ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)

            def bw(g, a=self, ax=axis, kd=keepdims):
                if ax is not None and not kd:
                    g = np.expand_dims(g, ax)
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())

            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape))
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)
            out._backward = lambda g, a=self: a._accumulate(g.reshape(a.data.shape))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx])
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)

            def bw(g, a=self, i=idx):
                z = np.zeros_like(a.data)
                np.add.at(z, i, g)
                a._accumulate(z)

            out._backward = bw
        return out


def concat(tensors: list, axis: int = -1) -> Tensor:
    """Concatenate along an axis; gradient splits back by segment."""
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    if _grad_enabled and any(t.requires_grad for t in ts):
        out.requires_grad = True
        out._parents = tuple(ts)
        sizes = [t.data.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]

        def bw(g, parents=tuple(ts), sp=splits, ax=axis):
            pieces = np.split(g, sp, axis=ax)
            for p, piece in zip(parents, pieces):
                if p.requires_grad:
                    p._accumulate(piece)

        out._backward = bw
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient routes to the first argument."""
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b)
    out = Tensor(np.minimum(ta.data, tb.data))
    if _grad_enabled and (ta.requires_grad or tb.requires_grad):
        out.requires_grad = True
        out._parents = (ta, tb)
        take_a = ta.data <= tb.data

        def bw(g, x=ta, y=tb, m=take_a):
            if x.requires_grad:
                x._accumulate(_unbroadcast(g * m, x.data.shape))
            if y.requires_grad:
                y._accumulate(_unbroadcast(g * ~m, y.data.shape))

        out._backward = bw
    return out


def maximum(a, b) -> Tensor:
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b)
    out = Tensor(np.maximum(ta.data, tb.data))
    if _grad_enabled and (ta.requires_grad or tb.requires_grad):
        out.requires_grad = True
        out._parents = (ta, tb)
        take_a = ta.data >= tb.data

        def bw(g, x=ta, y=tb, m=take_a):
            if x.requires_grad:
                x._accumulate(_unbroadcast(g * m, x.data.shape))
            if y.requires_grad:
                y._accumulate(_unbroadcast(g * ~m, y.data.shape))

        out._backward = bw
    return out


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Repeat each row n times: (B, F) -> (B*n, F); gradient sums back."""
    out = Tensor(np.repeat(x.data, n, axis=0))
    if _grad_enabled and x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        b, f = x.data.shape
        out._backward = lambda g, a=x, bb=b, k=n, ff=f: a._accumulate(
            g.reshape(bb, k, ff).sum(axis=1)
        )
    return out


def masked_mean_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of (B, n, F) restricted to unmasked rows.

    The forward sums each column in value-sorted order, so the output is
    bitwise identical under any permutation of the rows (the aggregation
    must not leak row order). Masked rows are replaced by zeros before
    sorting and contribute nothing, whatever garbage they contain.
    """
    if x.data.ndim != 3:
        raise ShapeError("masked_mean_rows expects a (B, n, F) tensor")
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.data.shape[:2]:
        raise ShapeError("mask shape must match (B, n)")
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise UsageError("masked_mean_rows: at least one row must be unmasked")
    z = np.where(m[:, :, None], x.data, 0.0)
    n = z.shape[1]
    inv = (1.0 / counts)[:, None]
    if n == 1:
        total = z[:, 0]
    elif n == 2:
        # min + max is the two-row value-sorted sum
        total = np.minimum(z[:, 0], z[:, 1]) + np.maximum(z[:, 0], z[:, 1])
    else:
        z.sort(axis=1)
        total = z.sum(axis=1)
    out = Tensor(total * inv)
    if _grad_enabled and x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def bw(g, a=x, mm=m, w=inv):
            a._accumulate(np.where(mm[:, :, None], (g * w)[:, None, :], 0.0))

        out._backward = bw
    return out


_ROW_BLOCK = 8


def _row_aligned_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x @ w with rows padded to a full BLAS block.

    Keeps each row's result independent of its slot in the matrix: tail
    rows otherwise go through a different GEMM edge kernel and round
    differently, which would break exact permutation equivariance of the
    per-joint network outputs.
    """
    rows = x.shape[0]
    rem = rows % _ROW_BLOCK
    if rem == 0:
        return x @ w
    padded = np.zeros((rows + _ROW_BLOCK - rem, x.shape[1]))
    padded[:rows] = x
    return (padded @ w)[:rows]


def linear(x: Tensor, w: Tensor, b: Tensor, tanh_act: bool = False) -> Tensor:
    """Fused x @ w + b with optional tanh: one graph node per layer."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("linear requires 2-D input and weight")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.data.shape} @ {w.data.shape}")
    pre = _row_aligned_matmul(x.data, w.data)
    pre += b.data
    y = np.tanh(pre) if tanh_act else pre
    out = Tensor(y)
    if _grad_enabled and (x.requires_grad or w.requires_grad or b.requires_grad):
        out.requires_grad = True
        out._parents = (x, w, b)

        def bw(g, xx=x, ww=w, bb=b, act=y if tanh_act else None):
            gp = g * (1.0 - act * act) if act is not None else g
            if ww.requires_grad:
                ww._accumulate(xx.data.T @ gp)
            if bb.requires_grad:
                bb._accumulate(gp.sum(axis=0))
            if xx.requires_grad:
                xx._accumulate(gp @ ww.data.T)

        out._backward = bw
    return out


def gru_cell(x: Tensor, h: Tensor, wz, uz, bz, wr, ur, br, wh, uh, bh) -> Tensor:
    """Fused GRU update, one graph node:

        z = sigma(x Wz + h Uz + bz)
        r = sigma(x Wr + h Ur + br)
        hbar = tanh(x Wh + (r * h) Uh + bh)
        h' = (1 - z) * h + z * hbar
    """

    def sig(v):
        # sigmoid through tanh: one transcendental pass, no overflow branch
        np.multiply(v, 0.5, out=v)
        np.tanh(v, out=v)
        np.multiply(v, 0.5, out=v)
        np.add(v, 0.5, out=v)
        return v

    xd, hd = x.data, h.data
    z = sig(_row_aligned_matmul(xd, wz.data) + _row_aligned_matmul(hd, uz.data) + bz.data)
    r = sig(_row_aligned_matmul(xd, wr.data) + _row_aligned_matmul(hd, ur.data) + br.data)
    rh = r * hd
    hbar = np.tanh(
        _row_aligned_matmul(xd, wh.data) + _row_aligned_matmul(rh, uh.data) + bh.data
    )
    out = Tensor((1.0 - z) * hd + z * hbar)
    if _grad_enabled and any(
        t.requires_grad for t in (x, h, wz, uz, bz, wr, ur, br, wh, uh, bh)
    ):
        out.requires_grad = True
        out._parents = (x, h, wz, uz, bz, wr, ur, br, wh, uh, bh)

        def bw(g):
            dz = g * (hbar - hd) * z * (1.0 - z)
            dhbar_pre = g * z * (1.0 - hbar * hbar)
            drh = dhbar_pre @ uh.data.T
            dr = drh * hd * r * (1.0 - r)
            for wt, grad in (
                (wz, lambda: xd.T @ dz), (uz, lambda: hd.T @ dz),
                (bz, lambda: dz.sum(axis=0)),
                (wr, lambda: xd.T @ dr), (ur, lambda: hd.T @ dr),
                (br, lambda: dr.sum(axis=0)),
                (wh, lambda: xd.T @ dhbar_pre), (uh, lambda: rh.T @ dhbar_pre),
                (bh, lambda: dhbar_pre.sum(axis=0)),
            ):
                if wt.requires_grad:
                    wt._accumulate(grad())
            if x.requires_grad:
                x._accumulate(dz @ wz.data.T + dr @ wr.data.T + dhbar_pre @ wh.data.T)
            if h.requires_grad:
                h._accumulate(
                    g * (1.0 - z) + drh * r + dz @ uz.data.T + dr @ ur.data.T
                )

        out._backward = bw
    return out


def masked_sq_loss(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Per-robot weighted squared error, fused: (B, ...) -> (B,).

    Returns sum(weights * (pred - target)^2) over all trailing axes.
    weights and target are constants.
    """
    d = pred.data - target
    wd = weights * d
    b = pred.data.shape[0]
    out = Tensor((wd * d).reshape(b, -1).sum(axis=1))
    if _grad_enabled and pred.requires_grad:
        out.requires_grad = True
        out._parents = (pred,)
        shape = pred.data.shape

        def bw(g, p=pred, w2d=wd):
            p._accumulate(2.0 * w2d * g.reshape((b,) + (1,) * (len(shape) - 1)))

        out._backward = bw
    return out
