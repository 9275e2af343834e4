"""Small dense-tensor library with reverse-mode autodiff.

Dynamic tape: every op that touches a grad-requiring tensor records its
parents and a backward closure; backward() walks the tape in reverse
topological order. Values are whatever float dtype the caller supplies
(training uses float32, gradient checks use float64); reductions always
accumulate in float64 before casting back.

Shapes are limited to at most 4 axes, which covers everything the denoiser
networks need. Convolutions are channels-last, (batch, length, channels),
so the inner loops become single large GEMMs.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NotScalar, ShapeMismatch

_MAX_AXES = 4

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value, dtype=None):
    arr = np.asarray(value)
    if arr.dtype.kind not in "fiu":
        raise ShapeMismatch(f"tensor data must be numeric, got dtype {arr.dtype}")
    if arr.dtype.kind in "iu" and dtype is None:
        arr = arr.astype(np.float32)
    if dtype is not None:
        arr = arr.astype(dtype)
    if arr.ndim > _MAX_AXES:
        raise ShapeMismatch(f"tensors support at most {_MAX_AXES} axes, got shape {arr.shape}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'yes' if self.requires_grad else 'no'})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff core ----------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into each reachable leaf's .grad.

        Only defined for scalar tensors. Repeated calls without zero_grad()
        keep accumulating (sums of gradients), which is the documented
        behavior, not an error.
        """
        if self.data.ndim != 0:
            raise NotScalar(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.data.dtype, copy=False)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, a: int, b: int):
        return transpose(self, a, b)


class Parameter(Tensor):
    """Trainable leaf tensor with a stable name for checkpoints."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data, parents, backward) -> Tensor:
    """Build an op result, recording the tape entry only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` along the axes numpy broadcast expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap(a, b) if isinstance(b, Tensor) else Tensor(a)
    b = _wrap(b, a)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(f"add: cannot broadcast {a.shape} with {b.shape}") from e
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap(a, b) if isinstance(b, Tensor) else Tensor(a)
    b = _wrap(b, a)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(f"mul: cannot broadcast {a.shape} with {b.shape}") from e
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def _softplus(x: np.ndarray) -> np.ndarray:
    # max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate exp only on the non-overflowing tail
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x)), the denoiser's activation."""
    sp = _softplus(x.data)
    tsp = np.tanh(sp)
    sig = _sigmoid(x.data)

    def backward(g):
        return (g * (tsp + x.data * (1.0 - tsp * tsp) * sig),)

    return _make(x.data * tsp, (x,), backward)


# -- reductions -----------------------------------------------------------


def _reduce(x: Tensor, axis, keepdims, op):
    if axis is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.data.ndim,)
    else:
        axes = tuple(a % x.data.ndim for a in axis)
    acc = op(x.data, axes)
    return axes, acc


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes, acc = _reduce(x, axis, keepdims, lambda d, a: d.sum(axis=a, dtype=np.float64, keepdims=keepdims))
    data = acc.astype(x.data.dtype)

    def backward(g):
        gg = g if keepdims or axis is None else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape).astype(x.data.dtype, copy=False),)

    if axis is None and not keepdims:
        return _make(np.asarray(data), (x,), lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))
    return _make(data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.data.size == 0:
        raise ShapeMismatch("mean over an empty tensor")
    axes, acc = _reduce(x, axis, keepdims, lambda d, a: d.mean(axis=a, dtype=np.float64, keepdims=keepdims))
    data = acc.astype(x.data.dtype)
    n = 1
    for a in axes:
        n *= x.shape[a]

    def backward(g):
        gg = g if keepdims or axis is None else np.expand_dims(g, axes)
        return ((np.broadcast_to(gg, x.shape) / n).astype(x.data.dtype, copy=False),)

    if axis is None and not keepdims:
        return _make(np.asarray(data), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))
    return _make(data, (x,), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element. Target gets no gradient."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target
    data = np.asarray((diff.astype(np.float64) ** 2).mean().astype(pred.data.dtype))
    scale = 2.0 / diff.size

    def backward(g):
        return ((g * scale * diff).astype(pred.data.dtype, copy=False),)

    return _make(data, (pred,), backward)


# -- shape ops ------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from e
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    ax = axis % tensors[0].data.ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(data, tuple(tensors), backward)


def narrow(x: Tensor, key) -> Tensor:
    """Basic slicing/indexing with gradient scatter into the source shape."""
    data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(data, (x,), backward)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeMismatch(f"embedding indices must be integers, got {idx.dtype}")
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch("embedding index out of range")
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(data, (table,), backward)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def _im2col(xp: np.ndarray, k: int, stride: int, l_out: int) -> np.ndarray:
    """(B, Lp, C) -> (B, L_out, K, C) windows as a strided view."""
    sb, sl, sc = xp.strides
    shape = (xp.shape[0], l_out, k, xp.shape[2])
    return np.lib.stride_tricks.as_strided(xp, shape, (sb, sl * stride, sl, sc))


def conv1d(x: Tensor, w: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution, channels last.

    x: (B, L, C_in), w: (K, C_in, C_out), bias: (C_out,) or None.
    Output length is (L + 2*padding - K) // stride + 1.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatch(f"conv1d: x must be (B,L,C), w must be (K,Cin,Cout); got {x.shape}, {w.shape}")
    B, L, cin = x.shape
    K, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeMismatch(f"conv1d: channel mismatch, x has {cin}, w expects {wcin}")
    l_out = (L + 2 * padding - K) // stride + 1
    if l_out < 1:
        raise ShapeMismatch(f"conv1d: kernel {K} with padding {padding} does not fit length {L}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    cols = _im2col(xp, K, stride, l_out).reshape(B * l_out, K * cin)
    w2 = w.data.reshape(K * cin, cout)
    out = (cols @ w2).reshape(B, l_out, cout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(B * l_out, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout)
        gcols = (g2 @ w2.T).reshape(B, l_out, K, cin)
        gxp = np.zeros((B, L + 2 * padding, cin), dtype=x.data.dtype)
        for kk in range(K):
            gxp[:, kk:kk + l_out * stride:stride, :] += gcols[:, :, kk, :]
        gx = gxp[:, padding:padding + L, :] if padding else gxp
        gb = g.sum(axis=(0, 1), dtype=np.float64).astype(g.dtype) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return _make(out, parents, backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B, L, C) per batch row and channel group, then scale/shift.

    Statistics run over the length axis and the channels inside each group.
    gamma/beta are per-channel, shape (C,).
    """
    if x.data.ndim != 3:
        raise ShapeMismatch(f"group_norm expects (B,L,C), got {x.shape}")
    B, L, C = x.shape
    if C % groups != 0:
        raise ShapeMismatch(f"group_norm: {C} channels not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch("group_norm: gamma/beta must have shape (C,)")
    xg = x.data.reshape(B, L, groups, C // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True, dtype=np.float64)
    var = ((xg.astype(np.float64) - mu) ** 2).mean(axis=(1, 3), keepdims=True)
    inv = (1.0 / np.sqrt(var + eps))
    xhat = ((xg - mu) * inv).astype(x.data.dtype).reshape(B, L, C)
    out = xhat * gamma.data + beta.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 1), dtype=np.float64).astype(g.dtype)
        dbeta = g.sum(axis=(0, 1), dtype=np.float64).astype(g.dtype)
        dxh = (g * gamma.data).reshape(B, L, groups, C // groups)
        xh = xhat.reshape(B, L, groups, C // groups)
        m1 = dxh.mean(axis=(1, 3), keepdims=True, dtype=np.float64)
        m2 = (dxh * xh).mean(axis=(1, 3), keepdims=True, dtype=np.float64)
        dx = ((dxh - m1 - xh * m2) * inv).astype(x.data.dtype).reshape(B, L, C)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat along the length axis of (B, L, C); gradient sums back."""
    if x.data.ndim != 3:
        raise ShapeMismatch(f"upsample_nearest expects (B,L,C), got {x.shape}")
    B, L, C = x.shape
    data = np.repeat(x.data, factor, axis=1)

    def backward(g):
        return (g.reshape(B, L, factor, C).sum(axis=2, dtype=np.float64).astype(g.dtype),)

    return _make(data, (x,), backward)
