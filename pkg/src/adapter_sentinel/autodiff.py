"""Dense tensors with reverse-mode differentiation.

Storage is float32; reductions (matmul, conv, norms) accumulate in float64
unless a ``precision(np.float32)`` block says otherwise. A float64 tensor stays float64 through every op, which is what the gradient
checker uses as its "shadow" precision.

Only the handful of ops the toy encoder, the detector and the weight-space
attacks need are provided. Binary elementwise ops follow numpy broadcasting
and reduce gradients back to the operand shape.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

F32 = np.float32
F64 = np.float64


_ACCUM = [F64]


@contextlib.contextmanager
def precision(accumulate) -> Iterator[None]:
    """Temporarily change the accumulation dtype of matmul/conv2d on float32 data.

    The default is float64. Training loops over the toy encoder switch to
    float32 BLAS, which is several times faster at these sizes.
    """
    _ACCUM.append(np.dtype(accumulate).type)
    try:
        yield
    finally:
        _ACCUM.pop()


def _acc(dt):
    return F64 if dt == F64 else _ACCUM[-1]


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible operand shapes."""


class Rng:
    """Seeded random stream; identical seed and call sequence replay exactly."""

    def __init__(self, seed: int | Sequence[int]):
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def spawn(self, *key: int) -> "Rng":
        """Independent child stream derived from (seed, *key)."""
        base = list(self.seed) if isinstance(self.seed, (list, tuple)) else [self.seed]
        return Rng(base + [int(k) for k in key])

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return (mean + std * self.generator.standard_normal(shape)).astype(F32)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, shape).astype(F32)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self.generator.choice(a, size=size, replace=replace)


def _float(a) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype != F32 and arr.dtype != F64:
        arr = arr.astype(F32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = _float(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.float32(x))
    return Tensor(x)


def _result_dtype(*ts: Tensor):
    return F64 if any(t.dtype == F64 for t in ts) else F32


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dt = _result_dtype(a, b)
    out = (a.data + b.data).astype(dt, copy=False)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                                         _unbroadcast(g, b.shape) if b.requires_grad else None), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dt = _result_dtype(a, b)
    out = (a.data - b.data).astype(dt, copy=False)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dt = _result_dtype(a, b)
    out = (a.data * b.data).astype(dt, copy=False)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape).astype(dt, copy=False) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape).astype(dt, copy=False) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dt = _result_dtype(a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    out = (a.data / b.data).astype(dt, copy=False)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape).astype(dt, copy=False)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape).astype(dt, copy=False)
        return ga, gb

    return _make(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def maximum_scalar(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient flows where x > floor."""
    mask = x.data > floor
    out = np.where(mask, x.data, x.dtype.type(floor))
    return _make(out, (x,), lambda g: (g * mask,), "maximum")


# ----------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=F64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def sq_norm(x: Tensor) -> Tensor:
    """Squared Frobenius norm, accumulated in float64."""
    d64 = x.data.astype(F64)
    out = np.asarray(np.dot(d64.ravel(), d64.ravel())).astype(x.dtype)
    return _make(out, (x,), lambda g: ((2.0 * g * x.data).astype(x.dtype),), "sq_norm")


def col_norm(w: Tensor) -> Tensor:
    """Euclidean norm of each column of a 2-D tensor, shape [1, k]."""
    if w.ndim != 2:
        raise DimensionError(f"col_norm expects a matrix, got shape {w.shape}")
    d64 = w.data.astype(F64)
    n64 = np.sqrt((d64 * d64).sum(axis=0, keepdims=True))
    out = n64.astype(w.dtype)

    def backward(g):
        return ((g * w.data / out).astype(w.dtype),)

    return _make(out, (w,), backward, "col_norm")


# ------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy matmul semantics on leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    dt = _result_dtype(a, b)
    acc = _acc(dt)
    if a.ndim > 2 and b.ndim == 2:
        # fold batch axes into rows: one GEMM instead of a batched loop
        flat = reshape(a, (-1, a.shape[-1]))
        return reshape(matmul(flat, b), a.shape[:-1] + (b.shape[1],))
    a64 = np.ascontiguousarray(a.data, dtype=acc)
    b64 = np.ascontiguousarray(b.data, dtype=acc)
    out = np.matmul(a64, b64).astype(dt, copy=False)

    def backward(g):
        g64 = g.astype(acc, copy=False)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g64, np.swapaxes(b64, -1, -2)), a.shape).astype(dt, copy=False)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a64, -1, -2), g64), b.shape).astype(dt, copy=False)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ w.T (+ bias); w is [out, in] like a weight matrix W in y = Wx."""
    y = matmul(x, transpose(w, None))
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------- shape manipulation

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    dt = _result_dtype(*ts)
    out = np.concatenate([t.data for t in ts], axis=axis).astype(dt, copy=False)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), backward, "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """x.take(index, axis); an integer index drops the axis."""
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        if np.ndim(index):
            np.add.at(gx, tuple(sl), g)
        else:
            gx[tuple(sl)] += g
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "take")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; ids is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), backward, "embedding")


# ------------------------------------------------------------- normalisation

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    dt = _result_dtype(x, gamma, beta)
    acc = _acc(dt)
    x64 = x.data.astype(acc, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(dt, copy=False)

    def backward(g):
        g64 = g.astype(acc, copy=False)
        n = x.shape[-1]
        gxhat = g64 * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        ggamma = _unbroadcast(g64 * xhat, gamma.shape).astype(dt) if gamma.requires_grad else None
        gbeta = _unbroadcast(g64, beta.shape).astype(dt) if beta.requires_grad else None
        return gx.astype(dt), ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "layernorm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit Euclidean norm (last axis)."""
    x64 = x.data.astype(F64)
    n = np.sqrt((x64 * x64).sum(-1, keepdims=True))
    n = np.maximum(n, eps)
    y = x64 / n

    def backward(g):
        g64 = g.astype(F64)
        return ((g64 - y * (g64 * y).sum(-1, keepdims=True)) / n).astype(x.dtype),

    return _make(y.astype(x.dtype), (x,), backward, "l2_normalize")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    acc = _acc(x.dtype)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z.astype(acc, copy=False))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        g64 = g.astype(acc, copy=False)
        return ((s * (g64 - (g64 * s).sum(axis=axis, keepdims=True))).astype(x.dtype, copy=False),)

    return _make(s.astype(x.dtype, copy=False), (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x64 = x.data.astype(F64)
    z = x64 - x64.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        g64 = g.astype(F64)
        return ((g64 - s * g64.sum(axis=axis, keepdims=True)).astype(x.dtype),)

    return _make(out.astype(x.dtype), (x,), backward, "log_softmax")


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    x64 = logits.data.astype(F64)
    z = x64 - x64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((float(g) * p / n).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_xent")


# ---------------------------------------------------------------- stochastic

def dropout(x: Tensor, p: float, rng: Rng | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    keep = (rng.generator.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ------------------------------------------------------------ convolution

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) cross-correlation.

    x is [C,H,W] or [N,C,H,W]; kernels are [F,C,kh,kw]. Output spatial size
    is floor((H - kh) / stride) + 1 per axis.
    """
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"kernel channels {ck} != input channels {c}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    dt = _result_dtype(xb, kernels)
    cols = sliding_window_view(xb.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    acc = _acc(dt)
    cols64 = cols.astype(acc)  # [n, c, ho, wo, kh, kw]
    k64 = kernels.data.astype(acc)
    out = np.tensordot(cols64, k64, axes=([1, 4, 5], [1, 2, 3]))  # [n, ho, wo, f]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data.astype(acc).reshape(1, f, 1, 1)

    def backward(g):
        g64 = g.astype(acc)
        gk = np.tensordot(g64, cols64, axes=([0, 2, 3], [0, 2, 3]))  # [f, c, kh, kw]
        gx = None
        if xb.requires_grad:
            gcols = np.tensordot(g64, k64, axes=([1], [0]))  # [n, ho, wo, c, kh, kw]
            gx = np.zeros((n, c, h, w), dtype=acc)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gx.astype(dt)
        grads = [gx, gk.astype(dt)]
        if bias is not None:
            grads.append(g64.sum(axis=(0, 2, 3)).astype(dt))
        return tuple(grads)

    parents = (xb, kernels) if bias is None else (xb, kernels, bias)
    y = _make(out.astype(dt), parents, backward, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"pool kernel {kernel} larger than input {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    win = sliding_window_view(xb.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(xb.data)
        di, dj = np.divmod(arg, kernel)
        nn_, cc, ii, jj = np.indices((n, c, ho, wo))
        np.add.at(gx, (nn_, cc, ii * stride + di, jj * stride + dj), g)
        return (gx,)

    y = _make(np.ascontiguousarray(out), (xb,), backward, "max_pool2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Average over the cells [floor(i*H/oh), ceil((i+1)*H/oh)) per output index."""
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    oh, ow = out_hw
    rows = [(i * h // oh, -(-(i + 1) * h // oh)) for i in range(oh)]
    cols = [(j * w // ow, -(-(j + 1) * w // ow)) for j in range(ow)]
    x64 = xb.data.astype(F64)
    out = np.empty((n, c, oh, ow), dtype=F64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x64[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=F64)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / ((r1 - r0) * (c1 - c0))
        return (gx.astype(xb.dtype),)

    y = _make(out.astype(xb.dtype), (xb,), backward, "adaptive_avg_pool2d")
    return reshape(y, y.shape[1:]) if squeeze else y


# ----------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p, dtype=F64) for p in params],
                   [np.zeros_like(p, dtype=F64) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float | Sequence[float], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place Adam update with decoupled weight decay.

    lr may be a sequence giving a per-parameter learning rate. Parameters
    whose gradient is None are left untouched (their moments do not move).
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and optimiser state differ in length")
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v, step in zip(params, grads, state.m, state.v, lrs):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        g64 = g.astype(F64)
        m *= beta1
        m += (1.0 - beta1) * g64
        v *= beta2
        v += (1.0 - beta2) * g64 * g64
        upd = step * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            upd = upd + step * weight_decay * p.astype(F64)
        p -= upd.astype(p.dtype)


class Adam:
    """Adam over a list of leaf tensors, with optional per-tensor learning rates."""

    def __init__(self, params: Sequence[Tensor], lr: float | Sequence[float], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay)


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[int, tuple[int, ...]] | None = None  # (input index, element index)
    message: str = ""
    errors: list[float] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def grad_check(op: Callable[..., Tensor], inputs: Iterable, tolerance: float = 1e-4,
               step: float = 1e-6, floor: float = 1e-3, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``op`` with float64 central differences.

    Inputs are promoted to float64 before evaluation. A non-scalar output is
    contracted against a fixed random projection first. Relative error per
    element is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    arrays = [np.array(a, dtype=F64) for a in inputs]
    proj: list[np.ndarray | None] = [None]

    def scalar(vals: list[np.ndarray], track: bool):
        ts = [Tensor(v, requires_grad=track) for v in vals]
        out = op(*ts)
        if out.data.size != 1:
            if proj[0] is None:
                proj[0] = np.random.default_rng(seed).standard_normal(out.shape)
            out = tsum(mul(out, Tensor(proj[0])))
        return ts, out

    try:
        ts, out = scalar(arrays, True)
        out.backward()
    except NumericError as exc:
        return GradCheckReport(False, float("inf"), None, f"non-finite in forward/backward: {exc}")
    worst_err, worst_at, errs = 0.0, None, []
    for idx, (arr, t) in enumerate(zip(arrays, ts)):
        analytic = np.zeros_like(arr) if t.grad is None else t.grad.astype(F64)
        for pos in np.ndindex(arr.shape):
            orig = arr[pos]
            arr[pos] = orig + step
            fp = scalar(arrays, False)[1].item()
            arr[pos] = orig - step
            fm = scalar(arrays, False)[1].item()
            arr[pos] = orig
            num = (fp - fm) / (2.0 * step)
            if not np.isfinite(num):
                return GradCheckReport(False, float("inf"), (idx, pos), "non-finite finite difference")
            a = analytic[pos]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            errs.append(err)
            if err > worst_err:
                worst_err, worst_at = err, (idx, pos)
    return GradCheckReport(worst_err <= tolerance, worst_err, worst_at,
                           f"max relative error {worst_err:.3e}", errs)
