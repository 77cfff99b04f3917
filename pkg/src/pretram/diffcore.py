"""Tape-based reverse-mode autodiff over numpy arrays.

Only the operations the encoders and objectives use are provided. Each op
returns a new :class:`Tensor` that remembers its parents and a closure that
pushes the output gradient back to them; :meth:`Tensor.backward` walks the
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (64-bit for grad checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
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
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named trainable tensor carrying Adam moment accumulators."""

    __slots__ = ("name", "m", "v")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot combine {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    b = as_tensor(b)
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot combine {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def backward(g):
        x._accumulate(g * c)

    return _result(x.data * c, (x,), backward)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def backward(g):
        x._accumulate(g * keep)

    return _result(np.where(keep, x.data, 0).astype(x.dtype, copy=False), (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        x._accumulate(g * y)

    return _result(y, (x,), backward)


def sqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise sqrt; the derivative uses max(sqrt(x), eps) so zeros stay finite."""
    y = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / np.maximum(y, x.dtype.type(eps)))

    return _result(y, (x,), backward)


# ------------------------------------------------------------------ reductions

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        def backward(g):
            x._accumulate(np.broadcast_to(g, x.shape))

        return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)
    axis = _check_axis(x, axis)

    def backward(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(x.data.sum(axis=axis), (x,), backward)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.shape[axis]

    def backward(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape) / x.dtype.type(n))

    return _result(x.data.mean(axis=axis), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / x.dtype.type(n), x.shape))

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def cumsum(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)

    def backward(g):
        x._accumulate(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _result(np.cumsum(x.data, axis=axis), (x,), backward)


# --------------------------------------------------------------- shape juggling

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(y, (x,), backward)


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = _check_axis(x, axis)
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside extent {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[idx] = g
        x._accumulate(full)

    return _result(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = _check_axis(xs[0], axis)
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(data, xs, backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a[..., k] @ b[k, n] or equal-batch a[B, m, k] @ b[B, k, n]."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(data, (a, b), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over x[N, C_in, H, W] (or unbatched [C_in, H, W]).

    weight is [C_out, C_in, kh, kw]; zero padding is applied on all sides.
    """
    if x.ndim == 3:
        y = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(y, y.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    ho, wo = _conv_out_hw((h, w), (kh, kw), stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # cols: [N*Ho*Wo, C*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    data = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        if weight.requires_grad:
            weight._accumulate((gm.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=0))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward)


def _conv_out_hw(hw, khw, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    ho = (hw[0] + 2 * padding - khw[0]) // stride + 1
    wo = (hw[1] + 2 * padding - khw[1]) // stride + 1
    if khw[0] > hw[0] + 2 * padding or khw[1] > hw[1] + 2 * padding or ho < 1 or wo < 1:
        raise ShapeError(f"kernel {tuple(khw)} larger than padded input {tuple(hw)} (padding {padding})")
    return ho, wo


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row (last axis) by max(||row||, eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    y = x.data / denom
    active = norm > eps

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(np.where(active, g - y * proj, g) / denom)

    return _result(y, (x,), backward)


def cross_entropy_rows(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_rows: logits {logits.shape} vs labels {labels.shape}")
    n, m = logits.shape
    if n and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        logits._accumulate(p * (g / n))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# --------------------------------------------------------------------- dropout

@dataclass(frozen=True)
class DropoutMask:
    """Seeded Bernoulli keep-mask; the same (seed, shape, keep_prob) always realizes the same mask."""

    seed: int
    keep_prob: float

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")

    def realize(self, shape: tuple[int, ...]) -> np.ndarray:
        if self.keep_prob == 1.0:
            return np.ones(shape, dtype=bool)
        return np.random.default_rng(self.seed).random(shape) < self.keep_prob

    def child(self, index: int) -> DropoutMask:
        """Independent mask for the index-th dropout site of a network."""
        state = np.random.SeedSequence([self.seed & (2**64 - 1), index]).generate_state(1, dtype=np.uint64)[0]
        return DropoutMask(int(state), self.keep_prob)


def dropout(x: Tensor, mask: DropoutMask, training: bool) -> Tensor:
    """Inverted dropout: kept units scale by 1/keep_prob in training, identity in eval."""
    if not training or mask.keep_prob == 1.0:
        return x
    keep = mask.realize(x.shape)
    factor = (keep / x.dtype.type(mask.keep_prob)).astype(x.dtype)

    def backward(g):
        x._accumulate(g * factor)

    return _result(x.data * factor, (x,), backward)


# ------------------------------------------------------------------- optimizer

def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    lr: float,
    step_index: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update; parameters with a None grad are skipped."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient in {p.name!r}: {bad} of {np.size(g)} entries")
    c1 = 1.0 - beta1**step_index
    c2 = 1.0 - beta2**step_index
    for p, g in zip(params, grads):
        if g is None:
            continue
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
