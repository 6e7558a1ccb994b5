"""Minimal reverse-mode differentiation over numpy arrays.

Only the primitives needed by the VQVC+ layers, the probe classifier and the
losses are provided. Tensors are laid out as ``(C, T)`` or ``(B, C, T)``;
time is always the last axis and channels the one before it.

Each op records its parents and a closure mapping the output gradient to
parent gradients. :meth:`Tensor.backward` walks the recorded graph once in
reverse topological order and then releases it.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphConsumedError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "absolute",
    "tsum",
    "mean",
    "reshape",
    "matmul",
    "concat_channels",
    "slice_channels",
    "slice_time",
    "repeat_time",
    "reduce_mean_time",
    "stop_gradient",
    "conv1d",
    "leaky_relu",
    "instance_norm",
    "group_norm",
    "cross_entropy",
    "finite_diff_check",
    "write_tensor",
    "read_tensor",
]


class GraphConsumedError(RuntimeError):
    """Raised when backward runs twice over the same recorded graph."""


class Tensor:
    """A numpy array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumedError("graph already consumed by an earlier backward call")
        if not self.requires_grad:
            raise ValueError("tensor does not depend on any requires_grad leaf")

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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._consumed:
                raise GraphConsumedError(f"intermediate {node.op} already consumed")
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

        for node in order:
            if node._parents:
                node._backward = None
                node._consumed = True
        self._consumed = True


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def absolute(x: Tensor) -> Tensor:
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def tsum(x: Tensor) -> Tensor:
    return Tensor._from_op(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum"
    )


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor._from_op(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
        "mean",
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return Tensor._from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    sizes = [x.shape[-2] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]: bounds[i + 1], :] for i in range(len(xs)))

    return Tensor._from_op(np.concatenate([x.data for x in xs], axis=-2), xs, backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        out[..., start:stop, :] = g
        return (out,)

    return Tensor._from_op(x.data[..., start:stop, :].copy(), (x,), backward, "slice_channels")


def slice_time(x: Tensor, start: int = 0, stop: int | None = None, step: int = 1) -> Tensor:
    sl = slice(start, stop, step)

    def backward(g):
        out = np.zeros_like(x.data)
        out[..., sl] = g
        return (out,)

    return Tensor._from_op(x.data[..., sl].copy(), (x,), backward, "slice_time")


def repeat_time(x: Tensor, repeats: int) -> Tensor:
    """Repeat every time column ``repeats`` times in place: [a, b] -> [a, a, b, b]."""
    t = x.shape[-1]

    def backward(g):
        return (g.reshape(g.shape[:-1] + (t, repeats)).sum(axis=-1),)

    return Tensor._from_op(np.repeat(x.data, repeats, axis=-1), (x,), backward, "repeat_time")


def reduce_mean_time(x: Tensor) -> Tensor:
    t = x.shape[-1]
    return Tensor._from_op(
        x.data.mean(axis=-1),
        (x,),
        lambda g: (np.repeat(g[..., None] / t, t, axis=-1),),
        "reduce_mean_time",
    )


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Kernel-3 cross-correlation over time with one frame of zero padding per side.

    ``x`` is ``(C_in, T)`` or ``(B, C_in, T)``; ``weight`` is ``(C_out, C_in, 3)``.
    The output has ``ceil(T / stride)`` frames.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    c_out, c_in, k = weight.shape
    if k != 3:
        raise ValueError(f"kernel width must be 3, got {k}")
    if x.shape[-2] != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[-2]}, weight expects {c_in}")
    squeeze = x.ndim == 2
    xb = _as_batch(x.data)
    b, _, t = xb.shape
    t_out = -(-t // stride)
    span = stride * (t_out - 1) + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1)))
    cols = np.stack([xp[:, :, j: j + span: stride] for j in range(3)], axis=2).reshape(b, c_in * 3, t_out)
    w2 = weight.data.reshape(c_out, c_in * 3)
    out = np.matmul(w2, cols) + bias.data[:, None]

    def backward(g):
        gb3 = _as_batch(g)
        gw = np.matmul(gb3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gbias = gb3.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, gb3).reshape(b, c_in, 3, t_out)
            gxp = np.zeros_like(xp)
            for j in range(3):
                gxp[:, :, j: j + span: stride] += gcols[:, :, j]
            gx = gxp[:, :, 1:-1]
            if squeeze:
                gx = gx[0]
        return gx, gw, gbias

    return Tensor._from_op(out[0] if squeeze else out, (x, weight, bias), backward, "conv1d")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError("slope must lie in (0, 1)")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def _standardize(x: Tensor, groups: int, eps: float, op: str) -> Tensor:
    shape = x.shape
    c = shape[-2]
    if c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    lead = shape[:-2]
    xg = x.data.reshape(lead + (groups, -1))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gg = g.reshape(y.shape)
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - y * (gg * y).mean(axis=-1, keepdims=True))
        return (gx.reshape(shape),)

    return Tensor._from_op(y.reshape(shape).astype(x.dtype, copy=False), (x,), backward, op)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over time, no affine parameters.

    A single frame has zero variance and normalizes to zero.
    """
    return _standardize(x, x.shape[-2], eps, "instance_norm")


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over (channels in group x time), then per-channel scale and shift."""
    y = _standardize(x, groups, eps, "group_norm")
    return y * reshape(weight, (-1, 1)) + reshape(bias, (-1, 1))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. An array ``x``
    is wrapped in a fresh float64 leaf; a Tensor's ``data`` is perturbed in
    place and restored, and its ``grad`` is overwritten.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.array(x, dtype=np.float64))
    x.grad = None
    x.requires_grad = True
    f(x).backward()
    analytic = x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(stop_gradient(x)).item()
        flat[i] = orig - eps
        lo = f(stop_gradient(x)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


_DTSR = b"DTSR"


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    """Write one DTSR block: magic, u32 rank, u32 extents, float32 values."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(_DTSR)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != _DTSR:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float32)
    return data.reshape(shape)

