"""Dense tensors with a reverse-mode tape and the neural primitives built on it.

Every differentiable primitive computes its forward value with numpy and, when a
:class:`Tape` is active and some operand requires a gradient, appends one entry
holding a closure that maps the output adjoint to operand adjoints.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DataError, DimensionError, ParameterError

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("meepo_dtype", default=np.float64)
_TAPE: contextvars.ContextVar = contextvars.ContextVar("meepo_tape", default=None)

LN_EPS = 1e-5


def default_dtype():
    return _DTYPE.get()


def set_default_dtype(dtype) -> None:
    """Select the working precision (``np.float64`` or ``np.float32``) for new tensors."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported precision {dtype!r}")
    _DTYPE.set(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    """A real array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        elif min(arr.shape) < 1:
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return gather_rows(self, np.arange(self.shape[0])[rows])

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    @property
    def T(self):
        return transpose(self)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of primitive operations, replayed in reverse by :meth:`backward`.

    A tape is single-writer; use one per thread.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward, op: str) -> None:
        self.entries.append(TapeEntry(output, tuple(inputs), backward, op))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss or an explicit seed, got {loss.shape}")
            seed = np.ones_like(loss.data)
        adjoints: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        produced = {id(e.output) for e in self.entries}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = adjoints.pop(id(entry.output), None)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
                if key not in produced:
                    leaves[key] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = adjoints.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _TAPE.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    token = _TAPE.set(None)
    try:
        yield
    finally:
        _TAPE.reset(token)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def make_op(out: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap ``out`` as a Tensor and record it when any input needs a gradient.

    ``backward(g)`` must return one adjoint (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    tape = _TAPE.get()
    result.requires_grad = bool(needs and tape is not None)
    if result.requires_grad:
        tape.record(result, inputs, backward, op)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return make_op(a.data * a.dtype.type(s), (a,), lambda g: (g * s,), "scale")
    a = _as_tensor(a, b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    y = x.data * s
    return make_op(y, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),), "silu")


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) without overflow for large |x|."""
    v = x.data
    y = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return make_op(y, (x,), lambda g: (g * _sigmoid(v),), "softplus")


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, which keeps finite-difference checks clean
    v = x.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make_op(y, (x,), back, "gelu")


# --- shape and reductions ---------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return make_op(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
        "sum",
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_op(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
        "mean",
    )


def transpose(x: Tensor) -> Tensor:
    return make_op(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), back, "slice_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return make_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back, "concat_cols")


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the adjoint."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        full = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_op(x.data[index], (x,), back, "gather_rows")


def permute_rows(x: Tensor, perm) -> Tensor:
    """Rows ``x[perm]`` for a bijection ``perm``; cheaper adjoint than :func:`gather_rows`."""
    perm = np.asarray(perm, dtype=np.int64)

    def back(g):
        full = np.empty_like(g)
        full[perm] = g
        return (full,)

    return make_op(x.data[perm], (x,), back, "permute_rows")


def segment_mean(x: Tensor, segments, num_segments: int) -> Tensor:
    """Average the rows of ``x`` sharing a segment id; every segment must be non-empty."""
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=num_segments).astype(x.dtype)
    if np.any(counts == 0):
        raise DataError("segment_mean: empty segment")
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, segments, x.data)
    out /= counts.reshape((-1,) + (1,) * (x.data.ndim - 1))
    inv = (1.0 / counts).reshape((-1,) + (1,) * (x.data.ndim - 1))
    return make_op(out, (x,), lambda g: ((g * inv)[segments],), "segment_mean")


# --- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ W + b``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
        return make_op(
            y, (x, W, b), lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)), "linear"
        )
    return make_op(y, (x, W), lambda g: (g @ W.data.T, x.data.T @ g), "linear")


# --- sequence convolution ---------------------------------------------------


def conv1d_padding(K: int, mode: str) -> tuple[int, int]:
    if K < 1:
        raise ParameterError(f"kernel size must be >= 1, got {K}")
    if mode == "causal":
        return K - 1, 0
    if mode == "symmetric":
        return (K - 1) // 2, K // 2
    raise ParameterError(f"unknown conv mode {mode!r}; expected 'causal' or 'symmetric'")


def depthwise_conv1d(x: Tensor, k: Tensor, mode: str = "causal") -> Tensor:
    """Per-channel convolution along rows: ``out[t] = sum_j k[j] * xpad[t + j]``.

    ``causal`` pads K-1 zeros on the left. ``symmetric`` pads floor((K-1)/2) left
    and ceil((K-1)/2) right, so even kernels reach one tap further into the future.
    """
    if k.data.ndim != 2:
        raise DimensionError(f"conv kernel must be K x C, got {k.shape}")
    K, C = k.shape
    if x.shape[1] != C:
        raise DimensionError(f"conv kernel {k.shape} does not match input {x.shape}")
    left, right = conv1d_padding(K, mode)
    L = x.shape[0]
    xp = np.zeros((L + left + right, C), dtype=x.dtype)
    xp[left : left + L] = x.data
    out = np.zeros_like(x.data)
    for j in range(K):
        out += k.data[j] * xp[j : j + L]

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k.data)
        for j in range(K):
            gxp[j : j + L] += g * k.data[j]
            gk[j] = (g * xp[j : j + L]).sum(axis=0)
        return gxp[left : left + L], gk

    return make_op(out, (x, k), back, "depthwise_conv1d")


# --- normalisation and losses -------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data

    def back(g):
        gh = g * gain.data if gain is not None else g
        gx = rstd * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        out = [gx]
        if gain is not None:
            out.append((g * xhat).sum(axis=0))
        if bias is not None:
            out.append(g.sum(axis=0))
        return out

    inputs = tuple(t for t in (x, gain, bias) if t is not None)
    return make_op(y, inputs, back, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return make_op(p, (x,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),), "softmax_rows")


def log_softmax_rows(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels, ignore_label: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose label is not ``ignore_label``."""
    labels = np.asarray(labels, dtype=np.int64)
    L, K = logits.shape
    if labels.shape != (L,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    keep = labels != ignore_label
    bad = np.flatnonzero(keep & ((labels < 0) | (labels >= K)))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at row {bad[0]} outside [0, {K})")
    n = int(keep.sum())
    if n == 0:
        return make_op(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")
    rows = np.flatnonzero(keep)
    lsm = log_softmax_rows(logits.data[rows])
    loss = -lsm[np.arange(n), labels[rows]].mean()

    def back(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(lsm)
        p[np.arange(n), labels[rows]] -= 1.0
        grad[rows] = p * (g / n)
        return (grad,)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


# --- gradient checking --------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients of scalar ``f`` at ``x``.

    Runs in 64-bit regardless of the ambient precision. The relative error of
    each element uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    with precision(np.float64):
        base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        leaf = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            out = f(leaf)
        tape.backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        with no_tape():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(Tensor(base.copy())).data)
                flat[i] = orig - h
                fm = float(f(Tensor(base.copy())).data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --- parameters ---------------------------------------------------------------


@dataclass
class Param:
    value: Tensor
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad


@dataclass
class ParamStore:
    """Named learnable tensors plus AdamW moment buffers.

    Mutation (gradient accumulation, optimizer steps) must be serialized by the caller.
    """

    params: dict[str, Param] = field(default_factory=dict)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = Param(t, np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return ((k, p.value) for k, p in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.grad = None

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(p.value.data.size for k, p in self.params.items() if k.startswith(prefix)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            if k not in self.params:
                raise ParameterError(f"unknown parameter {k!r}")
            p = self.params[k]
            if p.value.shape != arr.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} != {p.value.shape}")
            p.value.data = np.asarray(arr, dtype=p.value.dtype).copy()

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.value.data = p.value.data.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
