"""Dense N-D arrays with tape-based reverse-mode differentiation.

Only the primitives the network needs are provided. Gradients are recorded on
an explicit :class:`Tape` that lives for one forward/backward pass::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)

Operations executed outside an active tape never record anything, which makes
inference cheap.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "FormatError",
    "as_tensor",
    "backward",
    "precision",
    "set_default_dtype",
    "get_default_dtype",
    "add",
    "mul",
    "elementwise",
    "matmul",
    "softmax",
    "log_softmax",
    "conv2d",
    "layer_norm",
    "concat",
    "stack",
    "pad",
    "where",
    "custom_op",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]

_default_dtype: type = np.float32
_tape_stack: list["Tape"] = []

# Check every forward result for NaN/Inf. Disable only for profiling.
CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype!r}")
    _default_dtype = dt.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the build profile (``"float32"`` or ``"float64"``)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, parents, fn))

    def reset(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = _unbroadcast(pg, p.data.shape)
                if p._tape is not self:
                    if p._tape is not None:
                        continue  # produced on another tape: treated as a constant
                    # leaf: accumulate into .grad
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                    else:
                        p.grad = p.grad + pg
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A float array that optionally participates in gradient recording."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def flip(self, axis):
        return flip(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or _result_dtype(x))


def _result_dtype(x):
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return x.dtype
    return _default_dtype


def custom_op(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive with backward rule ``fn``.

    ``fn`` receives the output gradient and returns one gradient (or None)
    per parent.
    """
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by forward operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), fn)
    else:
        out.requires_grad = False
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    return a, b


# -- elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return custom_op(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        gb = None
        if b.requires_grad:
            gb = -g * out / bd
        return g / bd, gb

    return custom_op(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick = a.data >= b.data
    return custom_op(np.where(pick, a.data, b.data), (a, b), lambda g: (g * pick, g * ~pick))


# -- elementwise unary --------------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return custom_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def expm1(a) -> Tensor:
    a = as_tensor(a)
    out = np.expm1(a.data)
    return custom_op(out, (a,), lambda g: (g * (out + 1),))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return custom_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return custom_op(out, (a,), lambda g: (g * out * (1 - out),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return custom_op(out, (a,), lambda g: (g * _np_sigmoid(x),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, which keeps gradient checks clean."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return custom_op(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return custom_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_UNARY = {
    "neg": neg,
    "exp": exp,
    "expm1": expm1,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "gelu": gelu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "maximum": maximum}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``"add"``, ``"mul"``, ``"exp"``, ...)."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    raise ValueError(f"unsupported op_kind {op_kind!r}")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is a constant."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    return custom_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (np.where(cond, g, 0), np.where(cond, 0, g)),
    )


# -- reductions and shape ops -------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return custom_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return custom_op(np.array(a.data[idx]), (a,), bw)


def permute_axis(a, perm: Sequence[int], axis: int) -> Tensor:
    """Reorder entries along ``axis`` by the permutation ``perm``."""
    a = as_tensor(a)
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return custom_op(np.take(a.data, perm, axis=axis), (a,), lambda g: (np.take(g, inv, axis=axis),))


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return custom_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return custom_op(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold batch axes: (..., m, k)^T (..., m, n) summed over batch
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return custom_op(ad @ bd, (a, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = x.data - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return custom_op(out, (x, gamma, beta), bw)


def extract_patches(x, k: int, dilation: int = 1, padding: int = 0) -> Tensor:
    """Gather k×k (dilated) neighbourhoods of a channel-last map.

    ``x`` is (..., H, W, C); the result is (..., H', W', k*k, C) with taps in
    row-major kernel order.
    """
    x = as_tensor(x)
    if padding:
        lead = [(0, 0)] * (x.ndim - 3)
        x = pad(x, lead + [(padding, padding), (padding, padding), (0, 0)])
    H, W = x.shape[-3], x.shape[-2]
    span = dilation * (k - 1)
    Ho, Wo = H - span, W - span
    if Ho < 1 or Wo < 1:
        raise ValueError("output spatial size would be non-positive")
    taps = []
    for di in range(k):
        for dj in range(k):
            r0, c0 = di * dilation, dj * dilation
            taps.append(x[..., r0:r0 + Ho, c0:c0 + Wo, :])
    return stack(taps, axis=-2)


def conv2d(x, kernel, dilation: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Cross-correlation of a C_in×H×W map (optionally batched) with C_out×C_in×k×k."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if dilation < 1 or padding < 0:
        raise ValueError("dilation must be >= 1 and padding >= 0")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if x.shape[-3] != c_in:
        raise ValueError(f"input has {x.shape[-3]} channels, kernel expects {c_in}")
    nd = x.ndim
    hwc = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))
    y = conv2d_hwc(hwc, kernel, dilation, padding, bias)
    return transpose(y, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))


def conv2d_hwc(x, kernel, dilation: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Channel-last conv2d used internally: (..., H, W, C_in) -> (..., H', W', C_out)."""
    kernel = as_tensor(kernel)
    c_out, c_in, k, _ = kernel.shape
    patches = extract_patches(x, k, dilation, padding)  # (..., H', W', k*k, C_in)
    flat = reshape(patches, patches.shape[:-2] + (k * k * c_in,))
    wmat = reshape(transpose(kernel, (2, 3, 1, 0)), (k * k * c_in, c_out))
    y = matmul(flat, wmat)
    if bias is not None:
        y = y + bias
    return y


def backward(scalar_loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``scalar_loss``."""
    if scalar_loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {scalar_loss.shape}")
    if scalar_loss._tape is None:
        raise RuntimeError("no tape recorded this loss; run the forward pass inside `with Tape()`")
    scalar_loss._tape.backward(scalar_loss)


# -- serialization ------------------------------------------------------------
MAGIC = b"PCTN"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised for malformed PCTN byte streams."""


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"cannot serialize dtype {arr.dtype}")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", _DTYPE_CODES[dt])
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad magic bytes, expected PCTN")
    try:
        (rank,) = struct.unpack_from("<I", buf, offset + 4)
        pos = offset + 8
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (code,) = struct.unpack_from("<B", buf, pos)
        pos += 1
    except struct.error as e:
        raise FormatError(f"truncated header: {e}") from None
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    end = pos + n * dt.itemsize
    if end > len(buf):
        raise FormatError("truncated payload")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(dims)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True), dtype=arr.dtype.newbyteorder("=")), end


def save_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor payload")
    return t


def zeros_like_params(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) for p in params]
