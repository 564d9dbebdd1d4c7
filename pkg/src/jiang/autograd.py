"""Dense tensors with reverse-mode automatic differentiation.

Operations record themselves on a per-run tape (creation order is the
topological order); ``backward`` walks the tape in reverse once and
consumes it. The tape is rebuilt on every forward pass. FP64 is used by
tests and oracles, FP32 by training runs.

Single-threaded by design: graph construction and backward must happen on
one thread. Tensors detached from the tape are immutable-after-creation
and safe to share across threads.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NumericError", "GraphError", "no_grad",
    "set_debug_checks", "tape", "record_op", "elementwise", "add", "sub", "mul",
    "div", "scale", "exp", "power", "silu", "matmul", "transpose", "reshape",
    "sum_", "mean", "gather_rows", "softmax", "cross_entropy", "backward",
    "grad_check", "relative_error", "write_tensor", "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value or an ill-conditioned operand was produced."""


class GraphError(RuntimeError):
    """Autograd tape misuse (non-scalar backward, consumed graph, ...)."""


# debug mode asserts finiteness after every op; release checks only losses
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class Tape:
    """Ordered record of operations; creation order == topological order."""

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self.enabled = True

    def record(self, inputs, output, backward_fn):
        self.nodes.append((inputs, output, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()


_tape = Tape()


def tape() -> Tape:
    return _tape


class no_grad:
    """Context manager disabling tape recording (inference / oracles)."""

    def __enter__(self):
        self._prev = _tape.enabled
        _tape.enabled = False
        return self

    def __exit__(self, *exc):
        _tape.enabled = self._prev
        return False


class Tensor:
    """Dense row-major float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; b may be a Tensor, scalar, or trailing-broadcastable
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_check(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _make_output(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _debug_checks:
        _finite_check(out.data, op)
    if _tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.record(inputs, out, backward_fn)
    return out


def record_op(op_name: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Register a custom differentiable op on the tape.

    ``backward_fn(out_grad)`` must return one gradient array per input
    (``None`` for inputs that need no gradient).
    """
    inputs = tuple(inputs)

    def _propagate(g):
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is not None:
                _accumulate(t, gi)

    return _make_output(op_name, out_data, inputs, _propagate)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast to reach ``g.shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if gs != ss)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _check_broadcast_into(a: Tensor, b: Tensor, op: str) -> None:
    """b must broadcast into a's shape: equal, scalar, or a trailing suffix
    (with size-1 axes allowed). Full two-sided broadcasting is out of scope."""
    try:
        result = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        result = None
    if result != a.shape:
        raise ShapeError(f"{op}: shape {b.shape} does not broadcast into {a.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast_into(a, b, "add")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make_output("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast_into(a, b, "sub")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make_output("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast_into(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        _accumulate(a, g * bd)
        _accumulate(b, _unbroadcast(g * ad, b.shape))

    return _make_output("mul", ad * bd, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast_into(a, b, "div")
    if np.abs(b.data).min() < 1e-30:
        raise NumericError("div: denominator magnitude below 1e-30")
    ad, bd = a.data, b.data

    def bwd(g):
        _accumulate(a, g / bd)
        _accumulate(b, _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _make_output("div", ad / bd, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c)

    return _make_output("scale", a.data * c, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)

    return _make_output("exp", out_data, (a,), bwd)


def power(a: Tensor, p: float) -> Tensor:
    """a**p for a scalar exponent (a > 0 required for non-integer p)."""
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def bwd(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make_output("power", out_data, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); the gate nonlinearity of the FFN."""
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bwd(g):
        _accumulate(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make_output("silu", out_data, (a,), bwd)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}
_UNARY = {"silu": silu, "exp": exp}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Pointwise dispatch over {add, sub, mul, div, silu, exp, scale}."""
    if op in _UNARY:
        if b is not None:
            raise ShapeError(f"elementwise: {op} takes a single operand")
        return _UNARY[op](a)
    if op in _ELEMENTWISE:
        if b is None:
            raise ShapeError(f"elementwise: {op} needs a second operand")
        return _ELEMENTWISE[op](a, b)
    raise ValueError(f"elementwise: unknown op {op!r}")


# ---------------------------------------------------------------------------
# structural ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or equal-batch 3-D stacks."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        _accumulate(a, g @ bd.swapaxes(-1, -2))
        _accumulate(b, ad.swapaxes(-1, -2) @ g)

    return _make_output("matmul", ad @ bd, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inv)))

    return _make_output("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def bwd(g):
        _accumulate(a, g.reshape(old))

    return _make_output("reshape", a.data.reshape(shape), (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _make_output("sum", out_data, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding); backward scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"gather_rows: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: id out of range for table of {table.shape[0]} rows")

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accumulate(table, gt)

    return _make_output("gather_rows", table.data[ids], (table,), bwd)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; masked entries get probability exactly 0.

    ``mask`` is a boolean array broadcastable to x (True = keep). Every
    slice along ``axis`` must keep at least one entry.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is None:
        m = z.max(axis=axis, keepdims=True)
        e = np.exp(z - m)
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask_b.any(axis=axis).all():
            raise ShapeError("softmax: a fully masked slice has no distribution")
        masked = np.where(mask_b, z, -np.inf)
        m = masked.max(axis=axis, keepdims=True)
        e = np.exp(z - m)
        e = np.where(mask_b, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / s

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _make_output("softmax", y, (x,), bwd)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax probability of targets over kept positions."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [T, V], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    t_count, vocab = logits.shape
    if targets.shape != (t_count,):
        raise ShapeError(f"cross_entropy: need {t_count} targets, got {targets.shape}")
    keep = targets != ignore_index
    bad = keep & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise ShapeError(f"cross_entropy: target id {targets[bad][0]} outside [0, {vocab})")
    n_valid = int(keep.sum())
    if n_valid == 0:
        raise ShapeError("cross_entropy: all positions ignored")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    safe_t = np.where(keep, targets, 0)
    nll = lse - z[np.arange(t_count), safe_t]
    loss = np.asarray(nll[keep].mean(), dtype=z.dtype)
    _finite_check(loss, "cross_entropy")  # loss is always checked

    def bwd(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(t_count), safe_t] -= 1.0
        p[~keep] = 0.0
        _accumulate(logits, (float(np.reshape(g, ())) / n_valid) * p)

    return _make_output("cross_entropy", loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward and checking

def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every requires_grad ancestor.

    The tape is consumed: a second backward needs a fresh forward pass.
    Gradients sum across calls and across repeated uses of a tensor.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to a recorded graph")
    loss.grad = np.ones_like(loss.data)
    for inputs, output, backward_fn in reversed(_tape.nodes):
        if output.grad is None:
            continue
        backward_fn(output.grad)
    _tape.reset()


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    sample_cutoff: int = 64,
    n_samples: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error between analytic grad and central differences.

    All coordinates are probed below ``sample_cutoff`` elements, a seeded
    sample above it. ``f`` must be deterministic; this is verified by a
    repeated evaluation.
    """
    with no_grad():
        y1 = f(x).item()
        y2 = f(x).item()
    if y1 != y2:
        raise NumericError("grad_check: f is not deterministic")

    x.zero_grad()
    was_grad = x.requires_grad
    x.requires_grad = True
    loss = f(x)
    backward(loss)
    analytic = x.grad.reshape(-1).copy()
    x.requires_grad = was_grad
    x.zero_grad()

    flat = x.data.reshape(-1)
    if flat.size <= sample_cutoff:
        coords: Iterable[int] = range(flat.size)
    else:
        coords = np.random.default_rng(seed).choice(flat.size, size=n_samples, replace=False)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst


def relative_error(a: float, b: float, floor: float = 1e-4) -> float:
    """|a-b| scaled by max(|a|, |b|, floor); floor keeps tiny grads absolute."""
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# tensor serialization (versioned binary blob used by checkpoints)

TENSOR_MAGIC = b"JTEN"
TENSOR_VERSION = 1


def write_tensor(fh, arr: np.ndarray) -> None:
    """magic, u32 version, u32 rank, u64 dims, little-endian FP32 payload."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
