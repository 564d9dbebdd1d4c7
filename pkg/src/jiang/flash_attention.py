"""Memory-bounded tiled attention with an online softmax.

Numerically equivalent to the naive path but never materializes the
T x T score matrix: each query block streams over key/value blocks while
a running (max, denominator, weighted accumulator) state is folded in.
Peak auxiliary storage is one block of scores plus the per-row states.

A compiled kernel (``jiang._tiled_kernel``) is used when the extension
built; a pure-numpy implementation is the fallback. Both allocate their
scratch through the tracker below so tests can assert the memory claim.

Pure function of its inputs: safe to parallelize across heads and query
blocks; ``online_softmax_merge`` is the reduction contract for any
parallel schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    from . import _tiled_kernel

    HAVE_COMPILED = True
except ImportError:  # extension not built; numpy fallback only
    _tiled_kernel = None
    HAVE_COMPILED = False


# ---------------------------------------------------------------------------
# scratch-allocation tracking

_tracker: "AllocationTracker | None" = None


class AllocationTracker:
    """Records every scratch buffer the attention paths allocate."""

    def __init__(self):
        self.events: list[tuple[str, tuple[int, ...]]] = []

    def __enter__(self):
        global _tracker
        self._prev = _tracker
        _tracker = self
        return self

    def __exit__(self, *exc):
        global _tracker
        _tracker = self._prev
        return False

    def max_elements(self, tag: str) -> int:
        sizes = [int(np.prod(s)) for t, s in self.events if t == tag]
        return max(sizes, default=0)


def _alloc(shape, dtype, tag: str) -> np.ndarray:
    if _tracker is not None:
        _tracker.events.append((tag, tuple(shape)))
    return np.empty(shape, dtype=dtype)


# ---------------------------------------------------------------------------
# online softmax state

@dataclass
class SoftmaxState:
    """Running softmax over one query row: max ``m``, denominator ``l``
    (sum of exp shifted by m), and the weighted value accumulator.
    ``acc / l`` is the attention output over everything folded in so far."""

    m: float
    l: float
    acc: np.ndarray

    @classmethod
    def empty(cls, d_head: int, dtype=np.float64) -> "SoftmaxState":
        return cls(m=-math.inf, l=0.0, acc=np.zeros(d_head, dtype=dtype))

    @classmethod
    def from_scores(cls, scores, values) -> "SoftmaxState":
        """State equivalent to softmax over the given key scores/values."""
        scores = np.asarray(scores, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        m = float(scores.max())
        e = np.exp(scores - m)
        return cls(m=m, l=float(e.sum()), acc=e @ values)

    def output(self) -> np.ndarray:
        return self.acc / self.l


def online_softmax_merge(a: SoftmaxState, b: SoftmaxState) -> SoftmaxState:
    """Fold two partial states; associative and commutative up to rounding."""
    if a.l == 0.0:
        return SoftmaxState(b.m, b.l, b.acc.copy())
    if b.l == 0.0:
        return SoftmaxState(a.m, a.l, a.acc.copy())
    m = max(a.m, b.m)
    wa, wb = math.exp(a.m - m), math.exp(b.m - m)
    return SoftmaxState(m=m, l=a.l * wa + b.l * wb, acc=a.acc * wa + b.acc * wb)


# ---------------------------------------------------------------------------
# kernels

@dataclass
class TileConfig:
    block_q: int = 64
    block_kv: int = 64

    def clipped(self, t_count: int) -> "TileConfig":
        if self.block_q < 1 or self.block_kv < 1:
            raise ValueError(f"tile blocks must be >= 1, got {self}")
        return TileConfig(min(self.block_q, t_count), min(self.block_kv, t_count))


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    causal: bool = False) -> np.ndarray:
    """Reference path: materializes the full [H, T, T] score matrix."""
    q, k, v = (np.asarray(a) for a in (q, k, v))
    heads, t_count, d_head = q.shape
    scores = _alloc((heads, t_count, t_count), q.dtype, "scores")
    np.matmul(q, k.swapaxes(-1, -2), out=scores)
    scores *= 1.0 / math.sqrt(d_head)
    if causal:
        scores[:, ~np.tril(np.ones((t_count, t_count), dtype=bool))] = -np.inf
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e @ v


def _tiled_numpy(q, k, v, causal, block_q, block_kv) -> np.ndarray:
    heads, t_count, d_head = q.shape
    out = _alloc((heads, t_count, d_head), q.dtype, "out")
    scores = _alloc((block_q, block_kv), q.dtype, "scores")
    m = _alloc((block_q,), q.dtype, "state")
    l = _alloc((block_q,), q.dtype, "state")
    acc = _alloc((block_q, d_head), q.dtype, "state")
    inv_scale = 1.0 / math.sqrt(d_head)

    for h in range(heads):
        for q0 in range(0, t_count, block_q):
            bq = min(block_q, t_count - q0)
            qb = q[h, q0:q0 + bq]
            mb, lb, accb = m[:bq], l[:bq], acc[:bq]
            mb.fill(-np.inf)
            lb.fill(0.0)
            accb.fill(0.0)
            kv_stop = min(t_count, q0 + bq) if causal else t_count
            for k0 in range(0, kv_stop, block_kv):
                bk = min(block_kv, kv_stop - k0)
                s = scores[:bq, :bk]
                np.matmul(qb, k[h, k0:k0 + bk].T, out=s)
                s *= inv_scale
                if causal and k0 + bk - 1 > q0:
                    rows = q0 + np.arange(bq)[:, None]
                    cols = k0 + np.arange(bk)[None, :]
                    s[cols > rows] = -np.inf
                bm = s.max(axis=1)
                nm = np.maximum(mb, bm)
                safe_nm = np.where(np.isneginf(nm), 0.0, nm)
                p = np.exp(s - safe_nm[:, None])
                alpha = np.where(np.isneginf(mb), 0.0, np.exp(mb - safe_nm))
                lb[:] = alpha * lb + p.sum(axis=1)
                accb[:] = alpha[:, None] * accb + p @ v[h, k0:k0 + bk]
                mb[:] = nm
            out[h, q0:q0 + bq] = accb / lb[:, None]
    return out


def tiled_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    causal: bool = False, tiles: TileConfig | None = None,
                    backend: str = "auto") -> np.ndarray:
    """Same contract as the naive attention; auxiliary memory stays
    O(block_q * block_kv + T * d_head) regardless of sequence length.

    backend: "auto" picks the compiled kernel when available, "python"
    and "compiled" force one path.
    """
    q, k, v = (np.asarray(a) for a in (q, k, v))
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ValueError(f"tiled_attention: shapes {q.shape}, {k.shape}, {v.shape} must match [H,T,D]")
    if q.dtype not in (np.float32, np.float64):
        q, k, v = (a.astype(np.float64) for a in (q, k, v))
    tiles = (tiles or TileConfig()).clipped(q.shape[1])

    if backend == "auto":
        backend = "compiled" if HAVE_COMPILED else "python"
    if backend == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled attention kernel is not available")
        return _tiled_compiled(q, k, v, causal, tiles.block_q, tiles.block_kv)
    if backend == "python":
        return _tiled_numpy(q, k, v, causal, tiles.block_q, tiles.block_kv)
    raise ValueError(f"unknown backend {backend!r}")


def _tiled_compiled(q, k, v, causal, block_q, block_kv) -> np.ndarray:
    heads, t_count, d_head = q.shape
    q = np.ascontiguousarray(q)
    k = np.ascontiguousarray(k)
    v = np.ascontiguousarray(v)
    out = _alloc((heads, t_count, d_head), q.dtype, "out")
    scores = _alloc((block_q, block_kv), q.dtype, "scores")
    m = _alloc((block_q,), q.dtype, "state")
    l = _alloc((block_q,), q.dtype, "state")
    acc = _alloc((block_q, d_head), q.dtype, "state")
    _tiled_kernel.tiled_forward(q, k, v, out, scores, m, l, acc, block_q, block_kv, causal)
    return out


# ---------------------------------------------------------------------------
# memory accounting

def memory_estimate(t_count: int, d_head: int, heads: int,
                    tiles: TileConfig | None = None, elem_size: int = 4) -> dict[str, int]:
    """Auxiliary bytes for the naive score matrix vs the tiled path.

    With a single key/value tile the softmax is one-shot and needs no
    running state, so equal block and sequence sizes give equal estimates.
    """
    if min(t_count, d_head, heads, elem_size) < 1:
        raise ValueError("memory_estimate: sizes must be positive")
    tiles = (tiles or TileConfig()).clipped(t_count)
    naive = heads * t_count * t_count * elem_size
    tiled = heads * tiles.block_q * tiles.block_kv * elem_size
    if tiles.block_kv < t_count:
        tiled += heads * tiles.block_q * (d_head + 2) * elem_size
    return {"naive_bytes": naive, "tiled_bytes": tiled}


__all__ = [
    "SoftmaxState", "TileConfig", "AllocationTracker", "online_softmax_merge",
    "naive_attention", "tiled_attention", "memory_estimate", "HAVE_COMPILED",
]
