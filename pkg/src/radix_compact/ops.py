"""Row gather/scatter operators on dense matrices, with exact adjoints.

The forward ops are pure row copies and therefore batch-invariant: each
output row depends only on one input row. The backward of a row gather is
a scatter-add (duplicated indices accumulate), applied in ascending index
order so gradients are bit-reproducible.

An optional row-parallel mode splits the row range across threads; forward
outputs stay bit-exact (copies commute) and backward stays deterministic by
accumulating into per-thread buffers that are reduced in a fixed order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import IndexOutOfRange, ShapeMismatch


def _num_threads(num_threads: int | None) -> int:
    if num_threads is not None:
        return max(1, int(num_threads))
    return max(1, int(os.environ.get("RADIX_COMPACT_THREADS", "1")))


def _check_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def _check_indices(indices, limit: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch(f"indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise IndexOutOfRange(f"index outside [0, {limit})")
    return idx


def _chunks(n: int, parts: int):
    step = -(-n // parts)
    return [(lo, min(lo + step, n)) for lo in range(0, n, step)]


def gather_rows(x, gather_indices, num_threads: int | None = None) -> np.ndarray:
    """out[j, :] = x[gather_indices[j], :], a bit-exact row copy."""
    x = _check_matrix(x)
    idx = _check_indices(gather_indices, x.shape[0])
    threads = _num_threads(num_threads)
    if threads == 1 or idx.size < 2 * threads:
        return x[idx]
    out = np.empty((idx.size, x.shape[1]), dtype=x.dtype)
    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(lambda r: np.take(x, idx[r[0] : r[1]], axis=0, out=out[r[0] : r[1]]),
                      _chunks(idx.size, threads)))
    return out


def scatter_rows(y, scatter_indices, num_threads: int | None = None) -> np.ndarray:
    """out[i, :] = y[scatter_indices[i], :], broadcasting compact rows back."""
    return gather_rows(y, scatter_indices, num_threads=num_threads)


def gather_rows_backward(
    grad_out, gather_indices, n: int, num_threads: int | None = None
) -> np.ndarray:
    """Adjoint of gather_rows: zero-init scatter-add into n rows.

    out[gather_indices[j], :] += grad_out[j, :] with ascending-j
    accumulation when indices repeat.
    """
    grad_out = _check_matrix(grad_out)
    idx = _check_indices(gather_indices, n)
    if idx.size != grad_out.shape[0]:
        raise ShapeMismatch(
            f"{idx.size} indices vs {grad_out.shape[0]} gradient rows"
        )
    threads = _num_threads(num_threads)
    out = np.zeros((n, grad_out.shape[1]), dtype=grad_out.dtype)
    if threads == 1 or idx.size < 2 * threads:
        np.add.at(out, idx, grad_out)
        return out
    spans = _chunks(idx.size, threads)
    partials = [np.zeros_like(out) for _ in spans]

    def accumulate(i):
        lo, hi = spans[i]
        np.add.at(partials[i], idx[lo:hi], grad_out[lo:hi])

    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(accumulate, range(len(spans))))
    for part in partials:  # fixed reduction order keeps results deterministic
        out += part
    return out


def scatter_rows_backward(
    grad_out, scatter_indices, n_compact: int, num_threads: int | None = None
) -> np.ndarray:
    """Adjoint of scatter_rows: sum duplicated originals into their
    compact representative, ascending-i accumulation."""
    return gather_rows_backward(grad_out, scatter_indices, n_compact, num_threads=num_threads)
