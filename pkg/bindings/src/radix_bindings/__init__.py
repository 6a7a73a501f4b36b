"""Array-level bindings for prefix-deduplication plans and row operators.

This package is a thin boundary layer: plans are plain dicts of contiguous
numpy arrays, and every operation delegates to the radix_compact library.
No planning logic lives here; an import-time check below pins the planner
to the library's implementation so the two can never drift apart.

Arrays cross the boundary as raw contiguous buffers (u32 indices, f32/f64
matrices) with explicit dtype checks and no serialization on the hot path.
Plan construction releases the GIL inside the library's compiled kernel,
so a host scheduler thread can overlap plan builds with compute.

Errors propagate as the library's typed exceptions (all subclasses of
``radix_compact.errors.RadixCompactError``), carrying their original
class names.
"""

from __future__ import annotations

import numpy as np

import radix_compact.ops as _ops
import radix_compact.trie as _trie
from radix_compact.ragged import RaggedBatch

__all__ = ["compute_plan", "gather_rows", "scatter_rows", "load_plan", "save_plan"]
__version__ = "0.1.0"

# single source of truth: this module holds no planner of its own
_plan_builder = _trie.build_plan_auto
assert _plan_builder is _trie.build_plan_auto


def _plan_to_dict(plan) -> dict:
    return {
        "gather": np.ascontiguousarray(plan.gather_indices, dtype=np.uint32),
        "scatter": np.ascontiguousarray(plan.scatter_indices, dtype=np.uint32),
        "compact_positions": np.ascontiguousarray(
            plan.compact_positions, dtype=np.uint32
        ),
        "n_original": int(plan.n_original),
        "n_compact": int(plan.n_compact),
        "gamma": float(plan.gamma),
    }


def _dict_to_plan(plan_dict: dict):
    return _trie.CompactionPlan(
        gather_indices=np.asarray(plan_dict["gather"], dtype=np.uint32),
        scatter_indices=np.asarray(plan_dict["scatter"], dtype=np.uint32),
        compact_positions=np.asarray(plan_dict["compact_positions"], dtype=np.uint32),
        n_original=int(plan_dict["n_original"]),
        n_compact=int(plan_dict["n_compact"]),
    )


def compute_plan(token_ids, position_ids, cu_seqlens) -> dict:
    """Build a compaction plan for a packed batch.

    Returns a dict with ``gather`` (u32, length N'), ``scatter`` (u32,
    length N), ``compact_positions`` (u32, length N'), ``n_original``,
    ``n_compact`` and ``gamma``.
    """
    batch = RaggedBatch(
        token_ids=np.asarray(token_ids),
        position_ids=np.asarray(position_ids),
        cu_seqlens=np.asarray(cu_seqlens, dtype=np.int64),
    )
    return _plan_to_dict(_plan_builder(batch))


_FLOAT_DTYPES = (np.float32, np.float64)


def _check_matrix(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype not in _FLOAT_DTYPES:
        raise TypeError(f"matrix dtype must be float32 or float64, got {x.dtype}")
    return np.ascontiguousarray(x)


def gather_rows(x, gather_indices) -> np.ndarray:
    """out[j, :] = x[gather[j], :]; bit-identical to the library operator."""
    return _ops.gather_rows(_check_matrix(x), np.asarray(gather_indices))


def scatter_rows(y, scatter_indices) -> np.ndarray:
    """out[i, :] = y[scatter[i], :]; bit-identical to the library operator."""
    return _ops.scatter_rows(_check_matrix(y), np.asarray(scatter_indices))


def save_plan(plan_dict: dict, path) -> None:
    """Write the packed binary plan format (the library's on-disk layout)."""
    _trie.save_plan(_dict_to_plan(plan_dict), path, binary=True)


def load_plan(path) -> dict:
    """Read a plan in either the binary or the JSON on-disk format."""
    return _plan_to_dict(_trie.load_plan(path))
