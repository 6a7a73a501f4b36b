"""Ragged batch data model: flat token/position arrays plus cumulative offsets.

A batch of B variable-length sequences is packed without padding into a
single flat array of N tokens; ``cu_seqlens`` (length B+1) marks sequence
boundaries. All downstream modules consume this layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundaryMismatch, MismatchedLengths, NonMonotoneOffsets, OverflowId

_U32_MAX = 2**32 - 1


@dataclass(frozen=True)
class RaggedBatch:
    """Immutable packed batch; arrays are uint32 (ids) and int64 (offsets)."""

    token_ids: np.ndarray
    position_ids: np.ndarray
    cu_seqlens: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "token_ids", _as_id_array(self.token_ids))
        object.__setattr__(self, "position_ids", _as_id_array(self.position_ids))
        cu = np.ascontiguousarray(np.asarray(self.cu_seqlens, dtype=np.int64))
        cu.flags.writeable = False
        object.__setattr__(self, "cu_seqlens", cu)

    @property
    def num_tokens(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def num_sequences(self) -> int:
        return int(self.cu_seqlens.shape[0]) - 1

    def seq_lengths(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)


@dataclass(frozen=True)
class BatchStats:
    total_tokens: int
    num_sequences: int
    max_seq_len: int = 0
    min_seq_len: int = 0


def _as_id_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size and (arr.dtype.kind not in "iu" or arr.min() < 0 or arr.max() > _U32_MAX):
        # validate_batch reports this properly; here we only refuse lossy casts
        arr = np.asarray(values, dtype=np.int64)
        out = np.ascontiguousarray(arr)
        out.flags.writeable = False
        return out
    out = np.ascontiguousarray(arr, dtype=np.uint32)
    out.flags.writeable = False
    return out


def validate_batch(batch: RaggedBatch, allow_empty: bool = False) -> BatchStats:
    """Check every RaggedBatch invariant; return summary stats on success.

    Empty sequences are rejected unless ``allow_empty`` is set: trie
    construction silently skips them, which usually indicates a caller bug.
    """
    tokens, positions, cu = batch.token_ids, batch.position_ids, batch.cu_seqlens
    if tokens.shape[0] != positions.shape[0]:
        raise MismatchedLengths(
            f"{tokens.shape[0]} token ids vs {positions.shape[0]} position ids"
        )
    n = tokens.shape[0]
    if cu.shape[0] < 1 or cu[0] != 0:
        raise BoundaryMismatch("cu_seqlens must start with 0")
    diffs = np.diff(cu)
    if diffs.size and diffs.min() < 0:
        raise NonMonotoneOffsets(f"cu_seqlens decreases at {int(np.argmax(diffs < 0))}")
    if diffs.size and not allow_empty and diffs.min() == 0:
        raise NonMonotoneOffsets("empty sequence (pass allow_empty to accept)")
    if cu[-1] != n:
        raise BoundaryMismatch(f"last offset {int(cu[-1])} != token count {n}")
    for name, arr in (("token", tokens), ("position", positions)):
        if arr.size and arr.dtype != np.uint32:
            lo, hi = int(arr.min()), int(arr.max())
            if lo < 0 or hi > _U32_MAX:
                raise OverflowId(f"{name} id outside [0, 2^32): {lo if lo < 0 else hi}")
    b = cu.shape[0] - 1
    if b == 0:
        return BatchStats(total_tokens=n, num_sequences=b)
    return BatchStats(
        total_tokens=n,
        num_sequences=b,
        max_seq_len=int(diffs.max()) if diffs.size else 0,
        min_seq_len=int(diffs.min()) if diffs.size else 0,
    )


def default_positions(cu_seqlens) -> np.ndarray:
    """Positions 0..L_s-1 within each sequence, in packed order."""
    cu = np.asarray(cu_seqlens, dtype=np.int64)
    if cu.shape[0] < 1 or cu[0] != 0:
        raise BoundaryMismatch("cu_seqlens must start with 0")
    if np.any(np.diff(cu) < 0):
        raise NonMonotoneOffsets("cu_seqlens decreases")
    n = int(cu[-1])
    if n == 0:
        return np.zeros(0, dtype=np.uint32)
    # global arange minus each token's sequence start
    starts = np.repeat(cu[:-1], np.diff(cu))
    return (np.arange(n, dtype=np.int64) - starts).astype(np.uint32)


def batch_from_json(obj: dict) -> RaggedBatch:
    """Build a batch from the JSON wire format; position_ids are optional."""
    cu = obj["cu_seqlens"]
    positions = obj.get("position_ids")
    if positions is None:
        positions = default_positions(cu)
    return RaggedBatch(
        token_ids=np.asarray(obj["token_ids"]),
        position_ids=np.asarray(positions),
        cu_seqlens=np.asarray(cu),
    )


def batch_to_json(batch: RaggedBatch) -> dict:
    return {
        "token_ids": batch.token_ids.tolist(),
        "position_ids": batch.position_ids.tolist(),
        "cu_seqlens": batch.cu_seqlens.tolist(),
    }


def load_batch(path) -> RaggedBatch:
    with open(path) as f:
        return batch_from_json(json.load(f))


def save_batch(batch: RaggedBatch, path) -> None:
    with open(path, "w") as f:
        json.dump(batch_to_json(batch), f)
