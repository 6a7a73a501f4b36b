"""Prefix-trie compaction: dedupe tokens that share identical causal history.

Two packed tokens map to the same compact row iff the full (token, position)
path from their sequence start is identical. The trie is built once per
batch on the CPU and discarded; only the gather/scatter index maps survive.

Node identity is the pair (parent node, key) with key = (position << 32)
XOR token, which is injective for 32-bit ids. The hot loop is compiled with
numba and releases the GIL so a scheduler thread can overlap plan builds
with compute.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numba import njit, types
from numba.typed import Dict as NumbaDict

from .errors import CapacityExceeded, EmptyPlan
from .ragged import RaggedBatch, validate_batch

# Linear child scan up to this fanout; larger nodes fall back to a hash map.
_FANOUT_LIMIT = 8

# key/value types for the big-fanout hash map (built outside the jit body;
# numba cannot construct type objects in nopython mode)
_PK_TYPE = types.UniTuple(types.int64, 2)
_NODE_TYPE = types.int64


@dataclass(frozen=True)
class CompactionPlan:
    """Index maps between the original N-row layout and the compact N' rows.

    ``gather_indices`` (length N', or the padded length after pad_plan) maps
    compact -> original, picking the first occurrence of each unique node in
    batch order. ``scatter_indices`` (length N) maps original -> compact.
    ``compact_positions`` carries the position ids of the representatives.
    """

    gather_indices: np.ndarray
    scatter_indices: np.ndarray
    compact_positions: np.ndarray
    n_original: int
    n_compact: int

    def __post_init__(self):
        for name in ("gather_indices", "scatter_indices", "compact_positions"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.uint32)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_padded(self) -> int:
        return int(self.gather_indices.shape[0])

    @property
    def gamma(self) -> float:
        return self.n_compact / self.n_original if self.n_original else 1.0

    @property
    def gamma_exact(self) -> Fraction:
        if not self.n_original:
            return Fraction(1)
        return Fraction(self.n_compact, self.n_original)


@njit(cache=True, nogil=True)
def _build_indices(tokens, positions, cu, gather, scatter):  # pragma: no cover
    n_nodes = 1  # slot 0 is the root
    cap = tokens.shape[0] + 1
    node_key = np.empty(cap, dtype=np.uint64)
    first_child = np.full(cap, -1, dtype=np.int64)
    next_sibling = np.full(cap, -1, dtype=np.int64)
    child_count = np.zeros(cap, dtype=np.int64)
    # (parent, key) -> node, populated only for nodes whose fanout exceeds
    # the linear-scan limit
    big = NumbaDict.empty(key_type=_PK_TYPE, value_type=_NODE_TYPE)
    for s in range(cu.shape[0] - 1):
        parent = np.int64(0)
        for i in range(cu[s], cu[s + 1]):
            key = (np.uint64(positions[i]) << np.uint64(32)) ^ np.uint64(tokens[i])
            found = np.int64(-1)
            if child_count[parent] > _FANOUT_LIMIT:
                pk = (parent, np.int64(key))
                if pk in big:
                    found = big[pk]
            else:
                c = first_child[parent]
                while c != -1:
                    if node_key[c] == key:
                        found = c
                        break
                    c = next_sibling[c]
            if found == -1:
                idx = np.int64(n_nodes)
                n_nodes += 1
                node_key[idx] = key
                next_sibling[idx] = first_child[parent]
                first_child[parent] = idx
                child_count[parent] += 1
                if child_count[parent] == _FANOUT_LIMIT + 1:
                    # migrate this node's children to the hash map
                    c = first_child[parent]
                    while c != -1:
                        big[(parent, np.int64(node_key[c]))] = c
                        c = next_sibling[c]
                elif child_count[parent] > _FANOUT_LIMIT + 1:
                    big[(parent, np.int64(key))] = idx
                # compact index == node index - 1: creation orders coincide
                gather[idx - 1] = i
                scatter[i] = idx - 1
                parent = idx
            else:
                scatter[i] = found - 1
                parent = found
    return n_nodes - 1


def build_plan(batch: RaggedBatch, allow_empty: bool = False) -> CompactionPlan:
    """Construct the compaction plan by a single trie traversal.

    Sequences are visited in batch order, tokens left to right; new nodes
    receive compact indices in creation order, so gather_indices is strictly
    increasing.
    """
    validate_batch(batch, allow_empty=allow_empty)
    n = batch.num_tokens
    if n >= 2**32:
        raise CapacityExceeded(f"{n} tokens exceed 32-bit index range")
    tokens = np.ascontiguousarray(batch.token_ids, dtype=np.uint32)
    positions = np.ascontiguousarray(batch.position_ids, dtype=np.uint32)
    gather = np.empty(n, dtype=np.uint32)
    scatter = np.empty(n, dtype=np.uint32)
    n_compact = _build_indices(tokens, positions, batch.cu_seqlens, gather, scatter)
    gather = gather[:n_compact].copy()
    return CompactionPlan(
        gather_indices=gather,
        scatter_indices=scatter,
        compact_positions=positions[gather],
        n_original=n,
        n_compact=int(n_compact),
    )


def build_plan_fast_paths(batch: RaggedBatch) -> CompactionPlan | None:
    """Plans for trivial batches without touching the trie.

    Returns None when no fast path applies; the result is otherwise
    indistinguishable from build_plan's output.
    """
    validate_batch(batch)
    b = batch.num_sequences
    n = batch.num_tokens
    if b == 1:
        idx = np.arange(n, dtype=np.uint32)
        return CompactionPlan(
            gather_indices=idx,
            scatter_indices=idx,
            compact_positions=np.asarray(batch.position_ids, dtype=np.uint32),
            n_original=n,
            n_compact=n,
        )
    if b > 1:
        lengths = batch.seq_lengths()
        length = int(lengths[0])
        if np.all(lengths == length):
            # byte-wise comparison against the first sequence; a false
            # positive here would corrupt results, so no hashing
            first_t = batch.token_ids[:length]
            first_p = batch.position_ids[:length]
            t = batch.token_ids.reshape(b, length)
            p = batch.position_ids.reshape(b, length)
            if np.all(t == first_t) and np.all(p == first_p):
                idx = np.arange(length, dtype=np.uint32)
                return CompactionPlan(
                    gather_indices=idx,
                    scatter_indices=np.tile(idx, b),
                    compact_positions=np.asarray(first_p, dtype=np.uint32),
                    n_original=n,
                    n_compact=length,
                )
    return None


def build_plan_auto(batch: RaggedBatch) -> CompactionPlan:
    """Fast paths first, full trie otherwise."""
    plan = build_plan_fast_paths(batch)
    return plan if plan is not None else build_plan(batch)


def should_enable(plan: CompactionPlan, threshold) -> bool:
    """Gate the compact path: enabled iff gamma <= threshold (inclusive).

    A threshold of 0.95 therefore requires at least 5% of tokens to
    deduplicate; threshold 0 disables compaction for every non-empty batch.
    """
    return plan.gamma_exact <= Fraction(threshold).limit_denominator(10**9)


def pad_plan(plan: CompactionPlan, bucket_size: int) -> CompactionPlan:
    """Pad the compact row count up to a multiple of bucket_size.

    Padding repeats the first gather entry; scatter_indices never reference
    the padded rows, so their outputs are discarded by construction. gamma
    keeps reporting the unpadded n_compact.
    """
    if bucket_size < 1:
        raise ValueError("bucket_size must be >= 1")
    if plan.n_compact == 0:
        raise EmptyPlan("cannot pad a plan with zero compact tokens")
    target = -(-plan.n_compact // bucket_size) * bucket_size
    if target == plan.n_padded:
        return plan
    pad = target - plan.n_compact
    core_gather = plan.gather_indices[: plan.n_compact]
    core_pos = plan.compact_positions[: plan.n_compact]
    gather = np.concatenate(
        [core_gather, np.full(pad, core_gather[0], dtype=np.uint32)]
    )
    positions = np.concatenate([core_pos, np.full(pad, core_pos[0], dtype=np.uint32)])
    return CompactionPlan(
        gather_indices=gather,
        scatter_indices=plan.scatter_indices,
        compact_positions=positions,
        n_original=plan.n_original,
        n_compact=plan.n_compact,
    )


# --- serialization ---

_MAGIC = b"RDXP"
_VERSION = 1


def plan_to_json(plan: CompactionPlan) -> dict:
    return {
        "gather": plan.gather_indices.tolist(),
        "scatter": plan.scatter_indices.tolist(),
        "compact_positions": plan.compact_positions.tolist(),
        "n_original": plan.n_original,
        "n_compact": plan.n_compact,
    }


def plan_from_json(obj: dict) -> CompactionPlan:
    return CompactionPlan(
        gather_indices=np.asarray(obj["gather"], dtype=np.uint32),
        scatter_indices=np.asarray(obj["scatter"], dtype=np.uint32),
        compact_positions=np.asarray(obj["compact_positions"], dtype=np.uint32),
        n_original=int(obj["n_original"]),
        n_compact=int(obj["n_compact"]),
    )


def plan_to_bytes(plan: CompactionPlan) -> bytes:
    """Packed little-endian form: magic, version u16, N u64, N' u64, then
    gather[N'], compact_positions[N'], scatter[N] as u32 arrays.

    Padding is a runtime transform and is not serialized.
    """
    head = _MAGIC + struct.pack("<HQQ", _VERSION, plan.n_original, plan.n_compact)
    gather = plan.gather_indices[: plan.n_compact]
    pos = plan.compact_positions[: plan.n_compact]
    return (
        head
        + gather.astype("<u4").tobytes()
        + pos.astype("<u4").tobytes()
        + plan.scatter_indices.astype("<u4").tobytes()
    )


def plan_from_bytes(data: bytes) -> CompactionPlan:
    if data[:4] != _MAGIC:
        raise ValueError("bad magic, not a plan file")
    version, n, n_compact = struct.unpack_from("<HQQ", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported plan version {version}")
    off = 4 + 2 + 16
    gather = np.frombuffer(data, dtype="<u4", count=n_compact, offset=off)
    off += 4 * n_compact
    pos = np.frombuffer(data, dtype="<u4", count=n_compact, offset=off)
    off += 4 * n_compact
    scatter = np.frombuffer(data, dtype="<u4", count=n, offset=off)
    return CompactionPlan(
        gather_indices=gather,
        scatter_indices=scatter,
        compact_positions=pos,
        n_original=int(n),
        n_compact=int(n_compact),
    )


def save_plan(plan: CompactionPlan, path, binary: bool = False) -> None:
    if binary:
        with open(path, "wb") as f:
            f.write(plan_to_bytes(plan))
    else:
        with open(path, "w") as f:
            json.dump(plan_to_json(plan), f)


def load_plan(path) -> CompactionPlan:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] == _MAGIC:
        return plan_from_bytes(data)
    return plan_from_json(json.loads(data.decode()))
