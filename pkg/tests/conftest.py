"""Shared helpers: a brute-force dedup oracle and random batch generators."""

import numpy as np
import pytest

from radix_compact import RaggedBatch, default_positions


def prefix_path_partition(batch):
    """Independent oracle: group original indices by their full
    (token, position) path from the sequence start.

    Returns (groups, first_occurrences) where groups is a list of index
    lists in first-visit order.
    """
    groups = {}
    order = []
    cu = batch.cu_seqlens
    for s in range(batch.num_sequences):
        path = ()
        for i in range(int(cu[s]), int(cu[s + 1])):
            path = path + ((int(batch.token_ids[i]), int(batch.position_ids[i])),)
            if path not in groups:
                groups[path] = []
                order.append(path)
            groups[path].append(i)
    partition = [groups[p] for p in order]
    firsts = [g[0] for g in partition]
    return partition, firsts


def plan_partition(plan):
    """The partition of [0, N) induced by scatter_indices."""
    groups = [[] for _ in range(plan.n_compact)]
    for i, k in enumerate(plan.scatter_indices):
        groups[int(k)].append(i)
    return groups


def random_small_batch(rng, max_b=8, max_len=16, alphabet=4):
    b = int(rng.integers(1, max_b + 1))
    lengths = rng.integers(1, max_len + 1, size=b)
    tokens = rng.integers(0, alphabet, size=int(lengths.sum())).astype(np.uint32)
    cu = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    return RaggedBatch(tokens, default_positions(cu), cu)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
