"""Deterministic train/val/test partitioning shared by the generator and the dataset stage."""
from __future__ import annotations

import numpy as np

SPLITS = ("train", "val", "test")


def partition_ids(ids, ratios=(0.8, 0.1, 0.1), seed=0):
    """Shuffle ``ids`` with ``seed`` and cut them by ``ratios``.

    The result depends only on the sorted id set and the seed, so callers may
    pass ids in any order.
    """
    ids = sorted(ids)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios!r}")
    total = float(sum(ratios))
    if total <= 0:
        raise ValueError("ratios must not all be zero")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    n_train = n - n_val - n_test
    out = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            out[ids[idx]] = "train"
        elif pos < n_train + n_val:
            out[ids[idx]] = "val"
        else:
            out[ids[idx]] = "test"
    return out
