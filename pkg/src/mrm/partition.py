"""Contiguous minimax-span partitioning of a sorted timestamp list.

Splits L time-sorted events into at most ``max_groups`` contiguous groups
of at most ``max_group_len`` events while minimizing the largest
within-group time span. Solved exactly: binary search over the discrete
list of pairwise time differences (the optimum is always one of them)
with a greedy left-to-right feasibility check at each threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InfeasiblePartitionError(ValueError):
    """More events than max_groups * max_group_len can hold."""


@dataclass(frozen=True)
class Partition:
    """Contiguous index ranges [start, end) with their time spans."""

    groups: tuple
    spans: tuple
    minimax_span: float

    def __len__(self):
        return len(self.groups)


def _check_sorted(times) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError(f"times must be a non-empty 1-d list, got shape {t.shape}")
    if np.any(np.diff(t) < 0):
        raise ValueError("times must be sorted non-decreasing")
    return t


def candidate_spans(times) -> np.ndarray:
    """All distinct pairwise differences t_j - t_i (j >= i), sorted.

    The optimal minimax span is the span of some contiguous group, i.e. a
    pairwise difference, so searching this list is exact. O(L^2) memory.
    """
    t = _check_sorted(times)
    iu = np.triu_indices(t.size)
    return np.unique(t[iu[1]] - t[iu[0]])


def greedy_feasible(times, threshold: float, max_groups: int, max_group_len: int):
    """Left-to-right greedy grouping at a fixed span threshold.

    Opens a new group whenever adding the next event would push the
    current group past ``threshold`` in span or ``max_group_len`` in size.
    For a fixed threshold this minimizes the number of groups, so the
    partition is feasible iff the resulting count is <= max_groups.
    Returns (feasible, groups) with groups as [start, end) index pairs.
    """
    t = _check_sorted(times)
    groups = []
    start = 0
    for i in range(1, t.size):
        if i - start >= max_group_len or t[i] - t[start] > threshold:
            groups.append((start, i))
            start = i
    groups.append((start, t.size))
    return len(groups) <= max_groups, groups


def optimal_partition(times, max_groups: int, max_group_len: int) -> Partition:
    """Exact minimax-span partition of sorted times.

    Binary search for the smallest candidate span the greedy can satisfy
    with at most max_groups groups; the groups returned are the canonical
    greedy grouping at that threshold, so the result is deterministic.
    """
    if max_groups < 1 or max_group_len < 1:
        raise ValueError("max_groups and max_group_len must be >= 1")
    t = _check_sorted(times)
    if t.size > max_groups * max_group_len:
        raise InfeasiblePartitionError(
            f"{t.size} events cannot fit into {max_groups} groups of "
            f"at most {max_group_len}")
    cands = candidate_spans(t)
    lo, hi = 0, cands.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        ok, _ = greedy_feasible(t, cands[mid], max_groups, max_group_len)
        if ok:
            hi = mid
        else:
            lo = mid + 1
    _, groups = greedy_feasible(t, cands[lo], max_groups, max_group_len)
    spans = tuple(float(t[e - 1] - t[s]) for s, e in groups)
    return Partition(groups=tuple(groups), spans=spans, minimax_span=max(spans))
