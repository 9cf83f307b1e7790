"""Min-max block assignment by Cutting, Recounting and Checking.

Because latency and memory both grow with block depth, the qualified pairs of
each device form a prefix of depths (a staircase). Feasibility of a threshold
then depends only on the per-device prefix lengths, so the optimum is found by
repeatedly cutting the largest qualified latency until feasibility breaks.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .model import Assignment, CostMatrix, InfeasibleInstanceError


@dataclass(frozen=True)
class QMatrix:
    values: np.ndarray  # 0 marks a disqualified pair
    row_support: np.ndarray
    threshold: float


@dataclass(frozen=True)
class SortedSupport:
    pi: np.ndarray  # pi[j]: (j+1)-th smallest support
    kappa: np.ndarray  # device attaining pi[j]; ties broken by device index


@dataclass
class BottleneckSolution:
    latency: float
    assignment: Assignment
    q: QMatrix
    cuts: list[tuple[int, int, float]] = field(default_factory=list)

    def __iter__(self):
        return iter((self.latency, self.assignment))


def _qualified(cm: CostMatrix, threshold: float) -> np.ndarray:
    T = cm.total
    return cm.admissible & np.isfinite(T) & (T <= threshold)


def is_staircase(mask: np.ndarray) -> bool:
    """True when every row's nonzero pattern is a prefix of depths."""
    s = mask.sum(axis=1)
    prefix = np.arange(mask.shape[1])[None, :] < s[:, None]
    return bool(np.array_equal(mask, prefix))


def build_q(cm: CostMatrix, threshold: float = np.inf) -> QMatrix:
    mask = _qualified(cm, threshold)
    if not is_staircase(mask):
        raise ValueError("qualified pairs are not depth prefixes; cost model not monotone")
    return QMatrix(np.where(mask, cm.total, 0.0), mask.sum(axis=1), float(threshold))


def sorted_support(row_support) -> SortedSupport:
    s = np.asarray(row_support)
    kappa = np.argsort(s, kind="stable")
    return SortedSupport(s[kappa], kappa)


def feasible(support: SortedSupport, K: int, L: int) -> bool:
    """Counting check: the (K-L+l)-th smallest support is >= l."""
    if K < L:
        return False
    return all(support.pi[K - L + l - 1] >= l for l in range(1, L + 1))


def extract_assignment(q: QMatrix, support: SortedSupport) -> Assignment:
    """Give block l (1-based) to the device holding the (K-L+l)-th smallest support."""
    K, L = q.values.shape
    if not feasible(support, K, L):
        raise ValueError("extraction requires a feasible support profile")
    return Assignment(tuple(int(support.kappa[K - L + l]) for l in range(L)))


def _violated_depths(counts: np.ndarray, L: int) -> list[int]:
    # counts[t] = number of devices with support >= t
    return [t - 1 for t in range(1, L + 1) if counts[t] < L - t + 1]


def crunch_solve(cm: CostMatrix) -> BottleneckSolution:
    """Exact min-max assignment under equal-share bandwidth."""
    T = cm.total
    K, L = T.shape
    if K < L:
        raise InfeasibleInstanceError(f"{K} devices cannot host {L} blocks")
    q0 = build_q(cm)
    s = q0.row_support.astype(int).copy()
    # Checking is O(1) per cut: the sorted-support condition is equivalent to
    # counts[t] >= L - t + 1 for every depth t, and a cut on a row with support
    # s only lowers counts[s].
    counts = np.zeros(L + 2, dtype=int)
    for t in range(1, L + 1):
        counts[t] = int((s >= t).sum())
    bad = _violated_depths(counts, L)
    if bad:
        raise InfeasibleInstanceError(
            f"memory walls leave depth(s) {[b + 1 for b in bad]} unmatchable", bad
        )
    # Row edges only: by the staircase property the largest qualified entry
    # always sits at (k, s_k - 1). Ties: deeper block first, then lower index.
    heap = [(-T[k, s[k] - 1], -(s[k] - 1), k) for k in range(K) if s[k] > 0]
    heapq.heapify(heap)
    cuts = []
    while True:
        negv, _, k = heapq.heappop(heap)
        depth = s[k]
        s[k] -= 1
        counts[depth] -= 1
        if counts[depth] < L - depth + 1:
            s[k] += 1
            counts[depth] += 1
            t_opt = -negv
            break
        cuts.append((k, depth - 1, -negv))
        if s[k] > 0:
            heapq.heappush(heap, (-T[k, s[k] - 1], -(s[k] - 1), k))
    prefix = np.arange(L)[None, :] < s[:, None]
    q = QMatrix(np.where(prefix, T, 0.0), s, float(t_opt))
    assignment = extract_assignment(q, sorted_support(s))
    return BottleneckSolution(float(t_opt), assignment, q, cuts)
