"""Bipartite matching engines.

Weights are given device-by-block (K x L, K >= L); ``inf`` marks a forbidden
pair. The Hungarian solver matches every block to a distinct device.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import Assignment, CostMatrix, InfeasibleInstanceError


@dataclass(frozen=True)
class Matching:
    total: float
    assignment: Assignment
    device_potential: np.ndarray
    block_potential: np.ndarray


def _forbidden_sentinel(weights: np.ndarray) -> float:
    finite = weights[np.isfinite(weights)]
    scale = float(np.abs(finite).max()) if finite.size else 0.0
    K, L = weights.shape
    return (K * L + 1) * (scale + 1.0)


def _hungarian(a: np.ndarray):
    """Shortest-augmenting-path Hungarian method for an n x m matrix, n <= m.

    Returns (col_of_row, u, v) with u[i] + v[j] <= a[i, j] everywhere,
    equality on matched pairs, and v <= 0 with v == 0 on unmatched columns.
    """
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    cost = np.zeros((n + 1, m + 1))
    cost[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def check_certificate(weights: np.ndarray, m: Matching, rtol: float = 1e-9) -> bool:
    """Verify LP dual feasibility and complementary slackness of a matching."""
    w = np.asarray(weights, dtype=float)
    finite = np.isfinite(w)
    scale = max(1.0, float(np.abs(w[finite]).max()) if finite.any() else 1.0)
    tol = rtol * scale * w.shape[1]
    slack = w - m.device_potential[:, None] - m.block_potential[None, :]
    if (slack[finite] < -tol).any():
        return False
    if (m.device_potential > tol).any():
        return False
    matched = np.zeros(w.shape[0], dtype=bool)
    matched[list(m.assignment.devices)] = True
    if (np.abs(m.device_potential[~matched]) > tol).any():
        return False
    blocks = np.arange(w.shape[1])
    return bool(np.all(np.abs(slack[list(m.assignment.devices), blocks]) <= tol))


def min_weight_perfect_matching(weights) -> Matching:
    """Min-sum matching of every block (column) to a distinct device (row)."""
    w = np.asarray(weights, dtype=float)
    K, L = w.shape
    if K < L:
        raise InfeasibleInstanceError(f"{K} devices cannot host {L} blocks")
    if np.isnan(w).any() or np.isneginf(w).any():
        raise ValueError("weights must be finite or +inf")
    allowed = np.isfinite(w)
    a = np.where(allowed, w, _forbidden_sentinel(w)).T
    dev_of_block, u, v = _hungarian(a)
    if not allowed[dev_of_block, np.arange(L)].all():
        bad = [l for l in range(L) if not allowed[dev_of_block[l], l]]
        raise InfeasibleInstanceError("no perfect matching on admissible pairs", bad)
    total = float(w[dev_of_block, np.arange(L)].sum())
    result = Matching(total, Assignment(tuple(int(k) for k in dev_of_block)), v, u)
    if not check_certificate(w, result):
        raise ArithmeticError("Hungarian dual certificate failed")
    return result


def max_cardinality_matching(adjacency) -> int:
    """Hopcroft-Karp maximum matching size of a K x L boolean adjacency."""
    adj = np.asarray(adjacency, dtype=bool)
    K, L = adj.shape
    nbrs = [np.flatnonzero(adj[:, l]).tolist() for l in range(L)]
    match_block = [-1] * L
    match_dev = [-1] * K
    INF = L + K + 1

    def bfs():
        dist = [INF] * L
        queue = [l for l in range(L) if match_block[l] == -1]
        for l in queue:
            dist[l] = 0
        found = False
        head = 0
        while head < len(queue):
            l = queue[head]
            head += 1
            for k in nbrs[l]:
                nxt = match_dev[k]
                if nxt == -1:
                    found = True
                elif dist[nxt] == INF:
                    dist[nxt] = dist[l] + 1
                    queue.append(nxt)
        return found, dist

    def dfs(l, dist):
        for k in nbrs[l]:
            nxt = match_dev[k]
            if nxt == -1 or (dist[nxt] == dist[l] + 1 and dfs(nxt, dist)):
                match_block[l] = k
                match_dev[k] = l
                return True
        dist[l] = INF
        return False

    size = 0
    while True:
        found, dist = bfs()
        if not found:
            break
        for l in range(L):
            if match_block[l] == -1 and dfs(l, dist):
                size += 1
    return size


def _threshold_matching(allowed: np.ndarray):
    """Hungarian feasibility test: zero-cost perfect matching on allowed pairs."""
    rows, cols = linear_sum_assignment(np.where(allowed, 0.0, 1.0).T)
    ok = bool(allowed[cols, rows].all())
    return ok, cols


def bottleneck_via_search(cm: CostMatrix):
    """Min-max assignment by descending linear search over pair latencies.

    Each candidate threshold is validated with a full Hungarian solve; this is
    the conventional method CRUNCH is benchmarked against.
    Returns ``(T_opt, Assignment)``.
    """
    T = cm.total
    K, L = T.shape
    if K < L:
        raise InfeasibleInstanceError(f"{K} devices cannot host {L} blocks")
    base = cm.admissible & np.isfinite(T)
    ok, devs = _threshold_matching(base)
    if not ok:
        raise InfeasibleInstanceError("memory constraints admit no assignment")
    best = devs
    thresholds = np.unique(T[base])[::-1]
    t_opt = float(thresholds[0])
    for th in thresholds[1:]:
        ok, devs = _threshold_matching(base & (T <= th))
        if not ok:
            break
        best, t_opt = devs, float(th)
    return t_opt, Assignment(tuple(int(k) for k in best))
