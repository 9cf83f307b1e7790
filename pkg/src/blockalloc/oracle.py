"""Exhaustive reference solvers for small instances.

Nothing here imports the solver modules; these are the independent side of
every cross-check.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .model import Assignment, CostMatrix, InfeasibleInstanceError


class OracleSizeError(ValueError):
    pass


@lru_cache(maxsize=64)
def _injections(K: int, L: int) -> np.ndarray:
    """All ordered choices of L distinct devices, shape (P, L)."""
    return np.array(list(itertools.permutations(range(K), L)), dtype=int).reshape(-1, L)


def _guard(K, L, kmax, lmax):
    if K > kmax or L > lmax:
        raise OracleSizeError(f"oracle limited to K<={kmax}, L<={lmax}; got K={K}, L={L}")


def validate_assignment(assignment: Assignment, block_memory, memory_budget) -> list[str]:
    """Return violated constraints; empty when the assignment is valid."""
    problems = []
    devs = list(assignment.devices)
    L = len(block_memory)
    K = len(memory_budget)
    if len(devs) != L:
        problems.append(f"expected {L} blocks, got {len(devs)}")
    if len(set(devs)) != len(devs):
        problems.append("a device hosts more than one block")
    for l, k in enumerate(devs):
        if not 0 <= k < K:
            problems.append(f"block {l}: unknown device {k}")
        elif block_memory[l] > memory_budget[k]:
            problems.append(f"block {l} exceeds memory of device {k}")
    return problems


def brute_bottleneck(cm: CostMatrix):
    T = np.asarray(cm.total, dtype=float)
    K, L = T.shape
    _guard(K, L, 10, 7)
    perms = _injections(K, L)
    cols = np.arange(L)
    ok = cm.block_memory[None, :] <= cm.memory_budget[perms]
    vals = T[perms, cols]
    ok &= np.isfinite(vals)
    worst = np.where(ok.all(axis=1), vals.max(axis=1), np.inf)
    i = int(np.argmin(worst))
    if not np.isfinite(worst[i]):
        raise InfeasibleInstanceError("no memory-feasible assignment")
    return float(worst[i]), Assignment(tuple(int(k) for k in perms[i]))


def brute_min_sum(weights):
    w = np.asarray(weights, dtype=float)
    K, L = w.shape
    _guard(K, L, 8, 6)
    perms = _injections(K, L)
    totals = w[perms, np.arange(L)].sum(axis=1)
    i = int(np.argmin(totals))
    if not np.isfinite(totals[i]):
        raise InfeasibleInstanceError("no finite perfect matching")
    return float(totals[i]), Assignment(tuple(int(k) for k in perms[i]))


def exact_bandwidth(comp, r, payload_bits, total_bandwidth):
    """Min-max latency split of the bandwidth among fixed involved devices.

    Solves sum_k S / (r_k (T - J_k)) = B for T with Brent's method.
    Returns (T, bandwidths).
    """
    comp = np.asarray(comp, dtype=float)
    r = np.asarray(r, dtype=float)
    S, B = payload_bits, total_bandwidth
    if (r <= 0).any():
        return np.inf, np.zeros_like(comp)
    if S == 0:
        return float(comp.max()), np.full(comp.shape, B / len(comp))

    def excess(t):
        return np.sum(S / (r * (t - comp))) - B

    lo = comp.max()
    hi = lo + np.sum(S / r) / B + 1.0
    while excess(hi) > 0:
        hi = lo + 2 * (hi - lo)
    span = hi - lo
    t = brentq(excess, lo + span * 1e-15 + np.spacing(lo), hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    bw = S / (r * (t - comp))
    return float(t), bw


def brute_jbba(cm: CostMatrix):
    """Global optimum of joint block and bandwidth allocation.

    Returns (latency, Assignment, bandwidth array of length K).
    """
    J = cm.comp_latency
    K, L = J.shape
    _guard(K, L, 7, 5)
    perms = _injections(K, L)
    cols = np.arange(L)
    ok = (cm.block_memory[None, :] <= cm.memory_budget[perms]).all(axis=1)
    ok &= (cm.spectral_eff[perms] > 0).all(axis=1)
    best = (np.inf, None, None)
    for p in perms[ok]:
        t, bw = exact_bandwidth(J[p, cols], cm.spectral_eff[p], cm.payload_bits, cm.total_bandwidth)
        if t < best[0]:
            full = np.zeros(K)
            full[p] = bw
            best = (t, Assignment(tuple(int(k) for k in p)), full)
    if best[1] is None:
        raise InfeasibleInstanceError("no memory-feasible assignment")
    return best
