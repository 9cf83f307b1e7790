"""Joint bandwidth-and-block allocation by dual ascent.

The min-max problem is relaxed with multipliers on the per-device latency
constraints (``lam``), the bandwidth budget (``mu``) and the coupling between
device involvement and block assignment (``sigma``). Each iteration minimizes
the Lagrangian in three separable pieces (latency, blocks, bandwidth and
involvement) and then takes a projected subgradient step on the multipliers.
Every primal assignment visited is polished with the exact bandwidth split and
the best polished iterate is returned.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import crunch
from .matching import min_weight_perfect_matching
from .model import Assignment, CostMatrix, InfeasibleInstanceError

MU_MIN = 1e-12
BANDWIDTH_FLOOR = 1e-9  # fraction of B used when a selected device has no share


@dataclass(frozen=True)
class DualState:
    lam: np.ndarray
    mu: float
    sigma: np.ndarray
    step_index: int = 0


@dataclass(frozen=True)
class JbbaOptions:
    max_iters: int = 5000
    tol: float = 1e-4
    step0: float | None = None
    prune: bool = False
    method: str = "lsa"


@dataclass
class JbbaSolution:
    assignment: Assignment
    involvement: np.ndarray
    bandwidth: np.ndarray
    latency: float
    converged: bool
    iterations: int
    trace: list[dict] = field(default_factory=list)

    def write_trace(self, path) -> None:
        if not self.trace:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.trace[0]))
            w.writeheader()
            w.writerows(self.trace)


def primal_T(dual: DualState, T_max: float) -> float:
    """Minimizer of the linear latency term over [0, T_max]."""
    return T_max if 1.0 - float(np.sum(dual.lam)) < 0 else 0.0


def block_weights(dual: DualState, cm: CostMatrix) -> np.ndarray:
    """``lam_k * J_kl - sigma_k`` on memory-admissible pairs, ``inf`` elsewhere."""
    w = dual.lam[:, None] * cm.comp_latency - dual.sigma[:, None]
    return np.where(cm.admissible, w, np.inf)


def _prune_to_bottleneck(w: np.ndarray) -> np.ndarray:
    """Cut the largest weights while a perfect matching survives."""
    K, L = w.shape
    mask = np.isfinite(w)
    # nondecreasing rows keep the staircase, so the crunch machinery applies
    fake = CostMatrix(
        comp_latency=w, spectral_eff=np.ones(K), total=np.where(mask, w, np.inf),
        block_memory=np.zeros(L), memory_budget=np.ones(K), payload_bits=0.0,
        total_bandwidth=1.0,
    )
    sol = crunch.crunch_solve(fake)
    keep = np.arange(L)[None, :] < sol.q.row_support[:, None]
    return np.where(keep, w, np.inf)


def primal_blocks(dual: DualState, cm: CostMatrix, prune: bool = False,
                  method: str = "hungarian") -> Assignment:
    """Assignment minimizing ``sum alpha_kl (lam_k J_kl - sigma_k)``.

    With ``prune`` the weight matrix is first crunched to its bottleneck
    support, which restricts the minimum to bottleneck-optimal assignments.
    """
    if (dual.lam < 0).any():
        raise ValueError("lam must be nonnegative")
    w = block_weights(dual, cm)
    if prune:
        w = _prune_to_bottleneck(w)
    if method == "lsa":
        from scipy.optimize import linear_sum_assignment

        finite = np.isfinite(w)
        big = (w.size + 1) * (np.abs(w[finite]).max() + 1.0) if finite.any() else 1.0
        rows, cols = linear_sum_assignment(np.where(finite, w, big).T)
        if not finite[cols, rows].all():
            raise InfeasibleInstanceError("memory constraints admit no assignment")
        return Assignment(tuple(int(k) for k in cols))
    return min_weight_perfect_matching(w).assignment


def primal_bandwidth_involvement(dual: DualState, r: np.ndarray, payload_bits: float,
                                 num_blocks: int, total_bandwidth: float):
    """Closed-form involvement and bandwidth for fixed multipliers.

    Selects the ``num_blocks`` devices with the smallest
    ``2*sqrt(lam*S*mu/r) + sigma`` (ties: larger r, then lower index) and
    gives each ``sqrt(lam*S/(r*mu))``. Returns (beta, bandwidth, clamped).
    """
    r = np.asarray(r, dtype=float)
    clamped = dual.mu < MU_MIN
    mu = max(dual.mu, MU_MIN)
    S = payload_bits
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(r > 0, 2.0 * np.sqrt(dual.lam * S * mu / r), np.inf) + dual.sigma
        share = np.where(r > 0, np.sqrt(dual.lam * S / (r * mu)), 0.0)
    order = np.lexsort((np.arange(len(r)), -r, coef))
    beta = np.zeros(len(r), dtype=bool)
    beta[order[:num_blocks]] = True
    bandwidth = np.where(beta, share, 0.0)
    if beta.any() and not (bandwidth[beta] > 0).any():
        warnings.warn("all selected devices have zero multiplier; using equal shares",
                      RuntimeWarning, stacklevel=2)
        bandwidth = np.where(beta, total_bandwidth / num_blocks, 0.0)
    return beta, bandwidth, clamped


def dual_update(state: DualState, alpha: np.ndarray, beta: np.ndarray,
                bandwidth: np.ndarray, T: float, step: float, cm: CostMatrix,
                mu_scale: float = 1.0, sigma_scale: float = 1.0) -> DualState:
    """Projected subgradient step on the multipliers.

    ``mu_scale`` and ``sigma_scale`` rescale the bandwidth-budget constraint
    (taken relative to B) and the involvement constraint so that a single
    step size suits all three multiplier groups.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    lat = device_latency(cm, alpha, beta, bandwidth)
    lam = np.maximum(0.0, state.lam + step * (lat - T))
    B = cm.total_bandwidth
    mu = max(0.0, state.mu + step * mu_scale * (bandwidth.sum() - B) / B)
    sigma = state.sigma + step * sigma_scale * (beta.astype(float) - alpha.sum(axis=1))
    return DualState(lam, mu, sigma, state.step_index + 1)


def device_latency(cm: CostMatrix, alpha: np.ndarray, beta: np.ndarray,
                   bandwidth: np.ndarray) -> np.ndarray:
    """Per-device computation plus upload time; 0 for idle devices."""
    J, r, S, B = cm.comp_latency, cm.spectral_eff, cm.payload_bits, cm.total_bandwidth
    bw = np.maximum(bandwidth, BANDWIDTH_FLOOR * B)
    with np.errstate(divide="ignore"):
        comm = np.where(beta, S / (bw * r), 0.0)
    return (alpha * J).sum(axis=1) + comm


def simplex_T(lam: np.ndarray, lat: np.ndarray, step: float) -> float:
    """Latency value that keeps ``sum(lam)`` at 1 after the step.

    When the multipliers sum to one the latency term of the Lagrangian has a
    zero coefficient, so any T is a minimizer; this picks the one for which
    the projected update stays on the simplex.
    """
    v = np.sort(lam + step * lat)[::-1]
    css = np.cumsum(v) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(v - css / idx > 0)[0][-1]
    return float(css[rho] / (rho + 1)) / step


def polish_bandwidth(assignment: Assignment, cm: CostMatrix, rtol: float = 1e-9):
    """Exact bandwidth split for a fixed assignment, by bisection on latency.

    Returns (bandwidth of length K, latency). At the optimum every involved
    device finishes at the same time.
    """
    K, L = cm.comp_latency.shape
    devs = np.array(assignment.devices)
    J = cm.comp_latency[devs, np.arange(L)]
    r = cm.spectral_eff[devs]
    S, B = cm.payload_bits, cm.total_bandwidth
    if (r <= 0).any():
        raise ValueError("assignment involves a device that cannot upload")
    full = np.zeros(K)
    if S == 0:
        full[devs] = B / L
        return full, float(J.max())

    def need(t):
        return S / (r * (t - J))

    lo = float(J.max())
    hi = float((J + S * L / (B * r)).max())  # equal share is feasible
    t = hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        total = need(mid).sum()
        if total > B:
            lo = mid
        else:
            hi = mid
            if B - total <= rtol * B:
                break
    t = hi
    bw = need(t)
    full[devs] = bw
    return full, float(t)


def initial_state(cm: CostMatrix) -> DualState:
    K, L = cm.comp_latency.shape
    lam = np.full(K, 1.0 / K)
    r_pos = cm.spectral_eff[cm.spectral_eff > 0]
    r_mean = float(r_pos.mean()) if r_pos.size else 1.0
    # closed-form shares start near B/L for an average device
    mu = max(MU_MIN, lam.mean() * cm.payload_bits * L**2 / (r_mean * cm.total_bandwidth**2))
    return DualState(lam, mu, np.zeros(K), 0)


def residuals(cm: CostMatrix, dual: DualState, alpha: np.ndarray, beta: np.ndarray,
              bandwidth: np.ndarray) -> tuple[float, float, float]:
    """Relative KKT residuals: (latency alignment, bandwidth budget, involvement).

    The latency residual is the projected latency subgradient taken at the
    smallest T that satisfies every latency constraint.
    """
    lat = device_latency(cm, alpha, beta, bandwidth)
    t_ref = lat.max()
    if not np.isfinite(t_ref) or t_ref <= 0:
        return math.inf, math.inf, math.inf
    g = lat - t_ref
    g[(dual.lam <= 0) & (g < 0)] = 0.0
    lat_res = float(np.abs(g).max() / t_ref)
    B = cm.total_bandwidth
    bw_res = abs(float(bandwidth.sum()) - B) / B
    inv_res = float(np.abs(beta.astype(float) - alpha.sum(axis=1)).sum())
    return lat_res, bw_res, inv_res


def jbba_solve(cm: CostMatrix, options: JbbaOptions = JbbaOptions()) -> JbbaSolution:
    """Dual ascent over (lam, mu, sigma); returns the best polished iterate.

    ``converged`` is set only when the Lagrangian minimizer itself satisfies
    every relaxed constraint to ``options.tol``. With more devices than blocks
    this rarely happens, because an idle device with zero multiplier looks
    free to the block step, so the flag is informative rather than a quality
    verdict.
    """
    K, L = cm.comp_latency.shape
    if K < L:
        raise InfeasibleInstanceError(f"{K} devices cannot host {L} blocks")
    if not (cm.spectral_eff > 0).any():
        raise InfeasibleInstanceError("no device can upload")

    start = crunch.crunch_solve(cm)
    polished = {}

    def polish(a: Assignment):
        if a.devices not in polished:
            polished[a.devices] = polish_bandwidth(a, cm)
        return polished[a.devices]

    best_a = start.assignment
    best_bw, best_t = polish(best_a)
    T_max = start.latency

    # Steps are normalized so that a unit subgradient moves lam by about its
    # own scale (1/L); mu and sigma constraints are rescaled to match.
    t_ref = start.latency
    eps0 = options.step0 if options.step0 is not None else 1.0 / (L * t_ref)
    state = initial_state(cm)
    mu_scale = state.mu / eps0
    sigma_scale = t_ref / (L * eps0)
    trace = []
    converged = False
    it = 0
    for it in range(1, options.max_iters + 1):
        a = primal_blocks(state, cm, prune=options.prune, method=options.method)
        alpha = a.indicator(K)
        with warnings.catch_warnings():
            # zero multipliers are routine mid-run; the equal-share fallback is fine here
            warnings.simplefilter("ignore", RuntimeWarning)
            beta, bw, clamped = primal_bandwidth_involvement(
                state, cm.spectral_eff, cm.payload_bits, L, cm.total_bandwidth)
        res = residuals(cm, state, alpha, beta, bw)

        p_bw, p_t = polish(a)
        if p_t < best_t:
            best_a, best_bw, best_t = a, p_bw, p_t
        trace.append({
            "iteration": it, "sum_lambda": float(state.lam.sum()), "mu": state.mu,
            "latency_residual": res[0], "bandwidth_residual": res[1],
            "involvement_residual": res[2], "polished_T": p_t, "best_T": best_t,
            "mu_clamped": int(clamped),
        })
        if res[2] == 0 and res[0] <= options.tol and res[1] <= options.tol:
            converged = True
            break

        step = eps0 / math.sqrt(it)
        lat = device_latency(cm, alpha, beta, bw)
        if abs(1.0 - state.lam.sum()) <= 1e-9:
            # any T minimizes the latency term here; keep lam on the simplex
            T = max(simplex_T(state.lam, lat, step), 0.0)
        else:
            T = primal_T(state, T_max)
        state = dual_update(state, alpha, beta, bw, T, step, cm, mu_scale, sigma_scale)
        T_max = p_t

    return JbbaSolution(
        assignment=best_a,
        involvement=best_a.involvement(K),
        bandwidth=best_bw,
        latency=best_t,
        converged=converged,
        iterations=it,
        trace=trace,
    )
