import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from blockalloc.crunch import crunch_solve
from blockalloc.jbba import (
    MU_MIN, DualState, JbbaOptions, block_weights, device_latency, dual_update,
    initial_state, jbba_solve, polish_bandwidth, primal_T, primal_bandwidth_involvement,
    primal_blocks, simplex_T,
)
from blockalloc.model import Assignment, CostMatrix, build_cost_matrix, round_latency
from blockalloc.sim import random_instance
from blockalloc.oracle import brute_jbba, brute_min_sum, exact_bandwidth, validate_assignment
from conftest import feasible_cost_matrix


def _dual(K, lam=None, mu=1.0, sigma=None):
    lam = np.full(K, 1.0 / K) if lam is None else np.asarray(lam, float)
    sigma = np.zeros(K) if sigma is None else np.asarray(sigma, float)
    return DualState(lam, mu, sigma)


def _cm(J, r, S=1.0, B=1.0, need=None, budget=None):
    J = np.asarray(J, float)
    r = np.asarray(r, float)
    K, L = J.shape
    T = J + S * L / (B * r)[:, None]
    return CostMatrix(J, r, T, np.zeros(L) if need is None else np.asarray(need, float),
                      np.ones(K) if budget is None else np.asarray(budget, float), S, B)


def _random_dual(rng, cm):
    K = cm.shape[0]
    return DualState(rng.uniform(0, 1, K), float(rng.uniform(0.1, 2)), rng.normal(0, 1, K))


# latency variable ------------------------------------------------------------

def test_primal_T_positive_coefficient():
    assert primal_T(_dual(3, lam=[0, 0, 0]), 7.0) == 0.0


def test_primal_T_negative_coefficient():
    assert primal_T(_dual(2, lam=[1.0, 1.0]), 7.0) == 7.0


def test_simplex_T_keeps_sum_at_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lam = rng.dirichlet(np.ones(5))
        lat = rng.uniform(0, 3, 5)
        step = float(rng.uniform(0.01, 1))
        T = simplex_T(lam, lat, step)
        assert np.maximum(0, lam + step * (lat - T)).sum() == pytest.approx(1.0, abs=1e-12)


# block step ------------------------------------------------------------------

def test_blocks_unit_multipliers_reduce_to_plain_min_sum():
    rng = np.random.default_rng(1)
    J = np.cumsum(rng.uniform(0.1, 1, (4, 4)), axis=1)
    cm = _cm(J, np.ones(4))
    a = primal_blocks(_dual(4, lam=np.ones(4)), cm)
    got = sum(J[k, l] for l, k in enumerate(a.devices))
    assert got == pytest.approx(brute_min_sum(J)[0], rel=1e-12)


def test_blocks_zero_latency_multipliers_pick_largest_sigma():
    sigma = np.array([0.3, -1.0, 2.0, 0.9, 1.5])
    J = np.cumsum(np.ones((5, 3)), axis=1)
    cm = _cm(J, np.ones(5))
    dual = _dual(5, lam=np.zeros(5), sigma=sigma)
    a = primal_blocks(dual, cm)
    w = block_weights(dual, cm)
    total = sum(w[k, l] for l, k in enumerate(a.devices))
    assert total == pytest.approx(-np.sort(sigma)[-3:].sum())
    assert total == pytest.approx(brute_min_sum(w)[0])


def test_blocks_match_enumeration_on_random_dual_states():
    rng = np.random.default_rng(2)
    for _ in range(300):
        cm = feasible_cost_matrix(rng, 7, 5)
        dual = _random_dual(rng, cm)
        w = block_weights(dual, cm)
        ref = brute_min_sum(w)[0]
        for method in ("hungarian", "lsa"):
            a = primal_blocks(dual, cm, method=method)
            assert sum(w[k, l] for l, k in enumerate(a.devices)) == pytest.approx(ref, abs=1e-9)
            assert not validate_assignment(a, cm.block_memory, cm.memory_budget)


def test_pruned_blocks_stay_valid_and_never_beat_exact():
    rng = np.random.default_rng(3)
    for _ in range(100):
        cm = feasible_cost_matrix(rng, 7, 5)
        dual = _random_dual(rng, cm)
        w = block_weights(dual, cm)
        exact = primal_blocks(dual, cm)
        pruned = primal_blocks(dual, cm, prune=True)
        assert not validate_assignment(pruned, cm.block_memory, cm.memory_budget)
        cost = lambda a: sum(w[k, l] for l, k in enumerate(a.devices))
        assert cost(pruned) >= cost(exact) - 1e-12


def test_blocks_reject_negative_multipliers():
    with pytest.raises(ValueError):
        primal_blocks(_dual(2, lam=[-1, 1]), _cm([[1.0], [2.0]], [1, 1]))


# bandwidth and involvement step ----------------------------------------------

def test_closed_form_single_device():
    beta, bw, clamped = primal_bandwidth_involvement(_dual(1, lam=[0.5], mu=2.0), np.array([3.0]), 6.0, 1, 1.0)
    assert beta.tolist() == [True]
    assert bw[0] == pytest.approx(np.sqrt(0.5 * 6.0 / (3.0 * 2.0)))
    assert not clamped


def test_closed_form_equal_multipliers_prefer_good_channels_and_compensate_bad_ones():
    r = np.array([1.0, 4.0, 2.0, 0.5, 3.0])
    beta, bw, _ = primal_bandwidth_involvement(_dual(5, lam=np.full(5, 0.2)), r, 1.0, 3, 1.0)
    assert np.flatnonzero(beta).tolist() == [1, 2, 4]
    sel = np.flatnonzero(beta)
    assert np.allclose(bw[sel] * np.sqrt(r[sel]), bw[sel[0]] * np.sqrt(r[sel[0]]))
    assert bw[2] > bw[4] > bw[1]


def test_closed_form_ties_prefer_better_channel_then_lower_index():
    r = np.array([2.0, 2.0, 2.0])
    lam = np.array([0.5, 0.5, 0.5])
    beta, _, _ = primal_bandwidth_involvement(_dual(3, lam=lam), r, 1.0, 2, 1.0)
    assert np.flatnonzero(beta).tolist() == [0, 1]


def _grid_partial_lagrangian(dual, r, S, L, B, points=10_000):
    """Brute force over involvement choices and a per-device bandwidth grid."""
    K = len(r)
    grid = np.linspace(2 * B / points, 2 * B, points)
    best_dev = []
    for k in range(K):
        vals = dual.lam[k] * S / (grid * r[k]) + dual.mu * grid
        best_dev.append(vals.min() + dual.sigma[k])
    best = np.inf
    for sel in itertools.combinations(range(K), L):
        best = min(best, sum(best_dev[k] for k in sel))
    return best - dual.mu * B


def _closed_form_value(dual, beta, bw, r, S, B):
    with np.errstate(divide="ignore", invalid="ignore"):
        comm = np.where(beta, dual.lam * S / (bw * r), 0.0)
    return float(np.sum(comm + dual.mu * bw + dual.sigma * beta) - dual.mu * B)


def test_closed_form_matches_grid_search_oracle():
    rng = np.random.default_rng(4)
    for _ in range(30):
        K = 4
        r = rng.uniform(0.5, 4, K)
        S, B = 1.0, 1.0
        dual = DualState(rng.uniform(0.05, 1, K), float(rng.uniform(0.5, 3)), rng.uniform(0, 0.5, K))
        beta, bw, _ = primal_bandwidth_involvement(dual, r, S, 2, B)
        got = _closed_form_value(dual, beta, bw, r, S, B)
        ref = _grid_partial_lagrangian(dual, r, S, 2, B)
        assert got <= ref + 1e-12
        assert abs(got - ref) <= 1e-3 * abs(ref)


@given(seed=st.integers(0, 2**32 - 1))
def test_closed_form_stationarity(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 7))
    L = int(rng.integers(1, K + 1))
    r = rng.uniform(0.1, 5, K)
    S = float(rng.uniform(1e3, 1e6))
    dual = DualState(rng.uniform(0, 1, K), float(10 ** rng.uniform(-9, -3)), rng.normal(0, 1, K))
    beta, bw, _ = primal_bandwidth_involvement(dual, r, S, L, 1e8)
    assert beta.sum() == L
    for k in np.flatnonzero(beta & (dual.lam > 0)):
        res = -dual.lam[k] * S / (bw[k] ** 2 * r[k]) + dual.mu
        assert abs(res) <= 1e-8 * dual.mu


def test_closed_form_clamps_tiny_mu():
    _, bw, clamped = primal_bandwidth_involvement(_dual(2, mu=0.0), np.ones(2), 1.0, 1, 1.0)
    assert clamped
    assert np.isfinite(bw).all()
    assert bw.max() == pytest.approx(np.sqrt(0.5 / MU_MIN))


def test_closed_form_all_zero_multipliers_fall_back_to_equal_share():
    with pytest.warns(RuntimeWarning):
        beta, bw, _ = primal_bandwidth_involvement(_dual(3, lam=np.zeros(3)), np.ones(3), 1.0, 2, 10.0)
    assert bw[beta].tolist() == [5.0, 5.0]


# dual step -------------------------------------------------------------------

def _tight_point():
    J = np.array([[1.0, 2.0], [1.5, 3.0]])
    r = np.array([1.0, 1.0])
    cm = _cm(J, r, S=1.0, B=2.0)
    a = Assignment((1, 0))
    alpha = a.indicator(2)
    beta = a.involvement(2)
    bw, T = polish_bandwidth(a, cm)
    return cm, alpha, beta, bw, T


def test_dual_step_zero_subgradients_leave_multipliers():
    cm, alpha, beta, bw, T = _tight_point()
    state = DualState(np.array([0.4, 0.6]), 0.3, np.array([0.1, -0.2]))
    new = dual_update(state, alpha, beta, bw, T, 0.5, cm)
    assert np.allclose(new.lam, state.lam, rtol=0, atol=1e-8)
    assert new.mu == pytest.approx(state.mu, abs=1e-9)
    assert np.array_equal(new.sigma, state.sigma)
    assert new.step_index == 1


def test_dual_step_projects_onto_nonnegative():
    cm, alpha, beta, bw, T = _tight_point()
    state = DualState(np.array([0.01, 0.01]), 0.0, np.zeros(2))
    new = dual_update(state, alpha, beta, 0.5 * bw, 1e6, 1.0, cm)
    assert (new.lam == 0).all() and new.mu == 0.0


def test_dual_step_requires_positive_step():
    cm, alpha, beta, bw, T = _tight_point()
    with pytest.raises(ValueError):
        dual_update(DualState(np.ones(2), 1.0, np.zeros(2)), alpha, beta, bw, T, 0.0, cm)


def test_device_latency_floors_missing_share():
    cm, alpha, beta, _, _ = _tight_point()
    lat = device_latency(cm, alpha, beta, np.zeros(2))
    assert np.isfinite(lat).all() and (lat > 1e8).all()


# polishing -------------------------------------------------------------------

def test_polish_single_device_takes_everything():
    cm = _cm([[2.0]], [2.0], S=6.0, B=1.5)
    bw, T = polish_bandwidth(Assignment((0,)), cm)
    assert bw[0] == pytest.approx(1.5, rel=1e-9)
    assert T == pytest.approx(2.0 + 6.0 / 3.0, rel=1e-9)


def test_polish_symmetric_pair_splits_evenly():
    cm = _cm([[1.0, 1.0], [1.0, 1.0]], [2.0, 2.0], S=4.0, B=2.0)
    bw, T = polish_bandwidth(Assignment((0, 1)), cm)
    assert bw[0] == pytest.approx(bw[1], rel=1e-9)


def test_polish_matches_fine_latency_grid():
    rng = np.random.default_rng(6)
    for _ in range(20):
        comp = rng.uniform(0.1, 2, (5, 5))
        r = rng.uniform(0.2, 4, 5)
        cm = _cm(comp, r, S=1.0, B=3.0)
        a = Assignment(tuple(rng.permutation(5)))
        bw, T = polish_bandwidth(a, cm)
        J = comp[list(a.devices), np.arange(5)]
        rr = r[list(a.devices)]
        lo, hi = J.max(), (J + 5 / (3.0 * rr)).max()
        grid = np.linspace(lo, hi, 100_001)[1:]
        need = (1.0 / (rr[None, :] * (grid[:, None] - J[None, :]))).sum(axis=1)
        T_grid = grid[np.argmax(need <= 3.0)]
        assert T == pytest.approx(T_grid, rel=1e-4)
        assert abs(bw.sum() - 3.0) <= 1e-9 * 3.0
        assert np.allclose(J + 1.0 / (bw[list(a.devices)] * rr), T, rtol=1e-6)
        t_ref, _ = exact_bandwidth(J, rr, 1.0, 3.0)
        assert T == pytest.approx(t_ref, rel=1e-8)


@given(seed=st.integers(0, 2**32 - 1))
def test_polish_never_worse_than_equal_share(seed):
    cm = feasible_cost_matrix(np.random.default_rng(seed), 8, 6)
    a = crunch_solve(cm).assignment
    bw, T = polish_bandwidth(a, cm)
    equal = np.zeros(cm.shape[0])
    equal[list(a.devices)] = cm.total_bandwidth / cm.shape[1]
    assert T <= round_latency(cm, a, equal) * (1 + 1e-12)
    assert bw.sum() <= cm.total_bandwidth * (1 + 1e-9)
    assert ((bw > 0) == a.involvement(cm.shape[0])).all()


@given(r1=st.floats(0.1, 10), r2=st.floats(0.1, 10), J=st.floats(0.0, 5.0))
def test_polish_gives_weaker_channel_more_band(r1, r2, J):
    cm = _cm([[J, J], [J, J]], [r1, r2], S=1.0, B=1.0)
    bw, _ = polish_bandwidth(Assignment((0, 1)), cm)
    if r1 < r2 * (1 - 1e-9):
        assert bw[0] > bw[1]
    elif r2 < r1 * (1 - 1e-9):
        assert bw[1] > bw[0]


# driver ----------------------------------------------------------------------

def test_solve_single_pair():
    cm = _cm([[2.0]], [2.0], S=6.0, B=1.5)
    sol = jbba_solve(cm)
    assert sol.bandwidth[0] == pytest.approx(1.5, rel=1e-9)
    assert sol.latency == pytest.approx(2.0 + 6.0 / 3.0, rel=1e-9)
    assert sol.converged


def _check_solution(cm, sol):
    K, L = cm.shape
    beta = sol.involvement
    assert (beta == sol.assignment.involvement(K)).all() and beta.sum() == L
    assert sol.bandwidth.sum() <= cm.total_bandwidth * (1 + 1e-9)
    assert ((sol.bandwidth > 0) == beta).all()
    assert round_latency(cm, sol.assignment, sol.bandwidth) == pytest.approx(sol.latency, rel=1e-9)
    assert not validate_assignment(sol.assignment, cm.block_memory, cm.memory_budget)


def test_solve_near_brute_force_optimum():
    rng = np.random.default_rng(7)
    for _ in range(40):
        cm = feasible_cost_matrix(rng, 6, 4)
        sol = jbba_solve(cm, JbbaOptions(max_iters=300))
        _check_solution(cm, sol)
        assert sol.latency <= brute_jbba(cm)[0] * 1.02
        assert sol.latency <= crunch_solve(cm).latency


def test_solve_trace_and_dual_feasibility(tmp_path):
    cm = feasible_cost_matrix(np.random.default_rng(8), 6, 3, kmin=5)
    sol = jbba_solve(cm, JbbaOptions(max_iters=60))
    assert len(sol.trace) == sol.iterations
    assert all(row["mu"] >= 0 for row in sol.trace)
    best = [row["best_T"] for row in sol.trace]
    assert all(a >= b for a, b in zip(best, best[1:]))
    path = tmp_path / "trace.csv"
    sol.write_trace(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["iteration", "sum_lambda", "mu"] and "polished_T" in header


def test_solve_is_deterministic():
    cm = feasible_cost_matrix(np.random.default_rng(9), 6, 4, kmin=5)
    a = jbba_solve(cm, JbbaOptions(max_iters=200))
    b = jbba_solve(cm, JbbaOptions(max_iters=200))
    assert a.assignment == b.assignment and a.latency == b.latency
    assert np.array_equal(a.bandwidth, b.bandwidth) and a.trace == b.trace


def test_converged_runs_sit_on_the_simplex():
    rng = np.random.default_rng(10)
    seen = 0
    for _ in range(60):
        cm = feasible_cost_matrix(rng, 4, 4)
        sol = jbba_solve(cm, JbbaOptions(max_iters=2000))
        if sol.converged and sol.iterations > 1:
            assert abs(1 - sol.trace[-1]["sum_lambda"]) < 1e-2
            seen += 1
    assert seen > 0


def test_initial_state_targets_equal_share():
    cm = build_cost_matrix(random_instance(np.random.default_rng(0), 20, 12))
    s = initial_state(cm)
    assert s.lam.sum() == pytest.approx(1.0)
    r = cm.spectral_eff.mean()
    share = np.sqrt(s.lam[0] * cm.payload_bits / (r * s.mu))
    assert share == pytest.approx(cm.total_bandwidth / 12, rel=1e-9)
