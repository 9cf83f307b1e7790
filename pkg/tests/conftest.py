import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blockalloc.matching import max_cardinality_matching
from blockalloc.model import CostMatrix, build_cost_matrix
from blockalloc.sim import random_instance

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Worked example with six devices and four blocks. Each row is linear in
# depth; memory need equals depth and budgets cap the usable depths.
EXAMPLE_TOTAL = np.array([
    [22, 28, 34, 40],
    [14, 19, 24, 29],
    [34, 40, 46, 52],
    [20, 24, 28, 32],
    [38, 42, 46, 50],
    [13, 24, 35, 46],
], dtype=float)
EXAMPLE_BUDGET = np.array([2, 4, 1, 4, 2, 4], dtype=float)


def example_cost_matrix() -> CostMatrix:
    slopes = np.array([6, 5, 6, 4, 4, 11], dtype=float)
    comp = slopes[:, None] * np.arange(1, 5)[None, :]
    return CostMatrix(
        comp_latency=comp,
        spectral_eff=np.ones(6),
        total=EXAMPLE_TOTAL.copy(),
        block_memory=np.arange(1, 5, dtype=float),
        memory_budget=EXAMPLE_BUDGET.copy(),
        payload_bits=1.0,
        total_bandwidth=1.0,
    )


def feasible_cost_matrix(rng, kmax, lmax, kmin=1):
    """Random campaign-law instance, redrawn until some assignment fits memory."""
    while True:
        K = int(rng.integers(kmin, kmax + 1))
        L = int(rng.integers(1, min(K, lmax) + 1))
        cm = build_cost_matrix(random_instance(rng, K, L))
        if max_cardinality_matching(cm.admissible) == L:
            return cm


@pytest.fixture
def example_cm():
    return example_cost_matrix()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
