import ast
from pathlib import Path

import numpy as np
import pytest

import blockalloc.oracle as oracle
from blockalloc.model import Assignment, CostMatrix, InfeasibleInstanceError
from blockalloc.oracle import (
    OracleSizeError, brute_bottleneck, brute_jbba, brute_min_sum, exact_bandwidth,
    validate_assignment,
)


def _cm(J, r, S=1.0, B=1.0, need=None, budget=None):
    J = np.asarray(J, float)
    r = np.asarray(r, float)
    K, L = J.shape
    T = J + S * L / (B * r)[:, None]
    return CostMatrix(J, r, T, np.zeros(L) if need is None else np.asarray(need, float),
                      np.ones(K) if budget is None else np.asarray(budget, float), S, B)


def test_bottleneck_single_pair():
    t, a = brute_bottleneck(_cm([[2.0]], [1.0], S=3.0))
    assert t == 5.0 and a.devices == (0,)


def test_bottleneck_worked_example(example_cm):
    assert brute_bottleneck(example_cm)[0] == 29.0


def test_bottleneck_memory_infeasible():
    with pytest.raises(InfeasibleInstanceError):
        brute_bottleneck(_cm([[1.0, 2.0], [1.0, 2.0]], [1, 1], need=[1, 2], budget=[1, 1]))


@pytest.mark.parametrize("fn, shape", [
    (brute_bottleneck, (11, 3)), (brute_bottleneck, (8, 8)),
    (brute_min_sum, (9, 2)), (brute_jbba, (8, 2)), (brute_jbba, (6, 6)),
])
def test_size_guards(fn, shape):
    J = np.ones(shape)
    arg = J if fn is brute_min_sum else _cm(J, np.ones(shape[0]))
    with pytest.raises(OracleSizeError):
        fn(arg)


def test_jbba_single_pair_takes_whole_band():
    t, a, bw = brute_jbba(_cm([[2.0]], [2.0], S=6.0, B=1.5))
    assert bw[0] == pytest.approx(1.5, rel=1e-12)
    assert t == pytest.approx(2.0 + 6.0 / (1.5 * 2.0), rel=1e-12)


def test_jbba_symmetric_pair_splits_evenly():
    t, a, bw = brute_jbba(_cm([[1.0, 1.0], [1.0, 1.0]], [2.0, 2.0], S=4.0, B=2.0))
    assert bw[0] == pytest.approx(1.0, rel=1e-12) and bw[1] == pytest.approx(1.0, rel=1e-12)
    assert t == pytest.approx(3.0, rel=1e-12)


def test_exact_bandwidth_aligns_latencies():
    comp = np.array([0.5, 1.0, 0.2])
    r = np.array([1.0, 3.0, 0.5])
    t, bw = exact_bandwidth(comp, r, 2.0, 10.0)
    assert bw.sum() == pytest.approx(10.0, rel=1e-12)
    assert np.allclose(comp + 2.0 / (bw * r), t, rtol=1e-12)


def test_exact_bandwidth_cannot_upload():
    t, _ = exact_bandwidth([1.0], [0.0], 1.0, 1.0)
    assert t == np.inf


def test_min_sum_tiny():
    total, a = brute_min_sum(np.array([[1.0, 5.0], [2.0, 1.0]]))
    assert total == 2.0 and a.devices == (0, 1)


def test_validate_assignment_reports_each_violation():
    need = np.array([1.0, 3.0])
    budget = np.array([2.0, 2.0, 5.0])
    assert validate_assignment(Assignment((0, 2)), need, budget) == []
    assert any("memory" in p for p in validate_assignment(Assignment((2, 0)), need, budget))
    assert any("more than one" in p for p in validate_assignment(Assignment((2, 2)), need, budget))
    assert any("unknown" in p for p in validate_assignment(Assignment((0, 7)), need, budget))
    assert any("expected" in p for p in validate_assignment(Assignment((0,)), need, budget))


def test_oracle_shares_no_code_with_solvers():
    tree = ast.parse(Path(oracle.__file__).read_text())
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    assert not imported & {"crunch", "matching", "jbba", "sim", "cli"}
    assert not any(m.startswith("blockalloc.") and m.split(".")[-1] != "model" for m in imported)
