import json

import numpy as np
import pytest

from hdmm.error import ErrorReport, expected_error, identity_error, lm_error, ratio
from hdmm.kron import KronStrategy
from hdmm.marginals import MarginalsStrategy
from hdmm.workload import (
    Block, LogicalWorkload, ProductTerm, identity_workload, impvec, prefix_product, up_to_kway_marginals,
)
from conftest import schema


def dense_expected(w, A, eps):
    W = impvec(w).materialize()
    Am = A.materialize()
    return 2 / eps**2 * np.abs(Am).sum(axis=0).max() ** 2 * np.linalg.norm(W @ np.linalg.pinv(Am)) ** 2


def test_expected_error_examples():
    s = schema(2)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": Block("dense", entries=[[1, 1]])})])
    assert expected_error(w, KronStrategy.identity((2,)), 1.0) == pytest.approx(4.0)
    for n in (1, 5, 9):
        assert expected_error(identity_workload(schema(n)), KronStrategy.identity((n,)), 1.0) == pytest.approx(2 * n)
    w = prefix_product(schema(10))
    strat = KronStrategy([np.random.default_rng(0).random((2, 10))])
    assert expected_error(w, strat, 2.0) == pytest.approx(expected_error(w, strat, 1.0) / 4, rel=1e-14)


def test_identity_error_examples():
    s = schema(7)
    assert identity_error(LogicalWorkload(s, [ProductTerm(1, {})]), 1.0) == pytest.approx(14)
    assert identity_error(identity_workload(s), 0.5) == pytest.approx(2 * 7 / 0.25)
    assert identity_error(prefix_product(schema(3)), 1.0) == pytest.approx(12)


def test_lm_error_examples():
    s = schema(7)
    assert lm_error(LogicalWorkload(s, [ProductTerm(1, {})]), 1.0) == pytest.approx(2)
    assert lm_error(identity_workload(s), 1.0) == pytest.approx(14)
    for n in (3, 8, 20):
        assert lm_error(prefix_product(schema(n)), 1.0) == pytest.approx(2 * n**3)


def test_ratio():
    assert ratio(5.0, 5.0) == 1.0
    assert ratio(9.0, 1.0) == 3.0
    with pytest.raises(ZeroDivisionError):
        ratio(1.0, 0.0)


def test_ratio_epsilon_invariant():
    w = prefix_product(schema(12))
    strat = KronStrategy([np.random.default_rng(1).random((1, 12))])
    vals = [ratio(identity_error(w, e), expected_error(w, strat, e)) for e in (0.1, 1, 10)]
    assert max(vals) - min(vals) < 1e-12


def test_identity_strategy_equals_identity_error():
    w = up_to_kway_marginals(schema(3, 4, 2), 2)
    assert expected_error(w, KronStrategy.identity((3, 4, 2)), 0.7) == pytest.approx(identity_error(w, 0.7), rel=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_closed_forms_match_dense(seed):
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    w = up_to_kway_marginals(schema(*sizes), 2, include_total=bool(seed % 2))
    kron = KronStrategy([rng.random((1, n)) for n in sizes])
    marg = MarginalsStrategy(rng.random(4), sizes)
    for strat in (kron, marg):
        from hdmm.mechanism import strategy_matrix

        assert expected_error(w, strat, 1.3) == pytest.approx(dense_expected(w, strategy_matrix(strat), 1.3), rel=1e-8)
    W = impvec(w).materialize()
    assert identity_error(w) == pytest.approx(2 * np.sum(W**2), rel=1e-12)
    assert lm_error(w) == pytest.approx(2 * np.abs(W).sum(axis=0).max() ** 2 * W.shape[0], rel=1e-12)


def test_error_report():
    w = prefix_product(schema(8))
    strat = KronStrategy.identity((8,))
    rep = ErrorReport.build(w, strat, 1.0, name="p8")
    assert rep.ratios()["hdmm"] == 1.0
    assert rep.ratios()["identity"] == pytest.approx(1.0)
    doc = json.loads(rep.to_json())
    assert set(doc) >= {"workload", "epsilon", "squared_error", "root_error", "ratio"}
    text = rep.to_text()
    assert "identity" in text and "lm" in text
    assert all(v >= 0 for v in rep.ratios().values())
