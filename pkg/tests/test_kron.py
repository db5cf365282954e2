import numpy as np
import pytest

from hdmm import implicit as im
from hdmm.kron import (
    KronStrategy, UnionStrategy, default_partition, opt_kron, opt_plus, surrogate_gram,
    union_error, union_strategy_error,
)
from hdmm.opt0 import objective, opt0
from hdmm.workload import (
    ALLRANGE, IDENTITY, PREFIX, TOTAL, LogicalWorkload, ProductTerm, factor_grams, frobenius_sq,
    impvec, up_to_kway_marginals,
)
from conftest import schema


def dense_error(workload, A):
    W = impvec(workload).materialize()
    Am = A.materialize()
    return np.linalg.norm(W @ np.linalg.pinv(Am)) ** 2 * np.abs(Am).sum(axis=0).max() ** 2


def random_kron(rng, sizes):
    return KronStrategy([rng.random((int(rng.integers(1, 3)), n)) for n in sizes])


def test_union_error_example():
    s = schema(2, 2)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": IDENTITY}), ProductTerm(1, {"a1": IDENTITY})])
    assert union_error(w, KronStrategy.identity((2, 2))) == pytest.approx(8.0)


def test_single_attribute_equals_opt0(rng):
    s = schema(9)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX})])
    theta = rng.random((2, 9))
    G = factor_grams(w)[0][0]
    assert union_error(w, KronStrategy([theta])) == pytest.approx(objective(theta, G), rel=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_decomposition_matches_dense(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(n) for n in rng.integers(2, 9, size=int(rng.integers(1, 4)))]
    blocks = [IDENTITY, TOTAL, PREFIX, ALLRANGE]
    terms = [
        ProductTerm(float(rng.random() + 0.2), {f"a{i}": blocks[int(rng.integers(0, 4))] for i in range(len(sizes))})
        for _ in range(int(rng.integers(1, 4)))
    ]
    w = LogicalWorkload(schema(*sizes), terms)
    strat = random_kron(rng, sizes)
    A = strat.matrix()
    assert A.sensitivity() == pytest.approx(1.0, abs=1e-12)
    assert union_error(w, strat) == pytest.approx(dense_error(w, A), rel=1e-8)


def test_pp_product_n8(rng):
    s = schema(8, 8)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX, "a1": PREFIX})])
    strat = random_kron(rng, (8, 8))
    G = factor_grams(w)[0]
    prod = objective(strat.factors[0], G[0]) * objective(strat.factors[1], G[1])
    assert union_error(w, strat) == pytest.approx(prod, rel=1e-12)
    assert prod == pytest.approx(dense_error(w, strat.matrix()), rel=1e-8)


def test_surrogate_gram(rng):
    s = schema(5, 6)
    single = LogicalWorkload(s, [ProductTerm(2.0, {"a0": PREFIX, "a1": ALLRANGE})])
    strat = random_kron(rng, (5, 6))
    G = factor_grams(single)[0]
    c2 = 4.0 * objective(strat.factors[1], G[1])
    np.testing.assert_allclose(surrogate_gram(single, strat, 0), c2 * G[0])
    # optimizing factor i on its surrogate is optimizing the union error
    assert objective(strat.factors[0], surrogate_gram(single, strat, 0)) == pytest.approx(union_error(single, strat))
    double = LogicalWorkload(s, single.terms * 2)
    np.testing.assert_allclose(surrogate_gram(double, strat, 0), 2 * surrogate_gram(single, strat, 0))


def test_block_descent_monotone():
    s = schema(8, 8)
    w = LogicalWorkload(s, [
        ProductTerm(1, {"a0": PREFIX, "a1": ALLRANGE}),
        ProductTerm(1.5, {"a0": IDENTITY, "a1": PREFIX}),
    ])
    trace = []
    k = opt_kron(w, p=[2, 2], restarts=1, seed=3, trace=trace)
    assert np.all(np.diff(trace) <= 1e-10 * trace[0])
    assert k.objective == pytest.approx(trace[-1])
    assert k.objective == pytest.approx(dense_error(w, k.matrix()), rel=1e-8)


def test_opt_kron_single_attribute_matches_opt0():
    s = schema(32)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX})])
    k = opt_kron(w, p=[2], restarts=3, seed=5)
    r = opt0(factor_grams(w, structured=True)[0][0], 2, restarts=3, seed=5)
    np.testing.assert_array_equal(k.factors[0], r.params)
    # the dense Gram reaches the same optimum up to rounding
    dense = opt0(factor_grams(w)[0][0], 2, restarts=3, seed=5)
    assert dense.objective == pytest.approx(k.objective, rel=1e-6)


def test_opt_kron_total_total():
    s = schema(6, 5)
    w = LogicalWorkload(s, [ProductTerm(1, {})])
    k = opt_kron(w, restarts=3, seed=0)
    ratio = np.sqrt(frobenius_sq(w) / k.objective)
    assert ratio == pytest.approx(np.sqrt(30), rel=0.03)


def test_opt_kron_deterministic_across_threads():
    s = schema(16, 16)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX, "a1": PREFIX})])
    a = opt_kron(w, restarts=3, seed=2, threads=1)
    b = opt_kron(w, restarts=3, seed=2, threads=3)
    for x, y in zip(a.factors, b.factors):
        np.testing.assert_array_equal(x, y)


def test_default_partition():
    s = schema(4, 4, 4)
    rt = LogicalWorkload(s, [ProductTerm(1, {"a0": ALLRANGE}), ProductTerm(1, {"a1": ALLRANGE})])
    assert default_partition(rt) == [[0], [1]]
    same = LogicalWorkload(s, [ProductTerm(1, {"a0": ALLRANGE}), ProductTerm(2, {"a0": PREFIX})])
    assert default_partition(same) == [[0, 1]]
    three = LogicalWorkload(s, [
        ProductTerm(3, {"a0": IDENTITY, "a1": IDENTITY}),
        ProductTerm(1, {"a1": IDENTITY}),
        ProductTerm(1, {"a2": IDENTITY}),
    ])
    assert default_partition(three) == [[0], [1, 2]]


def test_union_strategy_invariants(rng):
    k = random_kron(rng, (3, 4))
    with pytest.raises(ValueError):
        UnionStrategy([(0.5, k), (0.6, k)])
    with pytest.raises(ValueError):
        UnionStrategy([(0.5, k), (0.5, random_kron(rng, (4, 3)))])
    u = UnionStrategy([(0.25, k), (0.75, random_kron(rng, (3, 4)))])
    assert u.matrix().sensitivity() == pytest.approx(1.0, abs=1e-12)


def test_opt_plus_single_group_is_opt_kron():
    s = schema(8, 8)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX, "a1": PREFIX})])
    u = opt_plus(w, partition=[[0]], restarts=2, seed=0)
    k = opt_kron(w, restarts=2, seed=1000)
    assert u.terms[0][0] == 1.0
    for x, y in zip(u.terms[0][1].factors, k.factors):
        np.testing.assert_array_equal(x, y)


def test_opt_plus_range_total():
    s = schema(16, 16)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": ALLRANGE}), ProductTerm(1, {"a1": ALLRANGE})])
    u = opt_plus(w, restarts=2, seed=0)
    k = opt_kron(w, restarts=2, seed=0)
    A = u.matrix()
    assert A.sensitivity() == pytest.approx(1.0, abs=1e-12)
    assert u.objective == pytest.approx(dense_error(w, A), rel=1e-8)
    assert u.objective <= k.objective


def test_opt_plus_per_term_marginals():
    s = schema(3, 3, 3)
    w = up_to_kway_marginals(s, 2)
    w = LogicalWorkload(s, [t for t in w.terms if len(t.blocks) == 2])
    u = opt_plus(w, partition=[[0], [1], [2]], restarts=2, seed=0)
    assert len(u.terms) == 3
    assert u.objective == pytest.approx(dense_error(w, u.matrix()), rel=1e-8)


def test_large_union_bound_is_upper_bound(rng, monkeypatch):
    # the per-group bound never undercuts the exact error
    s = schema(6, 6)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX}), ProductTerm(1, {"a1": PREFIX})])
    u = UnionStrategy([(0.5, random_kron(rng, (6, 6))), (0.5, random_kron(rng, (6, 6)))], partition=[[0], [1]])
    exact = union_strategy_error(w, u)
    monkeypatch.setattr("hdmm.kron.DENSE_ERROR_MAX_N", 1)
    bound = union_strategy_error(w, u)
    assert bound >= exact * (1 - 1e-12)
