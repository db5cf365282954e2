import inspect

import numpy as np
import pytest

from hdmm import implicit as im
from hdmm import mechanism
from hdmm.kron import KronStrategy, UnionStrategy
from hdmm.marginals import MarginalsStrategy, opt_marg
from hdmm.mechanism import (
    DataVector, answer, laplace_noise, measure, opt_hdmm, reconstruct, run_hdmm, strategy_error,
    strategy_matrix,
)
from hdmm.workload import (
    ALLRANGE, IDENTITY, PREFIX, LogicalWorkload, ProductTerm, frobenius_sq, identity_workload, impvec,
    prefix_product, up_to_kway_marginals,
)
from conftest import schema


def test_data_vector():
    s = schema(2, 3)
    assert len(DataVector(s, np.arange(6.0))) == 6
    with pytest.raises(ValueError):
        DataVector(s, np.ones(5))
    with pytest.warns(UserWarning):
        DataVector(s, -np.ones(6))


def test_identity_workload_selects_identity():
    w = identity_workload(schema(4))
    strat = opt_hdmm(w, restarts=2)
    assert strat.objective == pytest.approx(frobenius_sq(w))
    assert np.sqrt(frobenius_sq(w) / strat.objective) == pytest.approx(1.0)


def test_opt_hdmm_validation():
    w = identity_workload(schema(4))
    with pytest.raises(ValueError):
        opt_hdmm(w, operators={"bogus"})
    with pytest.raises(TypeError):
        opt_hdmm("not a workload")


def test_marginals_operator_wins_on_marginals():
    w = up_to_kway_marginals(schema(5, 5, 5, 5), 2)
    strat = opt_hdmm(w, restarts=3, seed=0)
    assert isinstance(strat, MarginalsStrategy)
    kron_only = opt_hdmm(w, operators={"kron"}, restarts=3, seed=0)
    assert strat.objective < kron_only.objective


def test_kron_wins_on_prefix():
    w = prefix_product(schema(64))
    strat = opt_hdmm(w, restarts=3, seed=0)
    assert isinstance(strat, KronStrategy)
    assert strat.objective < opt_marg(w, restarts=3).objective


def test_never_worse_than_identity():
    # a 1-D Identity workload: nothing beats Identity, so it must be returned as-is
    w = identity_workload(schema(7, 3))
    strat = opt_hdmm(w, restarts=2, seed=3)
    assert strat.objective <= frobenius_sq(w) * (1 + 1e-12)


def test_laplace_noise_moments_and_determinism():
    z = laplace_noise(100_000, 1.0, seed=11)
    assert np.var(z) == pytest.approx(2.0, rel=0.03)
    assert np.mean(z) == pytest.approx(0.0, abs=0.02)
    np.testing.assert_array_equal(z, laplace_noise(100_000, 1.0, seed=11))
    assert not np.array_equal(z[:10], laplace_noise(10, 1.0, seed=12))
    assert np.all(np.isfinite(z))


def test_measure_examples(rng):
    s = schema(6)
    d = DataVector(s, rng.integers(0, 5, 6).astype(float))
    strat = KronStrategy([rng.random((2, 6))])
    A = strategy_matrix(strat)
    np.testing.assert_array_equal(measure(strat, d, 1e12, seed=0), A.matvec(d.counts))
    np.testing.assert_array_equal(measure(strat, d, 1.0, seed=4), measure(strat, d, 1.0, seed=4))
    with pytest.raises(ValueError):
        measure(strat, d, 0.0, seed=0)
    with pytest.raises(ValueError):
        measure(strat, d, -1.0, seed=0)


def test_measure_variance():
    s = schema(1)
    strat = KronStrategy.identity((1,))
    d = DataVector(s, [3.0])
    noise = np.array([measure(strat, d, 1.0, seed=t)[0] - 3.0 for t in range(20000)])
    assert np.var(noise) == pytest.approx(2.0, rel=0.06)


def test_reconstruct_examples(rng):
    strat = KronStrategy.identity((5,))
    y = rng.normal(size=5)
    np.testing.assert_allclose(reconstruct(strat, np.r_[y, 0.0]), y)
    kron = KronStrategy([rng.random((2, 4)), rng.random((1, 3))])
    x = rng.normal(size=12)
    np.testing.assert_allclose(reconstruct(kron, strategy_matrix(kron).matvec(x)), x, atol=1e-10)


def test_reconstruct_marginals_matches_dense(rng):
    strat = MarginalsStrategy(rng.random(4), (3, 4))
    A = strategy_matrix(strat)
    assert A.sensitivity() == pytest.approx(1.0)
    y = rng.normal(size=A.rows)
    np.testing.assert_allclose(reconstruct(strat, y), np.linalg.pinv(A.materialize()) @ y, atol=1e-8)


def test_reconstruct_singular_marginals(rng):
    theta = np.array([0.0, 0.3, 0.7, 0.0])
    strat = MarginalsStrategy(theta, (3, 4))
    A = strategy_matrix(strat)
    y = rng.normal(size=A.rows)
    np.testing.assert_allclose(reconstruct(strat, y), np.linalg.pinv(A.materialize()) @ y, atol=1e-8)


def test_reconstruct_union(rng):
    k1 = KronStrategy([rng.random((1, 4)), np.zeros((1, 3))])
    k2 = KronStrategy([np.zeros((1, 4)), rng.random((2, 3))])
    u = UnionStrategy([(0.5, k1), (0.5, k2)])
    A = strategy_matrix(u)
    x = rng.normal(size=12)
    xb = reconstruct(u, A.matvec(x))
    assert xb.converged
    np.testing.assert_allclose(xb, x, atol=1e-8)


def test_answer_examples():
    s = schema(3)
    np.testing.assert_array_equal(answer(LogicalWorkload(s, [ProductTerm(1, {})]), [1, 2, 3]), [6])
    np.testing.assert_array_equal(answer(identity_workload(s), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(answer(prefix_product(s), [1, 2, 3]), [1, 3, 6])
    with pytest.raises(ValueError):
        answer(identity_workload(s), [1, 2])


def test_answer_order():
    s = schema(2, 2)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": IDENTITY}), ProductTerm(2, {"a1": IDENTITY})])
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(answer(w, x), [3, 7, 8, 12])


def test_run_hdmm_noiseless_and_deterministic(rng):
    s = schema(4, 5)
    w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX}), ProductTerm(1, {"a1": ALLRANGE})])
    d = DataVector(s, rng.integers(0, 20, 20).astype(float))
    r = run_hdmm(w, d, 1e12, restarts=2, seed=0)
    np.testing.assert_allclose(r.workload_answers, impvec(w).matvec(d.counts), atol=1e-6)
    assert len(r.workload_answers) == w.rows
    a = run_hdmm(w, d, 1.0, restarts=2, seed=5)
    b = run_hdmm(w, d, 1.0, restarts=2, seed=5)
    assert a.workload_answers.tobytes() == b.workload_answers.tobytes()
    assert a.noisy_measurements.tobytes() == b.noisy_measurements.tobytes()
    with pytest.raises(ValueError):
        run_hdmm(w, DataVector(schema(20), d.counts), 1.0)


def test_strategy_error_domain_mismatch():
    w = identity_workload(schema(4))
    with pytest.raises(ValueError):
        strategy_error(w, KronStrategy.identity((5,)))


def test_selection_never_reads_data():
    # privacy by dataflow: only measure() accepts the data vector
    for fn in (opt_hdmm, strategy_error, strategy_matrix, reconstruct, answer):
        assert "data" not in inspect.signature(fn).parameters
    assert "data" in inspect.signature(measure).parameters
    src = inspect.getsource(mechanism.run_hdmm)
    assert src.count("data") and "measure(strategy, data" in src
    assert "opt_hdmm(workload, operators" in src


@pytest.mark.parametrize("kind", ["prefix", "union"])
def test_monte_carlo_matches_closed_form(kind, rng):
    if kind == "prefix":
        s = schema(16)
        w = prefix_product(s)
    else:
        s = schema(4, 4)
        w = LogicalWorkload(s, [ProductTerm(1, {"a0": PREFIX}), ProductTerm(1, {"a1": PREFIX})])
    strat = opt_hdmm(w, restarts=2, seed=0)
    from hdmm.error import expected_error

    expected = expected_error(w, strat, 1.0)
    d = DataVector(s, rng.integers(0, 9, s.N).astype(float))
    truth = answer(w, d.counts)
    errs = [np.sum((answer(w, reconstruct(strat, measure(strat, d, 1.0, seed=t))) - truth) ** 2) for t in range(400)]
    assert np.mean(errs) == pytest.approx(expected, rel=0.12)
