"""Select, measure, reconstruct: the end-to-end private answering pipeline.

Only :func:`measure` reads the data vector.  Strategy selection sees the
workload alone, and reconstruction and answering only post-process the noisy
measurements.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import implicit as im
from .kron import KronStrategy, UnionStrategy, default_partition, opt_kron, opt_plus, union_error
from .marginals import MarginalsStrategy, SpectralGram, gram_pinv_spectrum, marg_objective, opt_marg
from .validation import check_count, check_epsilon, check_vector
from .workload import LogicalWorkload, Schema, frobenius_sq, impvec

logger = logging.getLogger(__name__)

OPERATORS = ("kron", "plus", "marginals")
#: Epsilon at or above which measurement adds no noise (testing shortcut).
NOISELESS_EPSILON = 1e12
#: Marginals optimization is skipped beyond this many attributes (2^d weights, 4^d work).
MAX_MARGINALS_D = 12


class DataVector:
    """Explicit count vector over the flattened domain of ``schema``."""

    def __init__(self, schema, counts):
        if not isinstance(schema, Schema):
            schema = Schema(schema)
        counts = check_vector(counts, schema.N, "counts")
        if np.any(counts < 0):
            warnings.warn("data vector has negative entries", stacklevel=2)
        self.schema = schema
        self.counts = counts

    def __len__(self):
        return self.counts.shape[0]


@dataclass
class PrivateAnswer:
    """Output of :func:`run_hdmm`."""

    noisy_measurements: np.ndarray
    reconstructed: np.ndarray
    workload_answers: np.ndarray
    epsilon: float
    seed: int
    strategy: object = None
    converged: bool = True


# -- strategies --------------------------------------------------------------------------


def strategy_matrix(strategy):
    """Implicit strategy matrix normalized to unit sensitivity."""
    if isinstance(strategy, (KronStrategy, UnionStrategy)):
        return strategy.matrix()
    if isinstance(strategy, MarginalsStrategy):
        return im.Marginals(strategy.theta / strategy.theta.sum(), strategy.domain)
    raise TypeError(f"unsupported strategy type {type(strategy).__name__}")


def strategy_error(workload, strategy):
    """``||A||_1^2 ||W A^+||_F^2`` of a unit-sensitivity strategy (epsilon factored out)."""
    if tuple(workload.schema.sizes) != tuple(strategy.domain):
        raise ValueError(f"strategy domain {tuple(strategy.domain)} does not match workload {workload.schema.sizes}")
    if isinstance(strategy, (KronStrategy, UnionStrategy)):
        return union_error(workload, strategy)
    if isinstance(strategy, MarginalsStrategy):
        return marg_objective(strategy.theta, workload)
    raise TypeError(f"unsupported strategy type {type(strategy).__name__}")


def opt_hdmm(workload, operators=OPERATORS, restarts=25, seed=0, threads=1):
    """Race the enabled optimizers and keep the lowest-error strategy.

    Parameters
    ----------
    workload : LogicalWorkload
    operators : iterable of str
        Subset of ``{"kron", "plus", "marginals"}``.
    restarts : int
    seed : int
        Each operator derives its own stream from this seed.
    threads : int

    Returns
    -------
    KronStrategy, UnionStrategy or MarginalsStrategy
        Never worse than the Identity strategy, which is the starting point.
        ``objective`` holds the squared error with epsilon factored out.
    """
    if not isinstance(workload, LogicalWorkload):
        raise TypeError("expected a LogicalWorkload")
    operators = set(operators)
    unknown = operators - set(OPERATORS)
    if unknown:
        raise ValueError(f"unknown operators {sorted(unknown)}; expected a subset of {list(OPERATORS)}")
    restarts = check_count(restarts, "restarts")
    best = KronStrategy.identity(workload.schema.sizes)
    best.objective = frobenius_sq(workload)
    logger.info("identity error %g", best.objective)

    def consider(name, strat):
        nonlocal best
        err = strategy_error(workload, strat)
        strat.objective = err
        logger.info("%s error %g", name, err)
        if err < best.objective:
            best = strat

    if "kron" in operators:
        consider("kron", opt_kron(workload, restarts=restarts, seed=seed, threads=threads))
    if "plus" in operators:
        partition = default_partition(workload)
        if len(partition) > 1:
            consider("plus", opt_plus(workload, partition, restarts=restarts, seed=seed + 1, threads=threads))
    if "marginals" in operators and workload.schema.d <= MAX_MARGINALS_D:
        # a lone attribute only offers {Total, Identity}; still cheap, so keep it in the race
        consider("marginals", opt_marg(workload, restarts=restarts, seed=seed + 2, threads=threads))
    return best


# -- measure / reconstruct / answer ------------------------------------------------------


def laplace_noise(size, scale, seed):
    """Seeded Laplace(0, scale) draws by inverse-CDF sampling.

    Uniforms come from a Philox counter-based generator keyed by ``seed``;
    ``u - 1/2`` is mapped through ``-scale * sign(v) * log(1 - 2|v|)``.
    """
    u = np.random.Generator(np.random.Philox(int(seed))).random(int(size))
    v = u - 0.5
    tail = np.maximum(1.0 - 2.0 * np.abs(v), np.finfo(float).tiny)
    return -scale * np.sign(v) * np.log(tail)


def measure(strategy, data, epsilon, seed):
    """Noisy strategy answers ``A x + Lap(||A||_1 / epsilon)``."""
    epsilon = check_epsilon(epsilon)
    if not isinstance(data, DataVector):
        raise TypeError("data must be a DataVector")
    A = strategy_matrix(strategy)
    if A.cols != len(data):
        raise ValueError(f"strategy has {A.cols} columns, data vector has {len(data)} entries")
    y = A.matvec(data.counts)
    if epsilon >= NOISELESS_EPSILON:
        return y
    scale = A.sensitivity() / epsilon
    return y + laplace_noise(A.rows, scale, seed)


class ReconstructionResult(np.ndarray):
    """Reconstructed data vector carrying ``converged`` and ``residual``."""


def reconstruct(strategy, y, tol=1e-8, max_iter=None):
    """Least-squares estimate ``A^+ y`` of the data vector.

    Kronecker and marginals strategies use closed-form pseudo-inverses; union
    strategies fall back to an iterative solver whose convergence is reported
    on the returned array.
    """
    A = strategy_matrix(strategy)
    y = check_vector(y, A.rows, "measurements")
    converged, residual = True, 0.0
    if isinstance(strategy, KronStrategy):
        x = A.pinv().matvec(y)
    elif isinstance(strategy, MarginalsStrategy):
        theta = strategy.theta / strategy.theta.sum()
        G = SpectralGram(gram_pinv_spectrum(theta**2, strategy.domain), strategy.domain)
        x = G.matvec(A.rmatvec(y))
    else:
        x = im.lstsqr_iterative(A, y, tol=tol, max_iter=max_iter)
        converged, residual = x.converged, x.residual
        if not converged:
            logger.warning("iterative reconstruction stopped with residual %g", residual)
    out = np.asarray(x, dtype=float).view(ReconstructionResult)
    out.converged = bool(converged)
    out.residual = float(residual)
    return out


def answer(workload, xbar):
    """Workload answers ``W xbar``, ordered by term then row-major Kronecker row."""
    xbar = check_vector(xbar, workload.schema.N, "xbar")
    return impvec(workload).matvec(xbar)


def run_hdmm(workload, data, epsilon, operators=OPERATORS, restarts=25, seed=0, threads=1, strategy=None):
    """Optimize (unless ``strategy`` is given), measure, reconstruct and answer."""
    epsilon = check_epsilon(epsilon)
    if not isinstance(data, DataVector):
        raise TypeError("data must be a DataVector")
    if data.schema.sizes != workload.schema.sizes:
        raise ValueError(f"data domain {data.schema.sizes} differs from workload domain {workload.schema.sizes}")
    if strategy is None:
        strategy = opt_hdmm(workload, operators, restarts=restarts, seed=seed, threads=threads)
    y = measure(strategy, data, epsilon, seed=seed)
    xbar = reconstruct(strategy, y)
    return PrivateAnswer(
        noisy_measurements=y,
        reconstructed=np.asarray(xbar),
        workload_answers=answer(workload, xbar),
        epsilon=epsilon,
        seed=int(seed),
        strategy=strategy,
        converged=xbar.converged,
    )
