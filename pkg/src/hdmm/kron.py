"""Kronecker-product strategies for union-of-products workloads.

For ``A = A_1 ⊗ ... ⊗ A_d`` the squared error of a union workload splits into
per-attribute pieces,

    ||W A^+||_F^2 = sum_j w_j^2 prod_i tr[(A_i^T A_i)^{-1} (W_i^T W_i)^(j)],

so fixing every factor but one leaves an explicit single-attribute problem
whose Gram is a weighted sum of that attribute's term Grams.  Block descent
over the attributes therefore only ever calls :func:`hdmm.opt0.minimize_theta`.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from . import implicit as im
from .opt0 import _objective_and_gradient, minimize_theta
from .validation import check_theta
from .workload import LogicalWorkload, factor_grams, frobenius_sq

logger = logging.getLogger(__name__)

SWEEP_TOL = 1e-4
MAX_SWEEPS = 50
#: Largest domain for which union strategies get an exact dense error.
DENSE_ERROR_MAX_N = 4096


@dataclass
class KronStrategy:
    """Product of p-Identity factors, one ``theta`` (p_i x n_i) per attribute.

    A zero ``theta`` gives the Identity factor.  Every factor has unit
    sensitivity, so the product does too.
    """

    factors: list
    objective: float | None = field(default=None, compare=False)
    converged: bool = field(default=True, compare=False)

    def __post_init__(self):
        self.factors = [check_theta(t) for t in self.factors]
        if not self.factors:
            raise ValueError("KronStrategy needs at least one factor")

    @classmethod
    def identity(cls, domain):
        return cls([np.zeros((1, int(n))) for n in domain])

    @property
    def domain(self):
        return tuple(t.shape[1] for t in self.factors)

    def matrix(self):
        return im.Kron([im.PIdentity(t) for t in self.factors])


@dataclass
class UnionStrategy:
    """Weighted stack of Kronecker strategies whose budget shares sum to 1."""

    terms: list  # of (share, KronStrategy)
    partition: list | None = None  # workload term indices served by each group
    objective: float | None = field(default=None, compare=False)
    converged: bool = field(default=True, compare=False)

    def __post_init__(self):
        if not self.terms:
            raise ValueError("UnionStrategy needs at least one term")
        shares = np.array([float(s) for s, _ in self.terms])
        if np.any(shares <= 0) or np.any(shares > 1) or abs(shares.sum() - 1) > 1e-9:
            raise ValueError("budget shares must lie in (0, 1] and sum to 1")
        domains = {k.domain for _, k in self.terms}
        if len(domains) != 1:
            raise ValueError("all union terms must share a domain")
        self.terms = [(float(s), k) for s, k in self.terms]

    @property
    def domain(self):
        return self.terms[0][1].domain

    def matrix(self):
        return im.Stack([(s, k.matrix()) for s, k in self.terms])


def _factor_errors(grams, factors):
    # E[j, i] = tr[(A_i^T A_i)^{-1} G_ij], sharing work between identical Gram objects
    k, d = len(grams), len(factors)
    E = np.empty((k, d))
    cache = {}
    for j in range(k):
        for i in range(d):
            key = (id(grams[j][i]), i)
            if key not in cache:
                cache[key] = _objective_and_gradient(factors[i], grams[j][i], need_grad=False)[0]
            E[j, i] = cache[key]
    return E


def _weights(workload):
    return np.array([t.weight for t in workload.terms])


def union_error(workload, strat, grams=None):
    """``||W A^+||_F^2`` for a Kronecker strategy, from per-factor traces."""
    if isinstance(strat, UnionStrategy):
        return union_strategy_error(workload, strat, grams)
    _check_domain(workload, strat)
    grams = factor_grams(workload, structured=True) if grams is None else grams
    E = _factor_errors(grams, strat.factors)
    return float(np.sum(_weights(workload) ** 2 * np.prod(E, axis=1)))


def surrogate_gram(workload, strat, i, grams=None):
    """Gram of attribute ``i`` whose p-Identity objective equals the union error.

    ``sum_j c_j^2 (W_i^T W_i)^(j)`` with ``c_j = w_j prod_{i' != i} ||W_i'^(j) A_i'^+||_F``.
    """
    _check_domain(workload, strat)
    grams = factor_grams(workload) if grams is None else grams
    E = _factor_errors(grams, strat.factors)
    return _surrogate(grams, E, _weights(workload), i)


def _surrogate(grams, E, w, i):
    others = np.prod(np.delete(E, i, axis=1), axis=1)
    c2 = w**2 * others
    seen = {}
    for j, g in enumerate(grams):
        seen.setdefault(id(g[i]), [g[i], 0.0])[1] += c2[j]
    if any(isinstance(g, im.ImplicitMatrix) for g, _ in seen.values()):
        return im.GramSum([(c, g if isinstance(g, im.ImplicitMatrix) else im.Dense(g)) for g, c in seen.values()])
    n = grams[0][i].shape[0]
    out = np.zeros((n, n))
    for g, c in seen.values():
        out += c * g
    return out


def _normalized(Y):
    # (Y / tr Y, tr Y) for dense or implicit Grams
    if isinstance(Y, im.ImplicitMatrix):
        scale = float(Y.diagonal().sum())
        return im.Scaled(Y, 1.0 / scale) if scale > 0 else Y, scale
    scale = float(np.trace(Y))
    return (Y / scale if scale > 0 else Y), scale


def _check_domain(workload, strat):
    if tuple(workload.schema.sizes) != strat.domain:
        raise ValueError(f"strategy domain {strat.domain} does not match schema {workload.schema.sizes}")


def default_p(workload):
    """1 for attributes carrying only Identity/Total blocks, else ``ceil(n/16)``."""
    out = []
    for i, n in enumerate(workload.schema.sizes):
        trivial = all(workload.blocks(j)[i].is_trivial for j in range(workload.k))
        out.append(1 if trivial else min(n, max(1, ceil(n / 16))))
    return out


def _block_descent(workload, grams, factors, single_sweep=False, trace=None):
    w = _weights(workload)
    d = len(factors)
    E = _factor_errors(grams, factors)
    err = float(np.sum(w**2 * np.prod(E, axis=1)))
    if trace is not None:
        trace.append(err)
    converged = False
    for sweep in range(1 if single_sweep else MAX_SWEEPS):
        before = err
        for i in range(d):
            Y, scale = _normalized(_surrogate(grams, E, w, i))
            if scale <= 0:
                continue
            theta, _, _, _, _ = minimize_theta(Y, factors[i])
            factors[i] = theta
            E = _factor_errors(grams, factors)
        err = float(np.sum(w**2 * np.prod(E, axis=1)))
        if trace is not None:
            trace.append(err)
        if before - err <= SWEEP_TOL * before:
            converged = True
            break
    return factors, err, converged or single_sweep


def opt_kron(workload, p=None, restarts=25, seed=0, threads=1, trace=None):
    """Optimize a Kronecker strategy by block coordinate descent.

    Parameters
    ----------
    workload : LogicalWorkload
    p : sequence of int, optional
        Rows of Theta per attribute; :func:`default_p` when omitted.
    restarts : int
        Random starts; restart ``r`` draws every factor from ``(seed, r)``.
    seed : int
    threads : int
        Concurrent restarts; the result does not depend on it.
    trace : list, optional
        Receives the union error after each sweep of the winning restart.

    Returns
    -------
    KronStrategy
        Best strategy, with ``objective`` set to its union error.
    """
    if not isinstance(workload, LogicalWorkload):
        raise TypeError("expected a LogicalWorkload")
    sizes = workload.schema.sizes
    p = default_p(workload) if p is None else [min(int(pi), n) for pi, n in zip(p, sizes)]
    if len(p) != len(sizes) or any(pi < 1 for pi in p):
        raise ValueError("p must give a positive count for every attribute")
    if int(restarts) < 1:
        raise ValueError("restarts must be at least 1")
    grams = factor_grams(workload, structured=True)

    def run(r):
        rng = np.random.default_rng([int(seed), int(r)])
        factors = [rng.random((pi, n)) for pi, n in zip(p, sizes)]
        local = []
        # a single attribute has nothing to alternate with: one descent is the optimum
        out = _block_descent(workload, grams, factors, single_sweep=len(sizes) == 1, trace=local)
        return (*out, local)

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = [run(r) for r in range(restarts)]
    best = min(range(len(results)), key=lambda i: (results[i][1], i))
    factors, err, ok, local = results[best]
    if trace is not None:
        trace.extend(local)
    logger.debug("opt_kron domain=%s restarts=%d best=%d error=%g", sizes, restarts, best, err)
    return KronStrategy(factors, objective=err, converged=ok)


def default_partition(workload):
    """Split terms into at most two groups by support pattern.

    Terms sharing the set of non-Total attributes form a pattern.  Patterns are
    assigned, heaviest first, to whichever of two groups has less Frobenius
    mass so far.
    """
    patterns = {}
    for j in range(workload.k):
        patterns.setdefault(workload.support(j), []).append(j)
    if len(patterns) <= 2:
        groups = list(patterns.values())
    else:
        mass = {}
        for pat, idx in patterns.items():
            sub = LogicalWorkload(workload.schema, [workload.terms[j] for j in idx])
            mass[pat] = frobenius_sq(sub)
        order = sorted(patterns, key=lambda s: (-mass[s], sorted(s)))
        groups, load = [[], []], [0.0, 0.0]
        for pat in order:
            g = 0 if load[0] <= load[1] else 1
            groups[g].extend(patterns[pat])
            load[g] += mass[pat]
    groups = [sorted(g) for g in groups if g]
    return sorted(groups, key=lambda g: g[0])


def _subworkload(workload, idx):
    return LogicalWorkload(workload.schema, [workload.terms[j] for j in idx])


def opt_plus(workload, partition=None, p=None, restarts=25, seed=0, threads=1, shares=None):
    """Union of Kronecker strategies, one optimized per group of terms.

    Each group's strategy receives budget share ``1/l`` unless ``shares`` is
    given, so the stacked strategy has unit sensitivity.
    """
    partition = default_partition(workload) if partition is None else [list(g) for g in partition]
    flat = sorted(j for g in partition for j in g)
    if any(not g for g in partition):
        raise ValueError("partition groups must be nonempty")
    if flat != list(range(workload.k)):
        raise ValueError("partition must cover every term exactly once")
    l = len(partition)
    shares = [1.0 / l] * l if shares is None else [float(s) for s in shares]
    if len(shares) != l:
        raise ValueError("need one share per group")
    terms = []
    for g, (idx, s) in enumerate(zip(partition, shares)):
        sub = _subworkload(workload, idx)
        # each group gets its own seed stream, offset from the master seed
        strat = opt_kron(sub, p, restarts=restarts, seed=int(seed) + 1000 * (g + 1), threads=threads)
        terms.append((s, strat))
    out = UnionStrategy(terms, partition=partition)
    out.objective = union_strategy_error(workload, out)
    out.converged = all(k.converged for _, k in terms)
    return out


def union_strategy_error(workload, strat, grams=None, partition=None):
    """``||W A^+||_F^2`` for a stacked union strategy.

    Exact (dense normal equations) when the domain has at most
    :data:`DENSE_ERROR_MAX_N` cells.  Larger domains return the upper bound in
    which each group's terms are answered from that group's measurements only,
    ``sum_l ||W_l A_l^+||_F^2 / s_l^2``; this needs ``partition``.
    """
    N = int(np.prod(strat.domain))
    if N <= DENSE_ERROR_MAX_N:
        return _dense_union_error(workload, strat, grams)
    partition = strat.partition if partition is None else partition
    if partition is None:
        raise ValueError("partition required to bound the error of a large union strategy")
    grams = factor_grams(workload, structured=True) if grams is None else grams
    total = 0.0
    for (s, k), idx in zip(strat.terms, partition):
        sub_grams = [grams[j] for j in idx]
        E = _factor_errors(sub_grams, k.factors)
        total += float(np.sum(_weights(workload)[idx] ** 2 * np.prod(E, axis=1))) / s**2
    return total


def _kron_all(mats):
    mats = [m.materialize() if isinstance(m, im.ImplicitMatrix) else m for m in mats]
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def _dense_union_error(workload, strat, grams=None):
    grams = factor_grams(workload) if grams is None else grams
    WtW = sum(t.weight**2 * _kron_all(g) for t, g in zip(workload.terms, grams))
    AtA = sum(s**2 * _kron_all([im.PIdentity(t).gram().entries for t in k.factors]) for s, k in strat.terms)
    return float(np.trace(np.linalg.solve(AtA, WtW)))
