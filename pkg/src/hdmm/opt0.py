"""Strategy optimization over the p-Identity family for explicit workloads.

The objective is ``C(Theta) = tr[(A^T A)^{-1} W^T W]`` for ``A = A(Theta)``.  Writing
``delta = 1 + colsum(Theta)``, ``Yt = diag(delta) Y diag(delta)`` and
``R = (I_p + Theta Theta^T)^{-1}``, the Woodbury identity gives

    C = tr(Yt) - tr(R Theta Yt Theta^T)

and every quantity below is evaluated with O(p n^2) work, or O(p^2 n) when the
Gram is a structured :class:`~hdmm.implicit.ImplicitMatrix` with a fast product.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .implicit import ImplicitMatrix, PIdentity, RankError, Scaled, ShapeError
from .validation import check_gram, check_theta

logger = logging.getLogger(__name__)

MAX_ITER = 1000
FTOL = 1e-9
GTOL = 1e-6


def build_pidentity(theta):
    """Return the p-Identity strategy ``A(Theta) = [I; Theta] D``."""
    return PIdentity(check_theta(theta))


def _inner_inverse(theta):
    # R = (I + Theta Theta^T)^{-1}; eigenvalues of I + Theta Theta^T are >= 1, so the
    # explicit inverse is well conditioned and a GEMM beats a wide triangular solve
    p = theta.shape[0]
    K = np.eye(p) + theta @ theta.T
    try:
        c = scipy.linalg.cho_factor(K, check_finite=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - K is SPD by construction
        raise RankError(str(exc)) from exc
    return scipy.linalg.cho_solve(c, np.eye(p), check_finite=False)


def _gram_parts(Y):
    """Return ``(X -> X Y, diag(Y))`` for a dense or implicit symmetric Gram."""
    if isinstance(Y, ImplicitMatrix):
        return (lambda X: Y.matmat(X.T).T), Y.diagonal()
    return (lambda X: X @ Y), np.diag(Y)


def _objective_and_gradient(theta, Y, need_grad=True, parts=None):
    times, diagY = parts if parts is not None else _gram_parts(Y)
    delta = 1.0 + theta.sum(axis=0)
    R = _inner_inverse(theta)
    # the only product with Y: P = Theta D Y, so Theta Yt = P D and (R Theta D) Y = R P
    RP = R @ times(theta * delta)
    RTY = RP * delta
    f = np.dot(diagY, delta**2) - np.einsum("ij,ij->", RTY, theta)
    if not need_grad:
        return f, None
    RT = R @ theta
    # Theta Z = R Theta Yt Binv with Binv = I - Theta^T R Theta, using Theta Binv = R Theta
    TZ = RTY - (RTY @ theta.T) @ RT
    # derivative through delta: 2 (Binv o Y) delta = 2 [diag(Y) delta - colsum(Theta o R P)]
    g = 2.0 * (diagY * delta - np.einsum("ij,ij->j", theta, RP))
    return f, -2.0 * TZ + g[None, :]


def _gram(gramW, n=None):
    if isinstance(gramW, ImplicitMatrix):
        if gramW.rows != gramW.cols or (n is not None and gramW.rows != n):
            raise ShapeError(f"Gram operator has shape {gramW.shape}, expected square of size {n}")
        return gramW
    return check_gram(gramW, n)


def objective(theta, gramW):
    """Expected-error objective ``tr[(A^T A)^{-1} W^T W]`` of ``A(theta)``."""
    theta = check_theta(theta)
    Y = _gram(gramW, theta.shape[1])
    return float(_objective_and_gradient(theta, Y, need_grad=False)[0])


def gradient(theta, gramW):
    """Gradient of :func:`objective` with respect to ``theta`` (p x n)."""
    theta = check_theta(theta)
    Y = _gram(gramW, theta.shape[1])
    return _objective_and_gradient(theta, Y)[1]


def objective_and_gradient(theta, gramW):
    theta = check_theta(theta)
    Y = _gram(gramW, theta.shape[1])
    return _objective_and_gradient(theta, Y)


@dataclass
class OptResult:
    """Outcome of a p-Identity optimization.

    Attributes
    ----------
    params : ndarray of shape (p, n)
        Optimized nonnegative Theta.
    objective : float
        Objective value on the caller's (unnormalized) Gram.
    iterations : int
        Quasi-Newton iterations used by the winning restart.
    converged : bool
        Whether the winning restart met a stopping criterion.
    trace : list of float
        Objective after each accepted iteration of the winning restart.
    """

    params: np.ndarray
    objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def minimize_theta(Y, theta0, max_iter=MAX_ITER):
    """Run one bound-constrained L-BFGS descent from ``theta0`` on Gram ``Y``."""
    p, n = theta0.shape
    trace = []
    parts = _gram_parts(Y)

    last = {}

    def fun(x):
        f, g = _objective_and_gradient(x.reshape(p, n), Y, parts=parts)
        last["x"], last["f"] = x.copy(), f
        return f, g.ravel()

    def record(xk):
        if "x" in last and np.array_equal(xk, last["x"]):
            trace.append(float(last["f"]))
        else:
            trace.append(float(_objective_and_gradient(xk.reshape(p, n), Y, need_grad=False, parts=parts)[0]))

    res = scipy.optimize.minimize(
        fun,
        theta0.ravel(),
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * (p * n),
        callback=record,
        options={"maxiter": max_iter, "ftol": FTOL, "gtol": GTOL},
    )
    theta = np.maximum(res.x.reshape(p, n), 0.0)
    return theta, float(res.fun), int(res.nit), bool(res.success), trace


def _restart_rng(seed, r):
    return np.random.default_rng([int(seed), int(r)])


def opt0(gramW, p, restarts=25, seed=0, threads=1, init=None):
    """Optimize a p-Identity strategy for an explicit workload Gram matrix.

    Parameters
    ----------
    gramW : array_like of shape (n, n) or ImplicitMatrix
        Symmetric positive semidefinite ``W^T W``.  An implicit operator
        (for example :class:`~hdmm.implicit.MinMaxGram`) avoids the dense
        O(p n^2) product.
    p : int
        Number of learned rows in Theta (clamped to ``n``).
    restarts : int
        Independent random initializations; the best objective wins.
    seed : int
        Master seed; restart ``r`` draws its start from ``(seed, r)``.
    threads : int
        Restarts evaluated concurrently; the result does not depend on it.
    init : ndarray, optional
        Warm start used in place of the first random initialization.

    Returns
    -------
    OptResult
    """
    Y = _gram(gramW)
    n = Y.shape[0]
    p = int(p)
    if p < 1:
        raise ValueError("p must be at least 1")
    if int(restarts) < 1:
        raise ValueError("restarts must be at least 1")
    p = min(p, n)
    dense = not isinstance(Y, ImplicitMatrix)
    scale = float(np.trace(Y)) if dense else float(Y.diagonal().sum())
    if scale <= 0:
        # zero workload: every strategy has zero error
        return OptResult(np.zeros((p, n)), 0.0, 0, True, [0.0])
    Yn = Y / scale if dense else Scaled(Y, 1.0 / scale)

    def run(r):
        if r == 0 and init is not None:
            theta0 = check_theta(init).copy()
            if theta0.shape != (p, n):
                raise ValueError(f"init must have shape {(p, n)}")
        else:
            theta0 = _restart_rng(seed, r).random((p, n))
        return minimize_theta(Yn, theta0)

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = [run(r) for r in range(restarts)]

    best = min(range(len(results)), key=lambda i: (results[i][1], i))
    theta, f, nit, ok, trace = results[best]
    logger.debug("opt0 n=%d p=%d restarts=%d best=%d objective=%g", n, p, restarts, best, f * scale)
    return OptResult(theta, f * scale, nit, ok, [t * scale for t in trace])
