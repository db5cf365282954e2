"""Optimization over weighted-marginals strategies.

Masks are integers in ``[0, 2^d)``; bit ``i`` (LSB is attribute 0) set means the
marginal keeps attribute ``i`` (Identity factor), clear means it sums the
attribute out (Total factor).  With ``C(a) = ⊗_i (I if bit i else 1)`` the
strategy Gram is ``G(theta^2)`` where ``G(v) = sum_a v_a C(a)``, and products
of such Grams stay in the family: ``G(u) G(v) = G(X(u) v)``.

The algebra spanned by the ``C(a)`` is commutative.  Its joint eigenspaces are
indexed by masks ``c``: on attribute ``i`` the space holds constant vectors
when bit ``i`` of ``c`` is clear and mean-zero vectors when it is set.  ``C(a)``
acts on eigenspace ``c`` as ``C(a)`` when ``c`` is a submask of ``a`` and as 0
otherwise, so the eigenvalues of ``G(u)`` are superset sums of ``u * C``.  The
optimizer works in this basis: every term of the objective is nonnegative, so
nothing cancels even when the full-table weight sits at its floor.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from . import implicit as im
from .workload import LogicalWorkload, WorkloadError, workload_stats

logger = logging.getLogger(__name__)

THETA_FULL_FLOOR = 1e-8
MAX_ITER = 1000
#: Normalized weights at or below this are dropped after optimization when harmless.
PRUNE_TOL = 1e-7


class SupportError(np.linalg.LinAlgError):
    """The marginals strategy does not span the full contingency table."""


def _masks(d):
    return np.arange(2**d)


def c_vector(domain):
    """``C(a)`` scalar for every mask: product of ``n_i`` over bits of ``a`` that are clear."""
    domain = np.asarray(domain, dtype=float)
    a = _masks(len(domain))
    bits = (a[:, None] >> np.arange(len(domain))) & 1
    return np.prod(np.where(bits == 1, 1.0, domain), axis=1)


def c_scalar(k, domain):
    d = len(domain)
    if not 0 <= k < 2**d:
        raise ValueError(f"mask {k} out of range for d={d}")
    return float(np.prod([1 if (k >> i) & 1 else n for i, n in enumerate(domain)]))


def c_matrix(a, domain):
    """Implicit ``C(a)``."""
    return im._mask_kron(a, tuple(domain), full_ones=True)


def _grid(d):
    a = _masks(d)
    return a[:, None], a[None, :]


def xmat(u, domain):
    """Upper-triangular ``X(u)`` with ``X[k, b] = sum_{a : a & b = k} u_a C(a | b)``."""
    u = np.asarray(u, dtype=float)
    d = len(domain)
    size = 2**d
    if u.shape != (size,):
        raise ValueError("u must have length 2^d")
    C = c_vector(domain)
    A, B = _grid(d)
    K = A & B
    w = (u[:, None] * C[A | B]).ravel()
    flat = (K * size + B).ravel()
    return np.bincount(flat, weights=w, minlength=size * size).reshape(size, size)


def gram_inverse_weights(u, domain):
    """Weights ``v`` with ``G(v) = G(u)^{-1}``; requires ``u_full > 0``."""
    u = np.asarray(u, dtype=float)
    full = 2 ** len(domain) - 1
    if not u[full] > 0:
        raise SupportError("full-table weight must be positive for the Gram to be invertible")
    X = xmat(u, domain)
    e = np.zeros(full + 1)
    e[full] = 1.0
    return scipy.linalg.solve_triangular(X, e, lower=False)


def gram_pinv_weights(theta, domain):
    """Weights ``v`` with ``G(v) = (M(theta)^T M(theta))^{-1}``."""
    theta = _check_theta(theta, domain)
    return gram_inverse_weights(theta**2, domain)


def _check_theta(theta, domain):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2 ** len(domain),):
        raise ValueError("theta must have length 2^d")
    if not np.all(np.isfinite(theta)) or np.any(theta < 0):
        raise ValueError("theta must be finite and nonnegative")
    return theta


# -- subset / superset transforms over the mask lattice ---------------------------------


def _cube(f, d):
    # axis k of the (2,)*d view is bit d-1-k of the mask
    return np.array(f, dtype=float).reshape((2,) * d) if d else np.array(f, dtype=float)


def superset_sum(f, d):
    """``g[c] = sum_{a ⊇ c} f[a]``."""
    g = _cube(f, d)
    for ax in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[ax], hi[ax] = 0, 1
        g[tuple(lo)] += g[tuple(hi)]
    return g.reshape(-1)


def subset_sum(f, d):
    """``g[a] = sum_{c ⊆ a} f[c]``."""
    g = _cube(f, d)
    for ax in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[ax], hi[ax] = 0, 1
        g[tuple(hi)] += g[tuple(lo)]
    return g.reshape(-1)


def superset_mobius(g, d):
    """Inverse of :func:`superset_sum`: ``f[a] = sum_{c ⊇ a} (-1)^{|c|-|a|} g[c]``."""
    f = _cube(g, d)
    for ax in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[ax], hi[ax] = 0, 1
        f[tuple(lo)] -= f[tuple(hi)]
    return f.reshape(-1)


def gram_eigenvalues(u, domain):
    """Eigenvalue of ``G(u)`` on each joint eigenspace ``c``."""
    return superset_sum(np.asarray(u, dtype=float) * c_vector(domain), len(domain))


def eigenspace_dims(domain):
    """Dimension of each joint eigenspace: product of ``n_i - 1`` over set bits."""
    domain = np.asarray(domain, dtype=float)
    bits = (_masks(len(domain))[:, None] >> np.arange(len(domain))) & 1
    return np.prod(np.where(bits == 1, domain - 1, 1.0), axis=1)


def gram_pinv_spectrum(u, domain, rtol=1e-13):
    """Eigenvalues of ``G(u)^+``.

    For nonnegative ``u`` every eigenvalue is a sum of nonnegative terms, so
    only exact zeros are dropped.  Otherwise eigenvalues below ``rtol * max``
    count as zero.
    """
    u = np.asarray(u, dtype=float)
    mu = gram_eigenvalues(u, domain)
    out = np.zeros_like(mu)
    if np.all(u >= 0):
        keep = mu > 0
    else:
        keep = np.abs(mu) > rtol * np.abs(mu).max()
    out[keep] = 1.0 / mu[keep]
    return out


def spectral_to_weights(s, domain):
    """Weights ``v`` with ``G(v) = sum_c s_c P_c``, ``P_c`` the eigenprojectors."""
    return superset_mobius(s, len(domain)) / c_vector(domain)


class SpectralGram(im.ImplicitMatrix):
    """``sum_c s_c P_c`` applied by splitting each attribute into mean and residual parts.

    Equivalent to ``MarginalsGram(spectral_to_weights(s))`` but avoids the
    cancellation that large weights cause when some eigenvalues are tiny.
    """

    def __init__(self, spectrum, domain):
        self.spectrum = np.asarray(spectrum, dtype=float)
        self.domain = tuple(int(n) for n in domain)
        N = int(np.prod(self.domain))
        self.shape = (N, N)

    def _apply(self, x):
        d = len(self.domain)
        out = np.zeros((*self.domain,))

        def rec(t, axis, mask):
            if axis == d:
                if self.spectrum[mask] != 0:
                    out[...] += self.spectrum[mask] * t
                return
            mean = t.mean(axis=axis, keepdims=True)
            rec(mean, axis + 1, mask)
            rec(t - mean, axis + 1, mask | (1 << axis))

        rec(x.reshape(self.domain), 0, 0)
        return out.reshape(-1)

    def matmat(self, X):
        return np.column_stack([self._apply(X[:, k]) for k in range(X.shape[1])])

    rmatmat = matmat

    def pinv(self):
        s = np.zeros_like(self.spectrum)
        nz = self.spectrum != 0
        s[nz] = 1.0 / self.spectrum[nz]
        return SpectralGram(s, self.domain)


# -- objective ---------------------------------------------------------------------------


@dataclass
class MarginalsProblem:
    """Workload summary consumed by the marginals objective.

    ``y[a] = sum_j w_j^2 prod_i (sum(Q_ij) if bit i of a is clear else trace(Q_ij))``
    so that ``tr[G(v) W^T W] = y . v``.  ``z[c] = tr[P_c W^T W]`` is the workload
    mass on eigenspace ``c``.
    """

    y: np.ndarray
    z: np.ndarray
    domain: tuple


def marginals_problem(workload):
    if not isinstance(workload, LogicalWorkload):
        raise TypeError("expected a LogicalWorkload")
    stats = workload_stats(workload)
    weights = np.array([t.weight for t in workload.terms])
    d = workload.schema.d
    n = np.asarray(workload.schema.sizes, dtype=float)
    bits = (_masks(d)[:, None] >> np.arange(d)) & 1  # (2^d, d)
    tr, sm = stats[:, None, :, 0], stats[:, None, :, 1]
    y = weights**2 @ np.prod(np.where(bits[None] == 1, tr, sm), axis=2)
    # projector onto constants is 1/n, onto mean-zero vectors I - 1/n
    const = sm / n
    resid = np.maximum(tr - const, 0.0)
    z = weights**2 @ np.prod(np.where(bits[None] == 1, resid, const), axis=2)
    return MarginalsProblem(y, z, workload.schema.sizes)


def _as_problem(stats):
    return stats if isinstance(stats, MarginalsProblem) else marginals_problem(stats)


def _objective_and_gradient(theta, z, domain, C, need_grad=True):
    d = len(domain)
    S = theta.sum()
    mu = superset_sum(theta**2 * C, d)
    need = z > 0
    if np.any(mu[need] <= 0):
        return np.inf, (np.full_like(theta, np.nan) if need_grad else None)
    r = np.zeros_like(mu)
    r[need] = z[need] / mu[need]
    tr = r.sum()
    f = S**2 * tr
    if not need_grad:
        return f, None
    # d tr / d u_a = -C(a) sum_{c ⊆ a} z_c / mu_c^2
    q = np.zeros_like(mu)
    q[need] = r[need] / mu[need]
    dtr = -C * subset_sum(q, d)
    return f, 2 * S * tr + S**2 * 2 * theta * dtr


def _objective_triangular(theta, y, domain):
    # reference evaluation through X(u) v = e_full, used to cross-check the spectral form
    v = gram_inverse_weights(theta**2, domain)
    return theta.sum() ** 2 * float(y @ v)


def marg_objective(theta, stats):
    """``(sum theta)^2 ||W M(theta)^+||_F^2``, invariant to rescaling ``theta``.

    ``stats`` is a :class:`MarginalsProblem` or a :class:`LogicalWorkload`.
    Raises :class:`SupportError` when ``M(theta)`` cannot answer the workload.
    """
    prob = _as_problem(stats)
    theta = _check_theta(theta, prob.domain)
    f = _objective_and_gradient(theta, prob.z, prob.domain, c_vector(prob.domain), False)[0]
    if not np.isfinite(f):
        raise SupportError("marginals strategy does not support the workload")
    return float(f)


def marg_gradient(theta, stats):
    prob = _as_problem(stats)
    theta = _check_theta(theta, prob.domain)
    f, g = _objective_and_gradient(theta, prob.z, prob.domain, c_vector(prob.domain))
    if not np.isfinite(f):
        raise SupportError("marginals strategy does not support the workload")
    return g


@dataclass
class MarginalsStrategy:
    """Weights ``theta`` (length ``2^d``) over marginals of a ``domain``."""

    theta: np.ndarray
    domain: tuple
    objective: float | None = None
    converged: bool = True

    def __post_init__(self):
        self.domain = tuple(int(n) for n in self.domain)
        self.theta = _check_theta(self.theta, self.domain)
        if not np.any(self.theta > 0):
            raise ValueError("theta must have at least one positive weight")

    def matrix(self):
        return marg_strategy_matrix(self.theta, self.domain)


def marg_strategy_matrix(theta, domain):
    """Stack of weighted marginals ``M(theta)``; sensitivity is ``sum(theta)``."""
    return im.Marginals(theta, domain)


def _prune(theta, f, z, domain, C):
    # weights left at the floor only keep the optimizer inside the supported
    # region; dropping them avoids ~1/floor^2 noise amplification in A^+ y
    small = (theta > 0) & (theta <= PRUNE_TOL)
    if not np.any(small) or np.all(small | (theta == 0)):
        return theta, f
    cand = np.where(small, 0.0, theta)
    cand = cand / cand.sum()
    fc = _objective_and_gradient(cand, z, domain, C, False)[0]
    if np.isfinite(fc) and fc <= f * (1 + 1e-9):
        return cand, fc
    return theta, f


def opt_marg(workload, restarts=25, seed=0, threads=1):
    """Optimize marginal weights for a workload.

    Parameters
    ----------
    workload : LogicalWorkload or MarginalsProblem
    restarts : int
        Random initializations, ``theta ~ U[0, 1)`` from ``(seed, r)``.
    seed : int
    threads : int
        Concurrent restarts; the result does not depend on it.

    Returns
    -------
    MarginalsStrategy
        Best weights, normalized to ``sum(theta) = 1``, with ``objective``
        set to ``(sum theta)^2 ||W M^+||_F^2``.
    """
    prob = _as_problem(workload)
    d = len(prob.domain)
    if d > 16:
        raise WorkloadError("marginals optimization supports at most 16 attributes")
    size = 2**d
    full = size - 1
    C = c_vector(prob.domain)
    scale = prob.z.sum()  # ||W||_F^2, the objective of the Identity strategy
    if scale <= 0:
        raise WorkloadError("workload has no queries with nonzero mass")
    z = prob.z / scale
    bounds = [(0.0, None)] * size
    bounds[full] = (THETA_FULL_FLOOR, None)

    def run(r):
        theta0 = np.random.default_rng([int(seed), int(r)]).random(size)
        theta0[full] = max(theta0[full], THETA_FULL_FLOOR)
        res = scipy.optimize.minimize(
            lambda t: _objective_and_gradient(t, z, prob.domain, C),
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": MAX_ITER, "ftol": 1e-12, "gtol": 1e-8},
        )
        theta = np.maximum(res.x, 0.0)
        theta[full] = max(theta[full], THETA_FULL_FLOOR)
        theta = theta / theta.sum()
        f = _objective_and_gradient(theta, z, prob.domain, C, False)[0]
        return theta, f, bool(res.success)

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = [run(r) for r in range(restarts)]
    best = min(range(len(results)), key=lambda i: (results[i][1], i))
    theta, f, ok = results[best]
    theta, f = _prune(theta, f, z, prob.domain, C)
    logger.debug("opt_marg d=%d restarts=%d best=%d objective=%g", d, restarts, best, f * scale)
    return MarginalsStrategy(theta, prob.domain, objective=float(f * scale), converged=ok)
