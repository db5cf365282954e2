"""Implicitly represented matrices.

Every operator here answers ``matmat``/``rmatmat`` without ever forming a
Kronecker product explicitly.  Vectors are 1-D arrays; ``matmat`` accepts a
2-D array whose columns are stacked vectors.
"""
from __future__ import annotations

from functools import reduce

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, lsmr

#: Largest number of entries a dense materialization may hold.
MAX_DENSE_ENTRIES = 10**7

#: Relative pivot tolerance for the Woodbury inner solve.
RANK_TOL = 1e-10


class ShapeError(ValueError):
    """Operand dimensions do not match the operator."""


class RankError(np.linalg.LinAlgError):
    """A pseudo-inverse was requested for a numerically rank-deficient operator."""


class MemoryCapError(MemoryError):
    """A dense result would exceed :data:`MAX_DENSE_ENTRIES`."""


def _check_cap(rows, cols, cap=None):
    cap = MAX_DENSE_ENTRIES if cap is None else cap
    if rows * cols > cap:
        raise MemoryCapError(f"dense {rows}x{cols} matrix exceeds the cap of {cap} entries")


class ImplicitMatrix:
    """Base class for a linear operator with a known explicit meaning."""

    shape: tuple[int, int]

    @property
    def rows(self):
        return self.shape[0]

    @property
    def cols(self):
        return self.shape[1]

    def matmat(self, X):
        raise NotImplementedError

    def rmatmat(self, Y):
        raise NotImplementedError

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] != self.cols:
            raise ShapeError(f"expected vector of length {self.cols}, got shape {x.shape}")
        return self.matmat(x[:, None])[:, 0]

    def rmatvec(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or y.shape[0] != self.rows:
            raise ShapeError(f"expected vector of length {self.rows}, got shape {y.shape}")
        return self.rmatmat(y[:, None])[:, 0]

    def __matmul__(self, x):
        x = np.asarray(x, dtype=float)
        return self.matvec(x) if x.ndim == 1 else self.matmat(x)

    @property
    def T(self):
        return Transpose(self)

    def gram(self):
        """Return ``M^T M`` as an implicit matrix."""
        return Dense(self.materialize().T @ self.materialize())

    def sensitivity(self):
        """Maximum column L1 norm."""
        return float(np.max(self.column_norms()))

    def column_norms(self):
        """L1 norm of every column, as a vector of length ``cols``."""
        _check_cap(1, self.cols)
        return np.abs(self.materialize()).sum(axis=0)

    def pinv(self):
        """Return the Moore-Penrose pseudo-inverse as an implicit matrix."""
        return Dense(np.linalg.pinv(self.materialize()))

    def diagonal(self):
        return np.diag(self.materialize()).copy()

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        return self.matmat(np.eye(self.cols))

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"


class Dense(ImplicitMatrix):
    def __init__(self, entries):
        entries = np.atleast_2d(np.asarray(entries, dtype=float))
        if entries.ndim != 2:
            raise ShapeError("dense entries must form a 2-D matrix")
        if not np.all(np.isfinite(entries)):
            raise ValueError("dense entries must be finite")
        self.entries = entries
        self.shape = entries.shape

    def matmat(self, X):
        return self.entries @ X

    def rmatmat(self, Y):
        return self.entries.T @ Y

    def gram(self):
        return Dense(self.entries.T @ self.entries)

    def column_norms(self):
        return np.abs(self.entries).sum(axis=0)

    def pinv(self):
        return Dense(np.linalg.pinv(self.entries))

    def diagonal(self):
        return np.diag(self.entries).copy()

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        return self.entries.copy()


class Identity(ImplicitMatrix):
    def __init__(self, n):
        self.n = int(n)
        self.shape = (self.n, self.n)

    def matmat(self, X):
        return np.array(X, dtype=float)

    rmatmat = matmat

    def gram(self):
        return self

    def sensitivity(self):
        return 1.0

    def column_norms(self):
        return np.ones(self.n)

    def pinv(self):
        return self

    def diagonal(self):
        return np.ones(self.n)

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        return np.eye(self.n)


class Ones(ImplicitMatrix):
    """The all-ones matrix; ``Ones(1, n)`` is the Total query."""

    def __init__(self, rows, cols, scale=1.0):
        self.shape = (int(rows), int(cols))
        self.scale = float(scale)

    def matmat(self, X):
        s = self.scale * X.sum(axis=0, keepdims=True)
        return np.repeat(s, self.rows, axis=0)

    def rmatmat(self, Y):
        s = self.scale * Y.sum(axis=0, keepdims=True)
        return np.repeat(s, self.cols, axis=0)

    def gram(self):
        return Ones(self.cols, self.cols, self.scale**2 * self.rows)

    def sensitivity(self):
        return abs(self.scale) * self.rows

    def column_norms(self):
        return np.full(self.cols, abs(self.scale) * self.rows)

    def pinv(self):
        if self.scale == 0:
            return Ones(self.cols, self.rows, 0.0)
        return Ones(self.cols, self.rows, 1.0 / (self.scale * self.rows * self.cols))

    def diagonal(self):
        return np.full(min(self.shape), self.scale)

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        return np.full(self.shape, self.scale)


class Intervals(ImplicitMatrix):
    """Interval (range) queries ``[lo, hi]`` over an ordered domain of size ``n``.

    Evaluated through prefix sums, so each product costs O(rows + n).
    """

    def __init__(self, n, lo, hi):
        self.n = int(n)
        self.lo = np.asarray(lo, dtype=np.intp)
        self.hi = np.asarray(hi, dtype=np.intp)
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("interval bounds must satisfy lo <= hi")
        if self.lo.size and (self.lo.min() < 0 or self.hi.max() >= self.n):
            raise ValueError("interval bounds out of range")
        self.shape = (self.lo.size, self.n)

    @classmethod
    def all_ranges(cls, n):
        lo, hi = np.triu_indices(n)
        return cls(n, lo, hi)

    def matmat(self, X):
        cs = np.zeros((self.n + 1, X.shape[1]))
        np.cumsum(X, axis=0, out=cs[1:])
        return cs[self.hi + 1] - cs[self.lo]

    def rmatmat(self, Y):
        diff = np.zeros((self.n + 1, Y.shape[1]))
        np.add.at(diff, self.lo, Y)
        np.subtract.at(diff, self.hi + 1, Y)
        return np.cumsum(diff, axis=0)[:-1]

    def column_norms(self):
        diff = np.zeros(self.n + 1)
        np.add.at(diff, self.lo, 1.0)
        np.subtract.at(diff, self.hi + 1, 1.0)
        return np.cumsum(diff)[:-1]

    def gram(self):
        _check_cap(self.n, self.n)
        # rows are 0/1 indicator vectors, so G[i, j] counts intervals covering both i and j
        counts = np.zeros((self.n + 1, self.n + 1))
        np.add.at(counts, (self.lo, self.hi), 1.0)
        # covered(i, j) = #intervals with lo <= min(i, j) and hi >= max(i, j)
        tail = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1]  # hi >= column
        cover = np.cumsum(tail, axis=0)  # lo <= row
        i = np.arange(self.n)
        lo_idx = np.minimum.outer(i, i)
        hi_idx = np.maximum.outer(i, i)
        return Dense(cover[lo_idx, hi_idx])


class Permuted(ImplicitMatrix):
    """``base`` with its columns shuffled: ``(W P) x = W x[perm]``."""

    def __init__(self, base, perm):
        perm = np.asarray(perm, dtype=np.intp)
        if sorted(perm.tolist()) != list(range(base.cols)):
            raise ValueError("perm must be a permutation of range(base.cols)")
        self.base = base
        self.perm = perm
        self.shape = base.shape

    def matmat(self, X):
        return self.base.matmat(X[self.perm])

    def rmatmat(self, Y):
        out = np.empty((self.cols, Y.shape[1]))
        out[self.perm] = self.base.rmatmat(Y)
        return out

    def column_norms(self):
        out = np.empty(self.cols)
        out[self.perm] = self.base.column_norms()
        return out

    def gram(self):
        g = self.base.gram().materialize()
        out = np.empty_like(g)
        out[np.ix_(self.perm, self.perm)] = g
        return Dense(out)


class Kron(ImplicitMatrix):
    """Kronecker product ``A_1 ⊗ ... ⊗ A_d`` (row-major flattening)."""

    def __init__(self, factors):
        factors = list(factors)
        if not factors:
            raise ValueError("Kron needs at least one factor")
        self.factors = factors
        self.shape = (
            int(np.prod([f.rows for f in factors])),
            int(np.prod([f.cols for f in factors])),
        )

    def _apply(self, X, transpose):
        # Peel one factor per pass: reshape, multiply the trailing mode, rotate it to the front.
        k = X.shape[1]
        Y = np.ascontiguousarray(X.T)  # (k, N)
        size = Y.shape[1]
        for A in reversed(self.factors):
            m, n = (A.cols, A.rows) if transpose else A.shape
            rest = size // n
            Z = Y.reshape(k, rest, n).transpose(2, 0, 1).reshape(n, k * rest)
            Z = A.rmatmat(Z) if transpose else A.matmat(Z)
            Y = Z.reshape(m, k, rest).transpose(1, 0, 2).reshape(k, m * rest)
            size = m * rest
        return Y.T

    def matmat(self, X):
        return self._apply(np.asarray(X, dtype=float), transpose=False)

    def rmatmat(self, Y):
        return self._apply(np.asarray(Y, dtype=float), transpose=True)

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] != self.cols:
            raise ShapeError(f"expected vector of length {self.cols}, got shape {x.shape}")
        return self._apply(x[:, None], transpose=False)[:, 0]

    def rmatvec(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or y.shape[0] != self.rows:
            raise ShapeError(f"expected vector of length {self.rows}, got shape {y.shape}")
        return self._apply(y[:, None], transpose=True)[:, 0]

    def gram(self):
        return Kron([f.gram() for f in self.factors])

    def sensitivity(self):
        return float(np.prod([f.sensitivity() for f in self.factors]))

    def column_norms(self):
        _check_cap(1, self.cols)
        return reduce(np.kron, [f.column_norms() for f in self.factors])

    def pinv(self):
        return Kron([f.pinv() for f in self.factors])

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        return reduce(np.kron, [f.materialize() for f in self.factors])


def _uniform_columns(m):
    """Column L1 norm shared by every column of ``m``, or None if not uniform."""
    if isinstance(m, (Identity, Ones, PIdentity)):
        return m.sensitivity()
    if isinstance(m, Kron):
        parts = [_uniform_columns(f) for f in m.factors]
        return None if any(p is None for p in parts) else float(np.prod(parts))
    if isinstance(m, Dense):
        c = m.column_norms()
        return float(c[0]) if np.all(c == c[0]) else None
    return None


class Stack(ImplicitMatrix):
    """Weighted vertical stack ``[w_1 M_1; ...; w_k M_k]``."""

    def __init__(self, terms):
        terms = [(float(w), m) for w, m in terms]
        if not terms:
            raise ValueError("Stack needs at least one term")
        cols = {m.cols for _, m in terms}
        if len(cols) != 1:
            raise ShapeError("all stacked terms must share a column count")
        self.terms = terms
        self.shape = (sum(m.rows for _, m in terms), cols.pop())

    def matmat(self, X):
        return np.vstack([w * m.matmat(X) for w, m in self.terms])

    def rmatmat(self, Y):
        out = np.zeros((self.cols, Y.shape[1]))
        start = 0
        for w, m in self.terms:
            out += w * m.rmatmat(Y[start:start + m.rows])
            start += m.rows
        return out

    def gram(self):
        _check_cap(self.cols, self.cols)
        out = np.zeros((self.cols, self.cols))
        for w, m in self.terms:
            out += w**2 * m.gram().materialize()
        return Dense(out)

    def sensitivity(self):
        uniform = [_uniform_columns(m) for _, m in self.terms]
        if all(u is not None for u in uniform):
            return float(sum(abs(w) * u for (w, _), u in zip(self.terms, uniform)))
        return float(np.max(self.column_norms()))

    def column_norms(self):
        _check_cap(1, self.cols)
        return sum(abs(w) * m.column_norms() for w, m in self.terms)

    def pinv(self):
        raise RankError("no closed-form pseudo-inverse for a general stack; use lstsqr_iterative")


class PIdentity(ImplicitMatrix):
    """The p-Identity strategy ``[I; Theta] D`` with ``D = diag(1 + 1^T Theta)^-1``.

    Every column has unit L1 norm by construction.
    """

    def __init__(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.ndim != 2:
            raise ShapeError("theta must be a p x n matrix")
        if np.any(theta < 0) or not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite and nonnegative")
        self.theta = theta
        p, n = theta.shape
        self.p, self.n = p, n
        self.scale = 1.0 / (1.0 + theta.sum(axis=0))  # diagonal of D
        self.shape = (n + p, n)
        self._inner = None

    def matmat(self, X):
        DX = self.scale[:, None] * X
        return np.vstack([DX, self.theta @ DX])

    def rmatmat(self, Y):
        return self.scale[:, None] * (Y[: self.n] + self.theta.T @ Y[self.n:])

    def gram(self):
        g = np.eye(self.n) + self.theta.T @ self.theta
        return Dense(self.scale[:, None] * g * self.scale[None, :])

    def sensitivity(self):
        return float(np.max(self.column_norms()))

    def column_norms(self):
        return self.scale * (1.0 + self.theta.sum(axis=0))

    def inner_factor(self):
        """Cholesky factor of ``I_p + Theta Theta^T`` (cached)."""
        if self._inner is None:
            K = np.eye(self.p) + self.theta @ self.theta.T
            c, low = scipy.linalg.cho_factor(K)
            d = np.abs(np.diag(c))
            if d.size and d.min() < RANK_TOL * d.max():
                raise RankError("I_p + Theta Theta^T is numerically singular")
            self._inner = (c, low)
        return self._inner

    def gram_inv_apply(self, X):
        """``(I + Theta^T Theta)^{-1} X`` through the Woodbury identity."""
        if self.p == 0:
            return np.array(X, dtype=float)
        c = self.inner_factor()
        return X - self.theta.T @ scipy.linalg.cho_solve(c, self.theta @ X)

    def pinv(self):
        return _PIdentityPinv(self)


class _PIdentityPinv(ImplicitMatrix):
    # A^+ y = (A^T A)^{-1} A^T y = D^{-1} (I + Θ^T Θ)^{-1} (y1 + Θ^T y2)
    def __init__(self, A):
        self.A = A
        self.shape = (A.n, A.n + A.p)

    def matmat(self, Y):
        A = self.A
        z = Y[: A.n] + A.theta.T @ Y[A.n:]
        return A.gram_inv_apply(z) / A.scale[:, None]

    def rmatmat(self, X):
        A = self.A
        z = A.gram_inv_apply(X / A.scale[:, None])
        return np.vstack([z, A.theta @ z])

    def pinv(self):
        return self.A


class Transpose(ImplicitMatrix):
    def __init__(self, base):
        self.base = base
        self.shape = (base.cols, base.rows)

    def matmat(self, X):
        return self.base.rmatmat(X)

    def rmatmat(self, Y):
        return self.base.matmat(Y)

    @property
    def T(self):
        return self.base


class Product(ImplicitMatrix):
    """``left @ right`` kept unevaluated."""

    def __init__(self, left, right):
        if left.cols != right.rows:
            raise ShapeError(f"cannot multiply {left.shape} by {right.shape}")
        self.left, self.right = left, right
        self.shape = (left.rows, right.cols)

    def matmat(self, X):
        return self.left.matmat(self.right.matmat(X))

    def rmatmat(self, Y):
        return self.right.rmatmat(self.left.rmatmat(Y))


class Scaled(ImplicitMatrix):
    def __init__(self, base, c):
        self.base = base
        self.c = float(c)
        self.shape = base.shape

    def matmat(self, X):
        return self.c * self.base.matmat(X)

    def rmatmat(self, Y):
        return self.c * self.base.rmatmat(Y)

    def gram(self):
        return Scaled(self.base.gram(), self.c**2)

    def sensitivity(self):
        return abs(self.c) * self.base.sensitivity()

    def column_norms(self):
        return abs(self.c) * self.base.column_norms()

    def pinv(self):
        return Scaled(self.base.pinv(), 1.0 / self.c)

    def diagonal(self):
        return self.c * self.base.diagonal()

    def materialize(self, cap=None):
        return self.c * self.base.materialize(cap=cap)


class MinMaxGram(ImplicitMatrix):
    """Symmetric ``Y[i, j] = a[min(i, j)] * b[max(i, j)]``, applied in O(n) per vector.

    Prefix Grams have ``a = 1, b = n - k``; all-range Grams have
    ``a = k + 1, b = n - k``.
    """

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.a.ndim != 1 or self.a.shape != self.b.shape:
            raise ShapeError("a and b must be vectors of equal length")
        n = self.a.size
        self.shape = (n, n)

    def matmat(self, X):
        X = np.asarray(X, dtype=float)
        lower = np.cumsum(self.a[:, None] * X, axis=0)  # sum_{j <= i} a_j x_j
        bx = np.cumsum(self.b[:, None] * X, axis=0)
        upper = bx[-1:] - bx  # sum_{j > i} b_j x_j
        return self.b[:, None] * lower + self.a[:, None] * upper

    rmatmat = matmat

    def diagonal(self):
        return self.a * self.b

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        i = np.arange(self.rows)
        return self.a[np.minimum.outer(i, i)] * self.b[np.maximum.outer(i, i)]


class GramSum(ImplicitMatrix):
    """``sum_j c_j G_j`` for square operators of equal size."""

    def __init__(self, terms):
        terms = [(float(c), g) for c, g in terms]
        if not terms or len({g.shape for _, g in terms}) != 1:
            raise ShapeError("GramSum needs terms of one common shape")
        self.terms = terms
        self.shape = terms[0][1].shape

    def matmat(self, X):
        return sum(c * g.matmat(X) for c, g in self.terms)

    def rmatmat(self, Y):
        return sum(c * g.rmatmat(Y) for c, g in self.terms)

    def diagonal(self):
        return sum(c * g.diagonal() for c, g in self.terms)

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        return sum(c * g.materialize() for c, g in self.terms)


# -- marginals building blocks ---------------------------------------------------------


def marginal_factor(n, identity):
    return Identity(n) if identity else Ones(1, n)


def _mask_kron(mask, domain, full_ones):
    # bit i of mask set => Identity on attribute i; otherwise Ones
    return Kron([
        Identity(n) if (mask >> i) & 1 else (Ones(n, n) if full_ones else Ones(1, n))
        for i, n in enumerate(domain)
    ])


class MarginalsGram(ImplicitMatrix):
    """``G(v) = sum_a v_a C(a)`` with ``C(a) = ⊗_i (I if bit i of a else 1)``."""

    def __init__(self, weights, domain):
        weights = np.asarray(weights, dtype=float)
        domain = tuple(int(n) for n in domain)
        if weights.shape != (2 ** len(domain),):
            raise ShapeError("weights must have length 2^d")
        self.weights = weights
        self.domain = domain
        N = int(np.prod(domain))
        self.shape = (N, N)

    def matmat(self, X):
        out = np.zeros((self.rows, X.shape[1]))
        for a, v in enumerate(self.weights):
            if v != 0:
                out += v * _mask_kron(a, self.domain, full_ones=True).matmat(X)
        return out

    rmatmat = matmat

    def materialize(self, cap=None):
        _check_cap(*self.shape, cap=cap)
        out = np.zeros(self.shape)
        for a, v in enumerate(self.weights):
            if v != 0:
                out += v * _mask_kron(a, self.domain, full_ones=True).materialize()
        return out

    def pinv(self):
        from .marginals import SpectralGram, gram_pinv_spectrum

        return SpectralGram(gram_pinv_spectrum(self.weights, self.domain), self.domain)


class Marginals(Stack):
    """Stack of weighted marginals ``M(theta)``; only masks with positive weight are kept."""

    def __init__(self, theta, domain):
        theta = np.asarray(theta, dtype=float)
        domain = tuple(int(n) for n in domain)
        if theta.shape != (2 ** len(domain),):
            raise ShapeError("theta must have length 2^d")
        if np.any(theta < 0):
            raise ValueError("theta must be nonnegative")
        if not np.any(theta > 0):
            raise ValueError("theta must have at least one positive weight")
        self.theta = theta
        self.domain = domain
        super().__init__([
            (t, _mask_kron(a, domain, full_ones=False)) for a, t in enumerate(theta) if t > 0
        ])

    def gram(self):
        return MarginalsGram(self.theta**2, self.domain)

    def sensitivity(self):
        return float(self.theta.sum())

    def pinv(self):
        # M^+ = (M^T M)^+ M^T
        return Product(self.gram().pinv(), Transpose(self))


# -- module-level operations -----------------------------------------------------------


def matvec(m, x):
    return m.matvec(x)


def rmatvec(m, y):
    return m.rmatvec(y)


def gram(m):
    return m.gram()


def sensitivity(m):
    return m.sensitivity()


def materialize(m, cap=None):
    return m.materialize(cap=cap)


def pinv_apply(m, y):
    """Apply the pseudo-inverse of ``m`` to ``y`` using its closed form."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != m.rows:
        raise ShapeError(f"expected vector of length {m.rows}, got shape {y.shape}")
    return m.pinv().matvec(y)


class LstsqResult(np.ndarray):
    """Solution vector carrying ``converged``, ``residual`` and ``iterations``."""


def lstsqr_iterative(m, y, tol=1e-8, max_iter=None):
    """Least-squares solve of ``m x = y`` using only products with ``m`` and ``m^T``.

    Returns an ndarray subclass with attributes ``converged`` (normal-equation
    residual ``|M^T(y - Mx)| / |M^T y|`` below ``tol``), ``residual`` and
    ``iterations``.  Non-convergence is reported, not raised.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != m.rows:
        raise ShapeError(f"expected vector of length {m.rows}, got shape {y.shape}")
    if max_iter is None:
        max_iter = 10 * m.cols
    op = LinearOperator(m.shape, matvec=m.matvec, rmatvec=m.rmatvec, dtype=float)
    tiny = min(tol, 1e-8) * 1e-4
    sol = lsmr(op, y, atol=tiny, btol=tiny, maxiter=max_iter)
    x = sol[0]
    aty = np.linalg.norm(m.rmatvec(y))
    res = np.linalg.norm(m.rmatvec(y - m.matvec(x)))
    rel = res / aty if aty > 0 else res
    out = x.view(LstsqResult)
    out.converged = bool(rel < tol)
    out.residual = float(rel)
    out.iterations = int(sol[2])
    return out
