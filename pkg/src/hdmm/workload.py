"""Logical workloads: per-attribute predicate sets, products and weighted unions.

A workload is a list of weighted product terms over a schema.  Each term
assigns a building block (a set of predicates) to every attribute; missing
attributes default to the Total block.  :func:`impvec` compiles a workload to a
:class:`~hdmm.implicit.Stack` of Kronecker products whose storage grows with
``sum(n_i)`` rather than ``prod(n_i)``.

Data vectors are flattened row-major in schema declaration order, so the first
attribute varies slowest.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import prod

import numpy as np

from . import implicit as im

BLOCK_KINDS = ("identity", "total", "prefix", "allrange", "range_width", "dense")


class WorkloadError(ValueError):
    """Invalid schema, block or workload."""


@dataclass(frozen=True)
class Attribute:
    """One attribute of the schema.

    ``values`` optionally lists the raw values (strings or integers) mapped to
    domain indices ``0..size-1`` when ingesting records.
    """

    name: str
    size: int
    values: tuple | None = None

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise WorkloadError("attribute name must be a nonempty string")
        if isinstance(self.size, bool) or int(self.size) != self.size or self.size < 1:
            raise WorkloadError(f"attribute {self.name!r} must have integer size >= 1")
        object.__setattr__(self, "size", int(self.size))
        if self.values is not None:
            vals = tuple(self.values)
            if len(vals) != self.size:
                raise WorkloadError(f"attribute {self.name!r}: {len(vals)} values for size {self.size}")
            if len(set(vals)) != len(vals):
                raise WorkloadError(f"attribute {self.name!r}: duplicate values")
            object.__setattr__(self, "values", vals)


class Schema:
    """Ordered attributes with unique names; domain size ``N = prod(n_i)``."""

    def __init__(self, attributes):
        attrs = []
        for a in attributes:
            if isinstance(a, Attribute):
                attrs.append(a)
            elif isinstance(a, tuple) and len(a) == 2:
                attrs.append(Attribute(a[0], a[1]))
            else:
                raise WorkloadError(f"cannot interpret {a!r} as an attribute")
        if not attrs:
            raise WorkloadError("schema needs at least one attribute")
        names = [a.name for a in attrs]
        if len(set(names)) != len(names):
            raise WorkloadError("attribute names must be unique")
        self.attributes = tuple(attrs)

    @classmethod
    def from_sizes(cls, sizes, prefix="a"):
        return cls([Attribute(f"{prefix}{i}", n) for i, n in enumerate(sizes)])

    @property
    def names(self):
        return tuple(a.name for a in self.attributes)

    @property
    def sizes(self):
        return tuple(a.size for a in self.attributes)

    @property
    def d(self):
        return len(self.attributes)

    @property
    def N(self):
        return prod(self.sizes)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise WorkloadError(f"unknown attribute {name!r}") from None

    def __eq__(self, other):
        return isinstance(other, Schema) and self.attributes == other.attributes

    def __hash__(self):
        return hash(self.attributes)

    def __repr__(self):
        return "Schema(" + ", ".join(f"{a.name}:{a.size}" for a in self.attributes) + ")"


@dataclass(frozen=True, eq=False)
class Block:
    """A predicate set over one attribute.

    Parameters
    ----------
    kind : str
        One of ``identity``, ``total``, ``prefix``, ``allrange``,
        ``range_width`` or ``dense``.
    width : int, optional
        Window length for ``range_width``.
    entries : ndarray, optional
        Query matrix for ``dense``.
    permutation : ndarray, optional
        Column permutation applied after the predicates (``W P``).
    """

    kind: str
    width: int | None = None
    entries: np.ndarray | None = None
    permutation: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise WorkloadError(f"unknown block kind {self.kind!r}")
        if self.kind == "range_width":
            if self.width is None or int(self.width) != self.width or self.width < 1:
                raise WorkloadError("range_width needs an integer width >= 1")
        if self.kind == "dense":
            e = np.atleast_2d(np.asarray(self.entries, dtype=float))
            if e.ndim != 2 or e.size == 0 or not np.all(np.isfinite(e)):
                raise WorkloadError("dense block entries must be a finite nonempty matrix")
            object.__setattr__(self, "entries", e)
        if self.permutation is not None:
            object.__setattr__(self, "permutation", np.asarray(self.permutation, dtype=np.intp))

    def validate(self, n):
        if self.kind == "range_width" and self.width > n:
            raise WorkloadError(f"range width {self.width} exceeds domain size {n}")
        if self.kind == "dense" and self.entries.shape[1] != n:
            raise WorkloadError(f"dense block has {self.entries.shape[1]} columns, attribute has {n}")
        if self.permutation is not None and sorted(self.permutation.tolist()) != list(range(n)):
            raise WorkloadError("permutation must be a permutation of the attribute domain")

    @property
    def is_trivial(self):
        """True for blocks whose p-Identity optimization is pointless (Identity, Total)."""
        return self.permutation is None and self.kind in ("identity", "total")

    def __eq__(self, other):
        if not isinstance(other, Block) or (self.kind, self.width) != (other.kind, other.width):
            return False
        for a, b in ((self.entries, other.entries), (self.permutation, other.permutation)):
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True

    def __hash__(self):
        return hash((self.kind, self.width))


IDENTITY = Block("identity")
TOTAL = Block("total")
PREFIX = Block("prefix")
ALLRANGE = Block("allrange")


@dataclass
class ProductTerm:
    weight: float
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        w = float(self.weight)
        if not np.isfinite(w) or w <= 0:
            raise WorkloadError("term weight must be positive and finite")
        self.weight = w
        self.blocks = dict(self.blocks)

    def block(self, name):
        return self.blocks.get(name, TOTAL)


class LogicalWorkload:
    """Weighted union of product terms over a shared schema."""

    def __init__(self, schema, terms):
        if not isinstance(schema, Schema):
            schema = Schema(schema)
        terms = list(terms)
        if not terms:
            raise WorkloadError("workload needs at least one term")
        for t in terms:
            if not isinstance(t, ProductTerm):
                raise WorkloadError("terms must be ProductTerm instances")
            for name, b in t.blocks.items():
                if not isinstance(b, Block):
                    raise WorkloadError(f"block for {name!r} must be a Block")
                b.validate(schema.attributes[schema.index(name)].size)
        self.schema = schema
        self.terms = terms

    @property
    def k(self):
        return len(self.terms)

    def blocks(self, j):
        """Blocks of term ``j`` in schema order."""
        t = self.terms[j]
        return [t.block(name) for name in self.schema.names]

    def support(self, j):
        """Attribute indices on which term ``j`` is not Total."""
        return frozenset(i for i, b in enumerate(self.blocks(j)) if not (b.kind == "total" and b.permutation is None))

    def term_rows(self, j):
        return prod(block_rows(b, n) for b, n in zip(self.blocks(j), self.schema.sizes))

    @property
    def rows(self):
        return sum(self.term_rows(j) for j in range(self.k))

    def encoded_size(self):
        """Numbers stored by the implicit representation: sum over terms of sum_i rows_i * n_i."""
        return sum(
            sum(block_rows(b, n) * n for b, n in zip(self.blocks(j), self.schema.sizes))
            for j in range(self.k)
        )

    def __repr__(self):
        return f"LogicalWorkload({self.schema!r}, k={self.k})"


# -- compilation -----------------------------------------------------------------------


def block_rows(b, n):
    if b.kind == "identity":
        return n
    if b.kind == "total":
        return 1
    if b.kind == "prefix":
        return n
    if b.kind == "allrange":
        return n * (n + 1) // 2
    if b.kind == "range_width":
        return n - b.width + 1
    return b.entries.shape[0]


def vec_block(b, n):
    """Compile a building block over a domain of size ``n`` to an implicit matrix."""
    b.validate(n)
    if b.kind == "identity":
        m = im.Identity(n)
    elif b.kind == "total":
        m = im.Ones(1, n)
    elif b.kind == "prefix":
        if n * n <= im.MAX_DENSE_ENTRIES:
            m = im.Dense(np.tril(np.ones((n, n))))
        else:
            m = im.Intervals(n, np.zeros(n, dtype=np.intp), np.arange(n))
    elif b.kind == "allrange":
        # n(n+1)/2 rows would be wasteful densely; prefix sums evaluate each range in O(1)
        m = im.Intervals.all_ranges(n)
    elif b.kind == "range_width":
        lo = np.arange(n - b.width + 1)
        m = im.Intervals(n, lo, lo + b.width - 1)
    else:
        m = im.Dense(b.entries)
    if b.permutation is not None:
        m = im.Permuted(m, b.permutation)
    return m


def impvec(w):
    """Compile a logical workload to a stack of weighted Kronecker products.

    A single term with unit weight compiles to its bare Kronecker product (or
    to the bare block when the schema has one attribute).
    """
    terms = []
    for j, t in enumerate(w.terms):
        factors = [vec_block(b, n) for b, n in zip(w.blocks(j), w.schema.sizes)]
        terms.append((t.weight, factors[0] if len(factors) == 1 else im.Kron(factors)))
    if len(terms) == 1 and terms[0][0] == 1.0:
        return terms[0][1]
    return im.Stack(terms)


def gram_closed_form(b, n):
    """Dense ``W^T W`` of a building block, using closed forms where known.

    Prefix: ``G[i, j] = n - max(i, j)``; AllRange: ``G[i, j] = (min(i, j) + 1)(n - max(i, j))``.
    """
    b.validate(n)
    i = np.arange(n)
    if b.kind == "prefix":
        g = (n - np.maximum.outer(i, i)).astype(float)
    elif b.kind == "allrange":
        g = ((np.minimum.outer(i, i) + 1) * (n - np.maximum.outer(i, i))).astype(float)
    elif b.kind == "identity":
        g = np.eye(n)
    elif b.kind == "total":
        g = np.ones((n, n))
    else:
        base = Block(b.kind, b.width, b.entries)
        g = vec_block(base, n).gram().materialize()
    if b.permutation is not None:
        out = np.empty_like(g)
        out[np.ix_(b.permutation, b.permutation)] = g
        g = out
    return g


def _block_stats(b, n):
    # (trace, sum) of the block Gram; permutations change neither
    if b.kind == "identity":
        return float(n), float(n)
    if b.kind == "total":
        return float(n), float(n * n)
    if b.kind == "dense":
        e = b.entries
        return float(np.sum(e * e)), float(np.sum(e.sum(axis=1) ** 2))
    # interval blocks: trace counts the ones, sum adds squared row lengths
    if b.kind == "prefix":
        lengths = np.arange(1, n + 1, dtype=float)
    elif b.kind == "allrange":
        lengths = np.arange(1, n + 1, dtype=float)
        counts = n - lengths + 1
        return float(np.dot(counts, lengths)), float(np.dot(counts, lengths**2))
    else:
        lengths = np.full(n - b.width + 1, float(b.width))
    return float(lengths.sum()), float(np.sum(lengths**2))


def workload_stats(w):
    """Trace and entry-sum of every factor Gram.

    Returns
    -------
    ndarray of shape (k, d, 2)
        ``[j, i, 0]`` is the trace and ``[j, i, 1]`` the sum of the Gram of
        term ``j``'s block on attribute ``i``.
    """
    out = np.empty((w.k, w.schema.d, 2))
    for j in range(w.k):
        for i, (b, n) in enumerate(zip(w.blocks(j), w.schema.sizes)):
            out[j, i] = _block_stats(b, n)
    return out


def structured_gram(b, n):
    """``W^T W`` of a building block as an implicit operator with a fast product.

    Unpermuted Prefix and AllRange Grams are :class:`~hdmm.implicit.MinMaxGram`
    (O(n) per vector); Identity and Total use their own operators.  Anything
    else is wrapped densely.
    """
    b.validate(n)
    if b.permutation is None:
        k = np.arange(n, dtype=float)
        if b.kind == "prefix":
            return im.MinMaxGram(np.ones(n), n - k)
        if b.kind == "allrange":
            return im.MinMaxGram(k + 1, n - k)
        if b.kind == "identity":
            return im.Identity(n)
        if b.kind == "total":
            return im.Ones(n, n)
    return im.Dense(gram_closed_form(b, n))


def factor_grams(w, structured=False):
    """Per-term, per-attribute Grams: ``grams[j][i]`` is n_i x n_i.

    Dense arrays by default; ``structured=True`` returns the operators of
    :func:`structured_gram` instead.
    """
    make = structured_gram if structured else gram_closed_form
    cache = {}
    out = []
    for j in range(w.k):
        row = []
        for b, n in zip(w.blocks(j), w.schema.sizes):
            key = (id(b), n)
            if key not in cache:
                cache[key] = make(b, n)
            row.append(cache[key])
        out.append(row)
    return out


def frobenius_sq(w):
    """``||W||_F^2`` from factor-Gram traces."""
    stats = workload_stats(w)
    weights = np.array([t.weight for t in w.terms])
    return float(np.sum(weights**2 * np.prod(stats[:, :, 0], axis=1)))


# -- generators ------------------------------------------------------------------------


def _check_k(schema, K):
    if isinstance(K, bool) or int(K) != K or K < 0:
        raise WorkloadError("K must be a nonnegative integer")
    if K > schema.d:
        raise WorkloadError(f"K={K} exceeds the number of attributes d={schema.d}")
    return int(K)


def _marginal_term(schema, attrs):
    return ProductTerm(1.0, {schema.names[i]: IDENTITY for i in attrs})


def all_kway_marginals(schema, K):
    """One term per K-subset of attributes: Identity on the subset, Total elsewhere."""
    K = _check_k(schema, K)
    return LogicalWorkload(schema, [_marginal_term(schema, c) for c in combinations(range(schema.d), K)])


def up_to_kway_marginals(schema, K, include_total=False):
    """All i-way marginals for ``1 <= i <= K`` (``0 <= i`` with ``include_total``)."""
    K = _check_k(schema, K)
    start = 0 if include_total else 1
    if K < start:
        raise WorkloadError("K must be at least 1 unless the total is included")
    terms = [
        _marginal_term(schema, c)
        for i in range(start, K + 1)
        for c in combinations(range(schema.d), i)
    ]
    return LogicalWorkload(schema, terms)


def _uniform(schema, block):
    return LogicalWorkload(schema, [ProductTerm(1.0, {name: block for name in schema.names})])


def prefix_product(schema):
    return _uniform(schema, PREFIX)


def allrange_product(schema):
    return _uniform(schema, ALLRANGE)


def identity_workload(schema):
    return _uniform(schema, IDENTITY)


def range_width(schema, w):
    return _uniform(schema, Block("range_width", width=int(w)))


def merged_schema(schema):
    """Single attribute covering the flattened domain of ``schema``."""
    if schema.d == 1:
        return schema
    return Schema([Attribute("*".join(schema.names), schema.N)])


def permuted_range(schema, seed=0):
    """All range queries over the flattened domain, right-multiplied by a seeded permutation."""
    merged = merged_schema(schema)
    perm = np.random.default_rng(int(seed)).permutation(merged.N)
    block = Block("allrange", permutation=perm)
    return LogicalWorkload(merged, [ProductTerm(1.0, {merged.names[0]: block})])


GENERATORS = {
    "all_kway_marginals": lambda s, p: all_kway_marginals(s, p["k"]),
    "up_to_kway_marginals": lambda s, p: up_to_kway_marginals(s, p["k"], p.get("include_total", False)),
    "prefix_product": lambda s, p: prefix_product(s),
    "allrange_product": lambda s, p: allrange_product(s),
    "identity": lambda s, p: identity_workload(s),
    "range_width": lambda s, p: range_width(s, p["w"] if "w" in p else p["width"]),
    "permuted_range": lambda s, p: permuted_range(s, p.get("seed", 0)),
}


def generate(kind, schema, **params):
    """Build a workload from a named generator (see :data:`GENERATORS`)."""
    if kind not in GENERATORS:
        raise WorkloadError(f"unknown generator {kind!r}; expected one of {sorted(GENERATORS)}")
    try:
        return GENERATORS[kind](schema, params)
    except KeyError as exc:
        raise WorkloadError(f"generator {kind!r} is missing parameter {exc.args[0]!r}") from None
