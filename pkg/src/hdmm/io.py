"""JSON formats for schemas, workloads and strategies, and CSV ingestion."""
from __future__ import annotations

import csv
import json

import numpy as np

from .kron import KronStrategy, UnionStrategy
from .marginals import MarginalsStrategy
from .mechanism import DataVector
from .workload import Attribute, Block, LogicalWorkload, ProductTerm, Schema, WorkloadError, generate


class FormatError(ValueError):
    """Malformed input document or record."""


def dumps(obj):
    """Pretty JSON with sorted keys; floats keep their shortest round-trip repr."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- schema ----------------------------------------------------------------------------


def parse_attribute(doc):
    if not isinstance(doc, dict) or "name" not in doc:
        raise FormatError(f"attribute must be an object with a name, got {doc!r}")
    values = doc.get("values")
    if "range" in doc:
        lo, hi = doc["range"]
        values = list(range(int(lo), int(hi)))
    size = doc.get("size", None if values is None else len(values))
    if size is None:
        raise FormatError(f"attribute {doc['name']!r} needs a size, values or range")
    return Attribute(doc["name"], size, None if values is None else tuple(values))


def parse_schema(doc):
    """Schema from a list of attributes or from ``{"schema": [...]}``."""
    if isinstance(doc, dict):
        doc = doc.get("schema")
    if not isinstance(doc, list):
        raise FormatError("schema must be a list of attributes")
    return Schema([parse_attribute(a) for a in doc])


def schema_to_json(schema):
    out = []
    for a in schema.attributes:
        entry = {"name": a.name, "size": a.size}
        if a.values is not None:
            entry["values"] = list(a.values)
        out.append(entry)
    return out


# -- workload --------------------------------------------------------------------------


def parse_block(doc):
    if isinstance(doc, str):
        if doc in ("range_width", "dense"):
            raise FormatError(f"block {doc!r} needs parameters")
        return Block(doc)
    if not isinstance(doc, dict):
        raise FormatError(f"cannot interpret block {doc!r}")
    if "range_width" in doc:
        return Block("range_width", width=int(doc["range_width"]), permutation=doc.get("permutation"))
    if "dense" in doc:
        return Block("dense", entries=np.asarray(doc["dense"], dtype=float), permutation=doc.get("permutation"))
    if "kind" in doc:
        entries = doc.get("entries")
        return Block(
            doc["kind"],
            width=doc.get("width"),
            entries=None if entries is None else np.asarray(entries, dtype=float),
            permutation=doc.get("permutation"),
        )
    raise FormatError(f"cannot interpret block {doc!r}")


def block_to_json(b):
    if b.permutation is None and b.kind in ("identity", "total", "prefix", "allrange"):
        return b.kind
    out = {"kind": b.kind}
    if b.kind == "range_width":
        out = {"range_width": int(b.width)}
    elif b.kind == "dense":
        out = {"dense": b.entries.tolist()}
    if b.permutation is not None:
        out["permutation"] = b.permutation.tolist()
    return out


def parse_workload(doc, schema=None):
    """Workload from its JSON document.

    The schema comes from ``doc["schema"]`` or the ``schema`` argument.  Either
    ``terms`` or a ``generate`` shorthand such as
    ``{"kind": "up_to_kway_marginals", "k": 3}`` must be present.
    """
    if not isinstance(doc, dict):
        raise FormatError("workload document must be an object")
    if "schema" in doc:
        schema = parse_schema(doc["schema"])
    if schema is None:
        raise FormatError("workload has no schema; embed one or pass --schema")
    try:
        if "generate" in doc:
            params = dict(doc["generate"])
            kind = params.pop("kind", None)
            if kind is None:
                raise FormatError("generate needs a kind")
            return generate(kind, schema, **params)
        if "terms" not in doc:
            raise FormatError("workload needs terms or generate")
        terms = []
        for t in doc["terms"]:
            blocks = {name: parse_block(b) for name, b in t.get("blocks", {}).items()}
            terms.append(ProductTerm(t.get("weight", 1.0), blocks))
        return LogicalWorkload(schema, terms)
    except (TypeError, KeyError) as exc:
        raise FormatError(f"malformed workload: {exc}") from None


def workload_to_json(w):
    return {
        "schema": schema_to_json(w.schema),
        "terms": [
            {"weight": t.weight, "blocks": {name: block_to_json(b) for name, b in t.blocks.items()}}
            for t in w.terms
        ],
    }


# -- strategies ------------------------------------------------------------------------


def _factors_to_json(k):
    return [{"theta": t.tolist()} for t in k.factors]


def _factors_from_json(doc):
    return KronStrategy([np.asarray(f["theta"], dtype=float) for f in doc])


def strategy_to_json(strategy):
    if isinstance(strategy, KronStrategy):
        out = {"kind": "kron", "factors": _factors_to_json(strategy)}
    elif isinstance(strategy, UnionStrategy):
        out = {"kind": "union", "terms": [{"share": s, "factors": _factors_to_json(k)} for s, k in strategy.terms]}
        if strategy.partition is not None:
            out["partition"] = [list(map(int, g)) for g in strategy.partition]
    elif isinstance(strategy, MarginalsStrategy):
        out = {"kind": "marginals", "theta": strategy.theta.tolist(), "domain": list(strategy.domain)}
    else:
        raise TypeError(f"unsupported strategy type {type(strategy).__name__}")
    return out


def parse_strategy(doc):
    try:
        kind = doc["kind"]
        if kind == "kron":
            return _factors_from_json(doc["factors"])
        if kind == "union":
            terms = [(t["share"], _factors_from_json(t["factors"])) for t in doc["terms"]]
            return UnionStrategy(terms, partition=doc.get("partition"))
        if kind == "marginals":
            return MarginalsStrategy(np.asarray(doc["theta"], dtype=float), doc["domain"])
    except (TypeError, KeyError) as exc:
        raise FormatError(f"malformed strategy: {exc}") from None
    raise FormatError(f"unknown strategy kind {doc.get('kind')!r}")


# -- data ------------------------------------------------------------------------------


def _value_index(attr):
    if attr.values is None:
        return {str(i): i for i in range(attr.size)}
    return {str(v): i for i, v in enumerate(attr.values)}


def ingest_csv(schema, stream):
    """Count records of a CSV stream into a data vector.

    The header must name every schema attribute (extra columns are ignored).
    Cells are matched against each attribute's declared values, or against
    ``0..size-1`` when none are declared.  Cells are flattened row-major in
    schema order.
    """
    reader = csv.reader(stream)
    counts = np.zeros(schema.N)
    header = next(reader, None)
    if header is None:
        return DataVector(schema, counts)
    header = [h.strip() for h in header]
    missing = [n for n in schema.names if n not in header]
    if missing:
        raise FormatError(f"CSV is missing columns {missing}")
    cols = [header.index(n) for n in schema.names]
    lookups = [_value_index(a) for a in schema.attributes]
    strides = np.cumprod((schema.sizes[1:] + (1,))[::-1])[::-1]
    idx = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) < len(header):
            raise FormatError(f"row {line}: expected {len(header)} fields, got {len(row)}")
        flat = 0
        for c, lookup, stride, name in zip(cols, lookups, strides, schema.names):
            cell = row[c].strip()
            if cell not in lookup:
                raise FormatError(f"row {line}: value {cell!r} is not in the domain of {name!r}")
            flat += lookup[cell] * int(stride)
        idx.append(flat)
    if idx:
        counts += np.bincount(np.asarray(idx, dtype=np.int64), minlength=schema.N)
    return DataVector(schema, counts)


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


__all__ = [
    "FormatError",
    "WorkloadError",
    "dumps",
    "parse_schema",
    "schema_to_json",
    "parse_block",
    "block_to_json",
    "parse_workload",
    "workload_to_json",
    "strategy_to_json",
    "parse_strategy",
    "ingest_csv",
    "load_json",
]
