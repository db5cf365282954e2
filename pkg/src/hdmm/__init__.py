"""Workload-adaptive matrix mechanism over implicitly represented query matrices."""
from .error import ErrorReport, expected_error, identity_error, lm_error, ratio
from .estimator import HDMM
from .kron import KronStrategy, UnionStrategy, opt_kron, opt_plus
from .marginals import MarginalsStrategy, opt_marg
from .mechanism import DataVector, PrivateAnswer, answer, measure, opt_hdmm, reconstruct, run_hdmm
from .opt0 import opt0
from .workload import (
    Attribute,
    Block,
    LogicalWorkload,
    ProductTerm,
    Schema,
    WorkloadError,
    generate,
    impvec,
)

__version__ = "0.1.0"

__all__ = [
    "Attribute",
    "Block",
    "DataVector",
    "ErrorReport",
    "HDMM",
    "KronStrategy",
    "LogicalWorkload",
    "MarginalsStrategy",
    "PrivateAnswer",
    "ProductTerm",
    "Schema",
    "UnionStrategy",
    "WorkloadError",
    "answer",
    "expected_error",
    "generate",
    "identity_error",
    "impvec",
    "lm_error",
    "measure",
    "opt0",
    "opt_hdmm",
    "opt_kron",
    "opt_marg",
    "opt_plus",
    "ratio",
    "reconstruct",
    "run_hdmm",
]
