"""Expected error of strategies and of the two data-independent baselines.

All squared errors are ``(2 / epsilon^2) ||A||_1^2 ||W A^+||_F^2``.  Ratios
take the square root of an error quotient, so epsilon cancels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mechanism import strategy_error
from .validation import check_epsilon
from .workload import frobenius_sq, impvec


def _laplace_factor(epsilon):
    return 2.0 / check_epsilon(epsilon) ** 2


def expected_error(workload, strategy, epsilon=1.0):
    """Expected total squared error of answering ``workload`` with ``strategy``."""
    return _laplace_factor(epsilon) * strategy_error(workload, strategy)


def identity_error(workload, epsilon=1.0):
    """Error of measuring every cell of the data vector: ``(2/eps^2) ||W||_F^2``."""
    return _laplace_factor(epsilon) * frobenius_sq(workload)


def lm_error(workload, epsilon=1.0):
    """Error of noising each workload query directly: ``(2/eps^2) ||W||_1^2 m``."""
    return _laplace_factor(epsilon) * impvec(workload).sensitivity() ** 2 * workload.rows


def ratio(other_error, hdmm_error):
    """``sqrt(other_error / hdmm_error)``."""
    if not hdmm_error > 0:
        raise ZeroDivisionError("reference error must be positive")
    if other_error < 0:
        raise ValueError("errors must be nonnegative")
    return float(np.sqrt(other_error / hdmm_error))


@dataclass
class ErrorReport:
    """Root expected errors of several strategies for one workload.

    ``errors`` maps a strategy name to its expected total squared error;
    ``reference`` names the entry the ratios are taken against.
    """

    workload: str
    epsilon: float
    errors: dict
    reference: str = "hdmm"
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, workload, strategy, epsilon=1.0, name="workload"):
        errors = {
            "hdmm": expected_error(workload, strategy, epsilon),
            "identity": identity_error(workload, epsilon),
            "lm": lm_error(workload, epsilon),
        }
        return cls(name, float(epsilon), errors)

    def root_errors(self):
        return {k: float(np.sqrt(v)) for k, v in self.errors.items()}

    def ratios(self):
        ref = self.errors[self.reference]
        return {k: ratio(v, ref) for k, v in self.errors.items()}

    def to_dict(self):
        out = {
            "workload": self.workload,
            "epsilon": self.epsilon,
            "squared_error": dict(self.errors),
            "root_error": self.root_errors(),
            "ratio": self.ratios(),
        }
        out.update(self.extra)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        rows = [("strategy", "squared error", "root error", "ratio")]
        roots, ratios = self.root_errors(), self.ratios()
        for k in self.errors:
            rows.append((k, f"{self.errors[k]:.6g}", f"{roots[k]:.6g}", f"{ratios[k]:.4f}"))
        widths = [max(len(r[c]) for r in rows) for c in range(4)]
        lines = [f"workload {self.workload}  epsilon {self.epsilon:g}"]
        for r in rows:
            lines.append("  ".join(r[0].ljust(widths[0]) if c == 0 else r[c].rjust(widths[c]) for c in range(4)))
        return "\n".join(lines)
