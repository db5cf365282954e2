"""Input validation helpers shared by the public API."""
from __future__ import annotations

import numbers

import numpy as np


def check_epsilon(epsilon):
    if isinstance(epsilon, bool) or not isinstance(epsilon, numbers.Real):
        raise TypeError("epsilon must be a real number")
    epsilon = float(epsilon)
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise ValueError("epsilon must be positive and finite")
    return epsilon


def check_count(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer")
    value = int(value)
    if value < minimum:
        raise ValueError(f"{name} must be at least {minimum}")
    return value


def check_theta(theta):
    """Return ``theta`` as a finite, nonnegative 2-D float array."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[None, :]
    if theta.ndim != 2 or theta.shape[1] < 1:
        raise ValueError("theta must be a p x n matrix")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    return theta


def check_gram(gram, n=None):
    """Return ``gram`` as a finite square float array, optionally of size ``n``."""
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValueError("Gram matrix must be square")
    if n is not None and gram.shape[0] != n:
        raise ValueError(f"Gram matrix must be {n} x {n}, got {gram.shape}")
    if not np.all(np.isfinite(gram)):
        raise ValueError("Gram matrix must be finite")
    return gram


def check_vector(x, length, name="vector"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x
