"""scikit-learn style wrapper around strategy selection and private answering."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .error import expected_error, identity_error
from .mechanism import OPERATORS, DataVector, answer, measure, opt_hdmm, reconstruct
from .validation import check_count, check_epsilon
from .workload import LogicalWorkload


class HDMM(BaseEstimator):
    """Workload-adaptive Laplace mechanism.

    ``fit`` sees only the workload and selects a strategy; ``transform``
    measures a data vector under that strategy and returns private workload
    answers.

    Parameters
    ----------
    epsilon : float
        Privacy budget spent by each call to ``transform``.
    operators : tuple of str
        Optimizers raced during ``fit``.
    restarts : int
        Random restarts per optimizer.
    seed : int
        Seed for optimization and noise.
    threads : int
        Concurrent restarts; results do not depend on it.

    Attributes
    ----------
    workload_ : LogicalWorkload
    strategy_ : KronStrategy, UnionStrategy or MarginalsStrategy
    expected_error_ : float
        Expected total squared error at ``epsilon``.
    identity_ratio_ : float
        Root error of the Identity baseline relative to ``strategy_``.
    """

    def __init__(self, epsilon=1.0, operators=OPERATORS, restarts=25, seed=0, threads=1):
        self.epsilon = epsilon
        self.operators = operators
        self.restarts = restarts
        self.seed = seed
        self.threads = threads

    def fit(self, workload, y=None):
        """Select a strategy for ``workload``.

        Returns
        -------
        self : HDMM
        """
        if not isinstance(workload, LogicalWorkload):
            raise TypeError("fit expects a LogicalWorkload")
        check_epsilon(self.epsilon)
        check_count(self.restarts, "restarts")
        check_count(self.threads, "threads")
        self.workload_ = workload
        self.strategy_ = opt_hdmm(
            workload, self.operators, restarts=self.restarts, seed=self.seed, threads=self.threads
        )
        self.expected_error_ = expected_error(workload, self.strategy_, self.epsilon)
        self.identity_ratio_ = float(np.sqrt(identity_error(workload, self.epsilon) / self.expected_error_))
        return self

    def _data(self, X):
        if isinstance(X, DataVector):
            if X.schema.sizes != self.workload_.schema.sizes:
                raise ValueError("data vector does not match the fitted workload's domain")
            return X
        return DataVector(self.workload_.schema, X)

    def reconstruct(self, X):
        """Least-squares estimate of the data vector from noisy measurements of ``X``."""
        check_is_fitted(self, "strategy_")
        y = measure(self.strategy_, self._data(X), self.epsilon, self.seed)
        return reconstruct(self.strategy_, y)

    def transform(self, X):
        """Private answers to the fitted workload.

        Parameters
        ----------
        X : DataVector or array-like of shape (N,)
            Counts over the flattened domain.

        Returns
        -------
        ndarray of shape (workload rows,)
        """
        check_is_fitted(self, "strategy_")
        return answer(self.workload_, self.reconstruct(X))

    def fit_transform(self, workload, X):
        return self.fit(workload).transform(X)
