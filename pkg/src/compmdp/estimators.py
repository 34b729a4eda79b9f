"""scikit-learn style wrappers around the grid, abstraction and synthesis code.

The pipeline is not a learning problem, so the fit-data convention is
stretched: ``fit`` takes the object the step is computed from (a box, a
subsystem, an MDP) and the fitted state lives in trailing-underscore
attributes as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import Box, partition_box
from .mdp import abstract_subsystem, validate_stochastic
from .model import LinearSubsystem
from .synthesis import refine_policy, safety_value_iteration


def _points(X, dim: int) -> np.ndarray:
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if dim == 1 else X.reshape(1, -1)
    if X.shape[1] != dim:
        raise ValueError(f"X has {X.shape[1]} features, expected {dim}")
    return X


class GridQuantizer(TransformerMixin, BaseEstimator):
    """Map points to cell representatives of a uniform grid.

    The grid covers ``bounds`` (``(lower, upper)`` pairs) when given, else
    the per-feature range of the data passed to ``fit``. ``fit`` also
    accepts a :class:`Box` directly.
    """

    def __init__(self, cells_per_dim=10, bounds=None, extend=False):
        self.cells_per_dim = cells_per_dim
        self.bounds = bounds
        self.extend = extend

    def fit(self, X, y=None):
        if isinstance(X, Box):
            box = X
        elif self.bounds is not None:
            box = Box.from_pairs(self.bounds)
        else:
            arr = check_array(X, dtype=float)
            box = Box(arr.min(axis=0), arr.max(axis=0))
        self.grid_ = partition_box(box, self.cells_per_dim)
        self.n_features_in_ = box.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        X = _points(X, self.n_features_in_)
        return self.grid_.quantize(X, extend=self.extend)[1]

    def predict(self, X):
        """Flat cell index; ``-1`` outside the box when ``extend`` is set."""
        check_is_fitted(self, "grid_")
        X = _points(X, self.n_features_in_)
        return self.grid_.quantize(X, extend=self.extend)[0]


class FiniteAbstraction(BaseEstimator):
    """Build the finite MDP of a subsystem on uniform grids."""

    def __init__(self, state_cells=400, input_cells=15, internal_cells=1, threads=1, drop_tol=1e-12):
        self.state_cells = state_cells
        self.input_cells = input_cells
        self.internal_cells = internal_cells
        self.threads = threads
        self.drop_tol = drop_tol

    def fit(self, system: LinearSubsystem, y=None, internal_grid=None):
        if not isinstance(system, LinearSubsystem):
            raise TypeError("fit expects a LinearSubsystem")
        sg = partition_box(system.state_box, self.state_cells)
        ug = partition_box(system.input_box, self.input_cells)
        wg = internal_grid or partition_box(system.internal_box, self.internal_cells)
        self.mdp_ = abstract_subsystem(system, sg, ug, wg, drop_tol=self.drop_tol, threads=self.threads)
        self.report_ = validate_stochastic(self.mdp_)
        self.system_ = system
        return self

    def predict(self, X):
        """Abstract state index of concrete states ``X``."""
        check_is_fitted(self, "mdp_")
        return self.mdp_.state_grid.quantize(_points(X, self.system_.n))[0]

    def transition_rows(self, s, u, w=0) -> np.ndarray:
        check_is_fitted(self, "mdp_")
        idx = self.mdp_.row_index(np.asarray(s), np.asarray(u), np.asarray(w))
        return self.mdp_.transitions[np.atleast_1d(idx)].toarray()


class SafetyController(BaseEstimator):
    """Safety policy synthesized on a finite MDP and refined to concrete states."""

    def __init__(self, horizon=10, mode="robust", nominal_internal=None, K=None, step=0):
        self.horizon = horizon
        self.mode = mode
        self.nominal_internal = nominal_internal
        self.K = K
        self.step = step

    def fit(self, mdp, y=None):
        if isinstance(mdp, FiniteAbstraction):
            check_is_fitted(mdp, "mdp_")
            mdp = mdp.mdp_
        self.policy_ = safety_value_iteration(mdp, self.horizon, self.mode, self.nominal_internal)
        self.controller_ = refine_policy(self.policy_, K=self.K)
        self.n_features_in_ = mdp.state_grid.dim
        return self

    def predict(self, X):
        """Concrete inputs at time step ``step`` for states ``X``."""
        check_is_fitted(self, "policy_")
        return self.controller_(self.step, _points(X, self.n_features_in_))

    def score(self, X, y=None):
        """Mean safety probability of the abstract states holding ``X``."""
        check_is_fitted(self, "policy_")
        s = self.controller_.state_grid.quantize(_points(X, self.n_features_in_))[0]
        return float(self.policy_.values[self.step, s].mean())
