"""scikit-learn style wrapper around gradient-descent training of a unit layer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import InitSpec, NetShape, init_weights
from .datatypes import Dataset
from .dynamics import detect_plateaus, effective_width, integrate
from .kinds import ActivationKind
from .netcore import forward


class UnitLayerRegressor(RegressorMixin, BaseEstimator):
    """Train a one-hidden-layer unit network from small initialization.

    Works for fully connected and convolutional kinds (vector inputs).
    After ``fit`` the training curve, its plateaus and the final effective
    width are available as ``trajectory_``, ``plateaus_`` and
    ``effective_width_``.
    """

    def __init__(self, activation="linear-fc", width=50, epsilon=1e-6, lr=0.01,
                 n_steps=2000, scheme="euler", degree=None, slope_tol=1e-2,
                 min_len=None, random_state=0):
        self.activation = activation
        self.width = width
        self.epsilon = epsilon
        self.lr = lr
        self.n_steps = n_steps
        self.scheme = scheme
        self.degree = degree
        self.slope_tol = slope_tol
        self.min_len = min_len
        self.random_state = random_state

    def _kind(self) -> ActivationKind:
        kind = ActivationKind(self.activation, degree=self.degree)
        if kind.family == "attention":
            raise ValueError("the estimator takes vector inputs; attention needs token matrices")
        return kind

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=float)
        kind = self._kind()
        self._y_1d = y.ndim == 1
        data = Dataset(X, y)
        n_v, n_u = kind.unit_dims(data.input_dim, data.output_dim)
        shape = NetShape(kind, int(self.width), n_v, n_u)
        rng = np.random.default_rng(self.random_state)
        net0 = init_weights(shape, InitSpec("isotropic", float(self.epsilon)), rng)
        traj = integrate(net0, data, float(self.lr), int(self.n_steps), scheme=self.scheme)
        self.net_ = traj.final
        self.trajectory_ = traj
        self.plateaus_ = detect_plateaus(traj, self.slope_tol, self.min_len,
                                         floor=1e-6 * traj.losses[0])
        self.effective_width_ = effective_width(self.net_)
        self.n_features_in_ = X.shape[1]
        self.loss_ = float(traj.losses[-1])
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = forward(self.net_, X)
        return out[:, 0] if self._y_1d and out.shape[1] == 1 else out
