"""Dataset and second-moment statistics containers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class Dataset:
    """A full-batch training set.

    inputs has shape (P, d) for vector inputs or (P, D+1, N+1) for token
    matrices; targets always has shape (P, n_out).
    """

    inputs: np.ndarray
    targets: np.ndarray
    kind: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        Y = np.asarray(self.targets, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] == 0:
            raise ValueError("dataset is empty")
        if X.shape[0] != Y.shape[0]:
            raise ValueError("inputs and targets disagree on the sample count")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    @property
    def P(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]


@dataclass(frozen=True, eq=False)
class DataStats:
    """Second moments of a feature map of the inputs.

    The network output of every moment-form kind is ``M @ feat(x)``, so the
    squared loss is ``1/2 tr S_yy - tr(M S_yf^T) + 1/2 tr(M S_ff M^T)``.

    feature: 'linear' (feat = x), 'poly<p>' (feat = vec x^{(x)p}) or
    'attention' (feat = vec of (X X^T) (x) x_q).
    """

    feature: str
    sigma_yf: np.ndarray
    sigma_ff: np.ndarray
    sigma_yy: np.ndarray
    provenance: str = "prescribed"
    input_dim: int | None = None

    def __post_init__(self):
        yf = np.atleast_2d(np.asarray(self.sigma_yf, dtype=float))
        ff = np.atleast_2d(np.asarray(self.sigma_ff, dtype=float))
        yy = np.atleast_2d(np.asarray(self.sigma_yy, dtype=float))
        if ff.shape != (yf.shape[1], yf.shape[1]):
            raise ValueError("sigma_ff shape does not match sigma_yf")
        if yy.shape != (yf.shape[0], yf.shape[0]):
            raise ValueError("sigma_yy shape does not match sigma_yf")
        object.__setattr__(self, "sigma_yf", yf)
        object.__setattr__(self, "sigma_ff", 0.5 * (ff + ff.T))
        object.__setattr__(self, "sigma_yy", yy)

    @property
    def output_dim(self) -> int:
        return self.sigma_yf.shape[0]

    # named views used by the theory code
    @property
    def sigma_yz(self) -> np.ndarray:
        self._require("linear")
        return self.sigma_yf

    @property
    def sigma_zz(self) -> np.ndarray:
        self._require("linear")
        return self.sigma_ff

    @property
    def sigma_yZ(self) -> np.ndarray:
        """Quadratic cross-moment reshaped to a symmetric (D, D) matrix."""
        self._require("poly2")
        d = int(round(np.sqrt(self.sigma_yf.shape[1])))
        m = self.sigma_yf[0].reshape(d, d)
        return 0.5 * (m + m.T)

    @property
    def sigma_ZZ(self) -> np.ndarray:
        self._require("poly2")
        return self.sigma_ff

    def _require(self, feature):
        if self.feature != feature:
            raise ValueError(f"statistics have feature {self.feature!r}, not {feature!r}")
