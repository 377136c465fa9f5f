"""Unit-layer networks: gradient-flow simulation, embedded fixed points,
invariant manifolds and saddle-to-saddle analysis."""
from .constraints import ManifoldConstraint, NotOnManifoldError
from .data import (InitSpec, NetShape, compute_stats, gen_dataset, gen_spectrum_dataset,
                   init_weights)
from .datatypes import Dataset, DataStats
from .dynamics import detect_plateaus, effective_width, integrate
from .estimator import UnitLayerRegressor
from .kinds import ActivationKind, UnsupportedKindError
from .landscape import (EmbeddingSpec, embed_deep, embed_unit, enumerate_linear_saddles,
                        verify_fixed_point)
from .manifold import drift_test, manifold_fixed_point, project, residual
from .netcore import OutMap, UnitLayerNet, forward, grad, grad_fd, loss, reduce_width
from .theory import escape_time, linear_closed_form, spectral, t_infinity

__all__ = [
    "ActivationKind", "Dataset", "DataStats", "EmbeddingSpec", "InitSpec",
    "ManifoldConstraint", "NetShape", "NotOnManifoldError", "OutMap", "UnitLayerNet",
    "UnitLayerRegressor", "UnsupportedKindError", "compute_stats", "detect_plateaus",
    "drift_test", "effective_width", "embed_deep", "embed_unit", "enumerate_linear_saddles",
    "escape_time", "forward", "gen_dataset", "gen_spectrum_dataset", "grad", "grad_fd",
    "init_weights", "integrate", "linear_closed_form", "loss", "manifold_fixed_point",
    "project", "reduce_width", "residual", "spectral", "t_infinity", "verify_fixed_point",
]
