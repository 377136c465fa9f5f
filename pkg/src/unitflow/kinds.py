"""Activation kinds for unit-layer networks.

Each kind fixes the per-unit map phi(z; u), the parameter dimensions of a
unit and the algebraic properties (homogeneity, linearity, zero unit) that
decide which fixed-point constructions and invariant manifolds apply.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FC_TAGS = ("linear-fc", "relu-fc", "quadratic-fc", "poly-fc", "tanh-fc",
           "sigmoid-fc", "sin-fc", "ztanh-fc")
CONV_TAGS = ("conv1d-linear", "conv1d-relu")
ATTENTION_TAGS = ("linear-attention",)
ALL_TAGS = FC_TAGS + CONV_TAGS + ATTENTION_TAGS


class UnsupportedKindError(ValueError):
    """Raised when an operation is not defined for an activation kind."""


def _relu(z):
    return np.maximum(z, 0.0)


def _drelu(z):
    # subgradient at 0 is taken as 0
    return (z > 0).astype(float)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _dsigmoid(z):
    s = _sigmoid(z)
    return s * (1.0 - s)


def _ztanh(z):
    return z * np.tanh(z)


def _dztanh(z):
    t = np.tanh(z)
    return t + z * (1.0 - t * t)


_ELEMENTWISE = {
    "linear": (lambda z: z, lambda z: np.ones_like(z)),
    "relu": (_relu, _drelu),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "sigmoid": (_sigmoid, _dsigmoid),
    "sin": (np.sin, np.cos),
    "ztanh": (_ztanh, _dztanh),
}


@dataclass(frozen=True)
class ActivationKind:
    """Tag plus geometry of the unit map.

    ``degree`` is used by ``poly-fc``; ``embed_dim``, ``context_len``,
    ``head_rank`` and ``attn_scale`` (a constant multiplying the sum over
    heads, e.g. 1/N) by ``linear-attention``.  Convolutions always use kernel
    size 2, stride 2 and no padding.
    """

    tag: str
    degree: int | None = None
    embed_dim: int | None = None
    context_len: int | None = None
    head_rank: int | None = None
    kernel_size: int = 2
    stride: int = 2
    attn_scale: float = 1.0

    def __post_init__(self):
        if self.tag not in ALL_TAGS:
            raise ValueError(f"unknown activation kind {self.tag!r}")
        if self.tag == "poly-fc":
            if self.degree is None or int(self.degree) < 2:
                raise ValueError("poly-fc requires an integer degree >= 2")
        if self.tag == "linear-attention":
            for name in ("embed_dim", "context_len", "head_rank"):
                val = getattr(self, name)
                if val is None or int(val) < 1:
                    raise ValueError(f"linear-attention requires {name} >= 1")
        if self.tag in CONV_TAGS and (self.kernel_size != 2 or self.stride != 2):
            raise ValueError("convolutions use kernel_size=2 and stride=2")

    # -- classification -------------------------------------------------
    @property
    def family(self) -> str:
        if self.tag in CONV_TAGS:
            return "conv"
        if self.tag in ATTENTION_TAGS:
            return "attention"
        return "fc"

    @property
    def elementwise(self) -> str | None:
        """Name of the scalar nonlinearity for fc/conv kinds."""
        table = {
            "linear-fc": "linear", "conv1d-linear": "linear",
            "relu-fc": "relu", "conv1d-relu": "relu",
            "tanh-fc": "tanh", "sigmoid-fc": "sigmoid", "sin-fc": "sin",
            "ztanh-fc": "ztanh",
        }
        return table.get(self.tag)

    @property
    def poly_degree(self) -> int | None:
        """Polynomial degree of phi in u, when phi is a monomial map."""
        if self.tag in ("linear-fc", "conv1d-linear"):
            return 1
        if self.tag == "quadratic-fc":
            return 2
        if self.tag == "poly-fc":
            return int(self.degree)
        if self.tag == "linear-attention":
            return 2
        return None

    @property
    def is_linear(self) -> bool:
        return self.tag in ("linear-fc", "conv1d-linear")

    @property
    def homogeneity(self) -> str | None:
        """Field of the degree-1 homogeneity of phi in u: 'real', 'nonneg' or None."""
        if self.is_linear:
            return "real"
        if self.tag in ("relu-fc", "conv1d-relu"):
            return "nonneg"
        return None

    @property
    def has_zero_unit(self) -> bool:
        """True when phi(z; 0) = 0 for every z."""
        return self.tag != "sigmoid-fc"

    @property
    def smooth(self) -> bool:
        return self.tag not in ("relu-fc", "conv1d-relu")

    @property
    def moment_form(self) -> bool:
        """True when f is linear in a fixed feature map of the input.

        For these kinds the loss depends on data only through second
        moments, so dynamics can run on :class:`DataStats` directly.
        """
        return self.tag in ("linear-fc", "conv1d-linear", "quadratic-fc",
                            "poly-fc", "linear-attention")

    @property
    def default_width_mode(self) -> str:
        if self.is_linear:
            return "rank"
        if self.homogeneity == "nonneg":
            return "rays"
        return "active-units"

    def allowed_width_modes(self) -> tuple[str, ...]:
        modes = []
        if self.is_linear:
            modes.append("rank")
        if self.homogeneity is not None:
            modes.append("rays")
        if self.has_zero_unit:
            modes.append("active-units")
        return tuple(modes)

    # -- scalar nonlinearity --------------------------------------------
    def sigma(self, z):
        if self.tag == "quadratic-fc":
            return z * z
        if self.tag == "poly-fc":
            return z ** int(self.degree)
        return _ELEMENTWISE[self.elementwise][0](z)

    def dsigma(self, z):
        if self.tag == "quadratic-fc":
            return 2.0 * z
        if self.tag == "poly-fc":
            p = int(self.degree)
            return p * z ** (p - 1)
        return _ELEMENTWISE[self.elementwise][1](z)

    # -- geometry ---------------------------------------------------------
    def unit_dims(self, input_dim: int, output_dim: int = 1) -> tuple[int, int]:
        """Return (N_v, N_u) for a unit given the raw input/output size.

        For attention the input size is ignored (it follows from D, N).
        """
        if self.family == "conv":
            if input_dim % self.stride:
                raise ValueError("conv input dimension must be divisible by the stride")
            return input_dim // self.stride, self.kernel_size
        if self.family == "attention":
            d1 = int(self.embed_dim) + 1
            return d1 * d1, 2 * int(self.head_rank) * d1
        return output_dim, input_dim

    def describe(self) -> str:
        if self.tag == "poly-fc":
            return f"poly-fc({self.degree})"
        if self.tag == "linear-attention":
            return (f"linear-attention(D={self.embed_dim},N={self.context_len},"
                    f"R={self.head_rank})")
        return self.tag


def as_kind(kind) -> ActivationKind:
    """Coerce a tag string or an ActivationKind into an ActivationKind."""
    if isinstance(kind, ActivationKind):
        return kind
    if isinstance(kind, str):
        if kind.startswith("poly-fc(") and kind.endswith(")"):
            return ActivationKind("poly-fc", degree=int(kind[8:-1]))
        return ActivationKind(kind)
    raise TypeError(f"cannot interpret {kind!r} as an activation kind")
