"""Experiment configuration schema.

Configs are YAML (or JSON) documents validated by pydantic.  Unknown keys
are rejected at every level so a typo cannot silently change an experiment.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .data import DATASET_KINDS
from .dynamics import WIDTH_MODES
from .kinds import ALL_TAGS, ActivationKind


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    activation: str
    width: int = Field(gt=0)
    degree: int | None = None
    embed_dim: int | None = None
    context_len: int | None = None
    head_rank: int | None = None
    attn_scale: float = 1.0
    out_map: Literal["identity", "chain", "skip"] = "identity"
    # chain: N_v followed by the output size of every extra matrix except the last
    chain_widths: list[int] = Field(default_factory=list)
    skip_pattern: Literal["none", "skip1", "skip2"] = "none"
    skip_width: int | None = None

    @field_validator("activation")
    @classmethod
    def _known(cls, v):
        if v not in ALL_TAGS:
            raise ValueError(f"unknown activation kind {v!r}")
        return v

    def kind(self) -> ActivationKind:
        return ActivationKind(self.activation, degree=self.degree, embed_dim=self.embed_dim,
                              context_len=self.context_len, head_rank=self.head_rank,
                              attn_scale=self.attn_scale)

    @model_validator(mode="after")
    def _geometry(self):
        self.kind()
        if self.out_map != "identity" and self.activation != "linear-fc":
            raise ValueError("chain/skip out maps need activation linear-fc")
        return self


class DataConfig(_Strict):
    kind: str
    params: dict[str, Any] = Field(default_factory=dict)
    P: int = Field(default=8192, gt=0)
    kappa: float | None = None
    D: int | None = None
    mode: Literal["linear", "quadratic"] = "linear"
    stats: Literal["empirical", "prescribed"] = "empirical"

    @field_validator("kind")
    @classmethod
    def _known(cls, v):
        if v not in DATASET_KINDS + ("spectrum",):
            raise ValueError(f"unknown dataset kind {v!r}")
        return v

    @model_validator(mode="after")
    def _spectrum(self):
        if self.kind == "spectrum" and (self.kappa is None or self.D is None):
            raise ValueError("spectrum data needs kappa and D")
        if self.stats == "prescribed" and self.kind != "spectrum":
            raise ValueError("prescribed statistics exist only for spectrum data")
        return self


class InitConfig(_Strict):
    scheme: Literal["isotropic", "low-rank", "manifold-adjacent"] = "isotropic"
    epsilon: float = Field(default=1e-6, gt=0)
    scale_by_width: bool = False
    rank: int = 1
    sigma: float = Field(default=1.0, gt=0)
    delta: float = Field(default=0.0, ge=0)
    constraints: list[dict[str, Any]] = Field(default_factory=list)


class TrainConfig(_Strict):
    lr: float = Field(gt=0)
    steps: int = Field(gt=0)
    scheme: Literal["euler", "rk4"] = "euler"
    record_every: int | None = None


class AnalysisConfig(_Strict):
    slope_tol: float = Field(default=1e-3, gt=0)
    min_len: float | None = None
    floor_rtol: float = Field(default=1e-6, gt=0)
    width_mode: str | None = None
    width_tol: float = 0.05
    width_atol: float = 0.05
    converged_rtol: float = 1e-3
    predictions: bool = True
    escape_threshold: float = Field(default=1.0, gt=0)
    saddle: bool = True

    @field_validator("width_mode")
    @classmethod
    def _mode(cls, v):
        if v is not None and v not in WIDTH_MODES:
            raise ValueError(f"unknown width mode {v!r}")
        return v


class SweepConfig(_Strict):
    key: str | None = None
    values: list[Any] = Field(default_factory=list)
    seeds: list[int] = Field(default_factory=list)
    workers: int = 1


class ExperimentConfig(_Strict):
    name: str = "custom"
    seed: int
    model: ModelConfig
    data: DataConfig
    init: InitConfig = Field(default_factory=InitConfig)
    train: TrainConfig
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    output_dir: str | None = None
    sweep: SweepConfig | None = None


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    return ExperimentConfig.model_validate(yaml.safe_load(text))


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML) and re-validate."""
    raw = cfg.model_dump()
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_path(raw, key.strip(), _parse_value(value))
    return ExperimentConfig.model_validate(raw)


def set_path(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise KeyError(key)
        if node[p] is None:
            node[p] = {}
        node = node[p]
    if not isinstance(node, dict):
        raise KeyError(key)
    node[parts[-1]] = value
