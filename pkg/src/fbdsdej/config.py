"""Run configuration: schema, defaults and problem construction."""

from __future__ import annotations

import json
import math
import warnings
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .coefficients import EXAMPLE2_T, AffinePerturbation, builtin, problem_from_dict
from .continuation import ContinuationConfig
from .kernel import RegressionBasis
from .spaces import MarkSpace, ProblemSpec

BUILTINS = ("example1", "example2", "decoupled")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ContinuationSettings(_Strict):
    case: Literal["auto", "case1", "case2"] = "auto"
    delta: float = Field(0.25, gt=0, le=1)
    shrink: float = Field(0.5, gt=0, lt=1)
    min_delta: float = Field(1 / 64, gt=0, le=1)
    tol: float = Field(1e-4, gt=0)
    max_iter: int = Field(50, ge=1)
    relaxation: float = Field(0.5, gt=0, le=1)
    warm_start: bool = True

    def to_config(self, regression: "RegressionSettings") -> ContinuationConfig:
        return ContinuationConfig(
            case=self.case, delta=self.delta, shrink=self.shrink, min_delta=min(self.min_delta, self.delta),
            picard_tol=self.tol, picard_max_iter=self.max_iter, warm_start=self.warm_start,
            relaxation=self.relaxation, basis=regression.basis(),
        )


class RegressionSettings(_Strict):
    degree: int = Field(2, ge=0)
    max_interaction: int | None = Field(None, ge=1)
    ridge: float | None = Field(None, ge=0)

    def basis(self) -> RegressionBasis:
        return RegressionBasis(self.degree, self.max_interaction, self.ridge)


class HypothesisSettings(_Strict):
    samples: int = Field(10_000, ge=100)
    seed: int = Field(0, ge=0)
    radii: tuple[float, ...] = (0.1, 1.0, 10.0)


class ProbeSettings(_Strict):
    deltas: tuple[float, ...] = (0.05, 0.1, 0.25, 0.5, 1.0)
    pairs: int = Field(10, ge=1)

    @field_validator("deltas")
    @classmethod
    def _in_unit(cls, v):
        if not v or any(not 0 < d <= 1 for d in v):
            raise ValueError("every delta must lie in (0, 1]")
        return v


class DecoupledSettings(_Strict):
    theta1: float = Field(0.3, ge=0)
    phi_T: tuple[float, ...] | None = None


class RunConfig(_Strict):
    problem: str
    T: float | None = Field(None, gt=0)
    steps: int = Field(100, ge=1)
    paths: int = Field(10_000, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    d_H: int | None = Field(None, ge=1)
    d_E: int | None = Field(None, ge=1)
    x: tuple[float, ...] | None = None
    mark_weights: tuple[float, ...] | None = None
    continuation: ContinuationSettings = ContinuationSettings()
    regression: RegressionSettings = RegressionSettings()
    hypotheses: HypothesisSettings = HypothesisSettings()
    probe: ProbeSettings = ProbeSettings()
    decoupled: DecoupledSettings = DecoupledSettings()
    output: str = "out"
    csv_paths: int = Field(16, ge=1)
    workers: int | None = Field(None, ge=1)

    @field_validator("mark_weights")
    @classmethod
    def _positive(cls, v):
        if v is not None and (not v or any(not w > 0 for w in v)):
            raise ValueError("mark weights must be positive")
        return v

    @model_validator(mode="after")
    def _dimensions(self):
        if self.problem == "example2":
            if (self.d_H or 1) != 1 or (self.d_E or 1) != 1:
                raise ValueError("example2 has d_H = d_E = 1")
            if self.x is not None and len(self.x) != 1:
                raise ValueError("x must have length 1 for example2")
        elif self.problem in BUILTINS and self.x is not None and len(self.x) != (self.d_H or 1):
            raise ValueError(f"x has length {len(self.x)}, expected d_H = {self.d_H or 1}")
        return self

    @property
    def horizon(self) -> float:
        if self.T is not None:
            return self.T
        return EXAMPLE2_T if self.problem == "example2" else 1.0

    def hashed_fields(self) -> dict:
        """Config echo without fields that may not influence results."""
        d = self.model_dump(mode="json")
        d.pop("workers", None)
        d.pop("output", None)
        return d


def _format_errors(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def config_from_dict(data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None
    if cfg.problem not in BUILTINS:
        p = Path(cfg.problem)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if p.suffix != ".json" or not p.exists():
            raise ConfigError(f"problem: {cfg.problem!r} is neither a builtin {BUILTINS} nor an existing JSON file")
        cfg = cfg.model_copy(update={"problem": str(p)})
    if cfg.problem == "example2" and not math.isclose(cfg.horizon, EXAMPLE2_T, rel_tol=1e-12):
        warnings.warn(
            f"example2 with T = {cfg.horizon:g}: the two known solutions exist only for T = 3*pi/4",
            stacklevel=2,
        )
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(data, path.parent)


def build_problem(cfg: RunConfig):
    """Return ``(coefficients, perturbation, closed_forms)`` for the configured problem."""
    T = cfg.horizon
    if cfg.problem == "example1":
        d = cfg.d_H or 1
        x = np.zeros(d) if cfg.x is None else np.array(cfg.x)
        params = {"d_H": d, "d_E": cfg.d_E or 1, "T": T, "x": x}
        if cfg.mark_weights is not None:
            params["weights"] = cfg.mark_weights
        return builtin("example1", **params)
    if cfg.problem == "example2":
        return builtin("example2", T=T, x=np.zeros(1) if cfg.x is None else np.array(cfg.x))
    if cfg.problem == "decoupled":
        d = cfg.d_H or 1
        spec = ProblemSpec(d, cfg.d_E or 1, cfg.d_E or 1, T, np.ones(d) if cfg.x is None else np.array(cfg.x),
                           MarkSpace(cfg.mark_weights or (1.0,)))
        phi_T = np.zeros((1, d)) if cfg.decoupled.phi_T is None else np.array(cfg.decoupled.phi_T).reshape(1, d)
        return builtin("decoupled", spec=spec, theta1=cfg.decoupled.theta1,
                       pert=AffinePerturbation.zeros(spec, phi_T=phi_T))
    data = json.loads(Path(cfg.problem).read_text())
    if cfg.mark_weights is not None:
        data["mark_weights"] = list(cfg.mark_weights)
    try:
        coeffs = problem_from_dict(data, T=T if cfg.T is not None else None,
                                   x=np.array(cfg.x) if cfg.x is not None else None)
    except ValueError as err:
        raise ConfigError(f"problem file: {err}") from None
    return coeffs, None, None
