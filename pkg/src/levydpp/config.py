"""Experiment configuration: YAML text validated into typed models.

Unknown keys are errors.  Validation failures are collected into one
:class:`ConfigError` listing every offending field path.
"""
from __future__ import annotations

from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .control import ActionSet, FeedbackLattice, family_size
from .levy_noise import LevyMeasureSpec, PointMasses, PowerLaw, ShiftedLognormal
from .problems import REGISTRY, Problem, get_problem

BUNDLED = Path(__file__).parent / "configs"
DISCRETE_PROBLEMS = ("desk",)
MAX_FAMILY = 4096


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n" + "\n".join(f"  {p}" for p in problems))
        self.problems = problems


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Horizon(Strict):
    s: float = 0.0
    T: float

    @model_validator(mode="after")
    def _order(self):
        if not self.T > self.s:
            raise ValueError(f"T ({self.T}) must exceed s ({self.s})")
        return self


class PowerLawCfg(Strict):
    kind: Literal["power_law"] = "power_law"
    c: float = Field(gt=0)
    alpha: float = Field(gt=0, lt=2)
    symmetric: bool = True

    def build(self):
        return PowerLaw(c=self.c, alpha=self.alpha, symmetric=self.symmetric)


class PointMassCfg(Strict):
    kind: Literal["point_masses"] = "point_masses"
    atoms: List[List[Union[float, List[float]]]]

    @field_validator("atoms")
    @classmethod
    def _atoms(cls, v):
        for a in v:
            if len(a) != 2:
                raise ValueError("each atom is [mark, rate]")
        return v

    def build(self):
        return PointMasses(atoms=tuple((m, r) for m, r in self.atoms))


class LognormalCfg(Strict):
    kind: Literal["lognormal_shifted"] = "lognormal_shifted"
    rate: float = Field(gt=0)
    mu: float = 0.0
    sigma: float = Field(default=1.0, gt=0)
    symmetric: bool = True

    def build(self):
        return ShiftedLognormal(rate=self.rate, mu=self.mu, sigma=self.sigma, symmetric=self.symmetric)


LargeCfg = Annotated[Union[PowerLawCfg, PointMassCfg, LognormalCfg], Field(discriminator="kind")]


class NoiseCfg(Strict):
    jump_dim: int = Field(default=1, ge=1)
    small_part: Optional[PowerLawCfg] = None
    large_part: Optional[LargeCfg] = None
    small_cutoff: float = Field(default=0.1, gt=0, le=1)
    gaussian_remainder: bool = False

    def build(self) -> LevyMeasureSpec:
        return LevyMeasureSpec(
            jump_dim=self.jump_dim,
            small_part=self.small_part.build() if self.small_part else None,
            large_part=self.large_part.build() if self.large_part else None,
            small_cutoff=self.small_cutoff, gaussian_remainder=self.gaussian_remainder,
        )


class LatticeCfg(Strict):
    edges: List[float]
    segments: List[int]


class PolicyCfg(Strict):
    actions: List[float] = [-1.0, 1.0]
    breaks: List[float] = [0.5]
    lattice: Optional[LatticeCfg] = None
    cap: int = Field(default=MAX_FAMILY, ge=1, le=MAX_FAMILY)

    @model_validator(mode="after")
    def _size(self):
        if not self.actions:
            raise ValueError("actions must be nonempty")
        if self.breaks != sorted(self.breaks):
            raise ValueError("breaks must be increasing")
        lat = None if self.lattice is None else FeedbackLattice(tuple(self.lattice.edges), tuple(self.lattice.segments))
        size = family_size(len(self.actions), len(self.breaks) + 1, lat)
        if size > self.cap:
            raise ValueError(f"policy family has {size} members, above the cap of {self.cap}")
        return self


class BudgetCfg(Strict):
    n_paths: int = Field(default=400, ge=2)
    n_inner: int = Field(default=128, ge=2)
    n_seeds: int = Field(default=10_000, ge=1000)
    truncation_paths: int = Field(default=10_000, ge=2)
    moment_paths: int = Field(default=2000, ge=2)
    continuity_paths: int = Field(default=4000, ge=2)
    contrast_samples: int = Field(default=0, ge=0)
    fresh_budget: int = Field(default=400_000, ge=1)
    discrete_outer: int = Field(default=10_000, ge=2)
    discrete_inner: int = Field(default=512, ge=2)


class ToleranceCfg(Strict):
    se_mult: float = Field(default=3.0, gt=0)
    delta_dt: Optional[float] = Field(default=None, ge=0)
    moment_slack: float = Field(default=50.0, gt=1)


def _check_M(v):
    if v is not None and v < 1:
        raise ValueError("truncation levels must be at least 1")
    return v


class ChecksCfg(Strict):
    taus: List[Union[float, Literal["first_jump"]]] = [0.25, 0.5, 0.75]
    discrete_taus: List[str] = ["stage:1", "first_jump"]
    time_pairs: List[List[float]] = [[0.0, 0.25], [0.25, 0.5], [0.5, 0.75]]
    M: Optional[float] = None
    M_list: List[float] = [1.0, 2.0, 4.0, 8.0, 16.0]
    moment_M: Optional[float] = 8.0
    p_list: List[float] = [2.0, 4.0]
    x_grid: List[float] = [0.0, 1.0, 4.0, 16.0]
    continuity_alpha: float = Field(default=0.25, gt=0)
    continuity_beta: float = Field(default=8.0, gt=0)
    contrast_problem: Optional[str] = None

    @field_validator("M", "moment_M")
    @classmethod
    def _m(cls, v):
        return _check_M(v)

    @field_validator("M_list")
    @classmethod
    def _mlist(cls, v):
        for m in v:
            _check_M(m)
        if v != sorted(v):
            raise ValueError("M_list must be increasing")
        return v

    @field_validator("time_pairs")
    @classmethod
    def _pairs(cls, v):
        for pair in v:
            if len(pair) != 2 or not pair[0] < pair[1]:
                raise ValueError(f"time pair {pair} must be [t1, t2] with t1 < t2")
        return v

    @field_validator("p_list")
    @classmethod
    def _p(cls, v):
        if any(p < 2 for p in v):
            raise ValueError("moment orders must be at least 2")
        return v

    @field_validator("contrast_problem")
    @classmethod
    def _contrast(cls, v):
        if v is not None and v not in REGISTRY:
            raise ValueError(f"unknown problem {v!r}")
        return v


class SimulateCfg(Strict):
    n_paths: int = Field(default=4, ge=1)
    policy_index: int = Field(default=0, ge=0)
    M: Optional[float] = 4.0

    @field_validator("M")
    @classmethod
    def _m(cls, v):
        return _check_M(v)


class ValueCfg(Strict):
    s_grid: Optional[List[float]] = None
    x_grid: Optional[List[float]] = None
    M_values: List[Optional[float]] = [None]

    @field_validator("M_values")
    @classmethod
    def _m(cls, v):
        for m in v:
            _check_M(m)
        return v


class ExperimentConfig(Strict):
    problem: str
    horizon: Horizon
    seed: int = Field(ge=0, lt=2 ** 64)
    x0: float = 0.0
    n_steps: int = Field(default=256, ge=1, le=1 << 16)
    noise: Optional[NoiseCfg] = None
    policy: PolicyCfg = PolicyCfg()
    budget: BudgetCfg = BudgetCfg()
    tolerances: ToleranceCfg = ToleranceCfg()
    checks: ChecksCfg = ChecksCfg()
    simulate: SimulateCfg = SimulateCfg()
    value: ValueCfg = ValueCfg()
    output_dir: str = "out"

    @field_validator("problem")
    @classmethod
    def _problem(cls, v):
        if v not in REGISTRY and v not in DISCRETE_PROBLEMS:
            raise ValueError(f"unknown problem {v!r}; choose from {sorted(REGISTRY) + list(DISCRETE_PROBLEMS)}")
        return v

    @property
    def is_discrete(self) -> bool:
        return self.problem in DISCRETE_PROBLEMS

    def build_problem(self) -> Problem:
        """Registry problem with this config's horizon, start, grid, noise and family."""
        over = dict(s=self.horizon.s, T=self.horizon.T, x0=self.x0, n_steps=self.n_steps,
                    actions=ActionSet.finite_grid(self.policy.actions), time_breaks=tuple(self.policy.breaks))
        if self.policy.lattice is not None:
            over["lattice"] = FeedbackLattice(tuple(self.policy.lattice.edges), tuple(self.policy.lattice.segments))
        if self.noise is not None:
            over["spec"] = self.noise.build()
        return get_problem(self.problem, **over)


def _format_errors(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{path}: {e['msg']}")
    return out


def parse_config(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping of keys to values"])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def resolve_config_path(name_or_path: str) -> Path:
    """A file path, or the name of a bundled config (``heavy-tail``, ``desk``, ...)."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = BUNDLED / f"{name_or_path}.yaml"
    if bundled.exists():
        return bundled
    raise ConfigError([f"config: no file {name_or_path!r} and no bundled config of that name"])


def load_config(name_or_path: str, seed: Optional[int] = None) -> ExperimentConfig:
    path = resolve_config_path(name_or_path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"config: not valid YAML ({exc})"]) from None
    if seed is not None and isinstance(data, dict):
        data = dict(data, seed=seed)
    return parse_config(data)


def bundled_configs() -> list[str]:
    return sorted(p.stem for p in BUNDLED.glob("*.yaml"))
