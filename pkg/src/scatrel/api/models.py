"""Run configuration: JSON documents validated by pydantic."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from scatrel.core.errors import ConfigError, DomainError
from scatrel.core.flow import HamiltonianSystem, Tolerances
from scatrel.core.potential import KINDS, PotentialModel, load_table

Direction = Union[float, list[float]]
Range = tuple[float, float]


def _nonempty(value: Range) -> Range:
    lo, hi = value
    if not hi > lo:
        raise ValueError(f"range must be nonempty, got ({lo}, {hi})")
    return value


NonEmptyRange = Annotated[Range, AfterValidator(_nonempty)]


def direction_vector(value: Direction, dimension: int) -> np.ndarray:
    """An angle (n = 2) or an explicit vector, normalized."""
    if isinstance(value, (int, float)):
        if dimension != 2:
            raise DomainError("a scalar direction is an angle and needs dimension 2")
        return np.array([np.cos(value), np.sin(value)])
    vec = np.asarray(value, dtype=float)
    if vec.shape != (dimension,) or not np.linalg.norm(vec) > 0:
        raise DomainError(f"direction needs {dimension} components, not all zero")
    return vec / np.linalg.norm(vec)


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class PotentialConfig(_Block):
    kind: str = "gaussian"
    params: dict[str, float] = Field(default_factory=dict)
    rho: float = 2.0
    center: Optional[list[float]] = None
    aspect: Optional[list[float]] = None
    table: Optional[str] = None
    extrapolation: Literal["zero", "none"] = "zero"

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v: str) -> str:
        if v not in KINDS:
            raise ValueError(f"unknown potential kind '{v}', expected one of {KINDS}")
        return v

    @field_validator("rho")
    @classmethod
    def _short_range(cls, v: float) -> float:
        if not v > 1.0:
            raise ValueError("rho must exceed 1 for a short-range potential")
        return v

    def build(self, dimension: int, base: Optional[Path] = None) -> PotentialModel:
        table = None
        if self.table is not None:
            path = Path(self.table)
            table = load_table(path if path.is_absolute() or base is None else base / path)
        return PotentialModel(
            self.kind,
            self.params,
            rho=self.rho,
            dimension=dimension,
            table=table,
            center=self.center,
            aspect=self.aspect,
            extrapolation=self.extrapolation,
        )


class TolerancesConfig(_Block):
    rtol: float = 1e-10
    atol: float = 1e-12
    energy: float = 1e-9
    incoming: float = 1e-10
    newton: float = 1e-9

    @field_validator("rtol", "atol", "energy", "incoming", "newton")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("tolerances must be positive")
        return v

    def flow(self) -> Tolerances:
        return Tolerances(rtol=self.rtol, atol=self.atol, energy=self.energy)


class TrajectoryConfig(_Block):
    omega: Direction = 0.0
    z: Union[float, list[float]] = 0.5
    t_max: Optional[float] = None
    variational: bool = True
    sweep: bool = False
    sweep_resolution: int = 20

    @field_validator("t_max")
    @classmethod
    def _positive_horizon(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not v > 0:
            raise ValueError("t_max must be positive")
        return v


class PatchConfig(_Block):
    omega_range: NonEmptyRange = (-0.5, 0.5)
    z_range: NonEmptyRange = (0.3, 2.6)
    resolution: int = 50
    resolutions: list[int] = Field(default_factory=lambda: [25, 50, 100])
    omega_axis: int = 0
    z_axis: int = 0
    omega_base: Optional[list[float]] = None
    z_fixed: float = 0.0

    @field_validator("resolution")
    @classmethod
    def _at_least_two(cls, v: int) -> int:
        if v < 2:
            raise ValueError("resolution must be at least 2")
        return v


class GridConfig(_Block):
    omega_range: Range = (0.0, 0.0)
    omega_count: int = 1
    theta_range: Range = (40.0 * np.pi / 180.0, 120.0 * np.pi / 180.0)
    theta_count: int = 9
    diagonal_band_deg: float = 10.0

    @model_validator(mode="after")
    def _counts(self) -> "GridConfig":
        if self.omega_count < 1 or self.theta_count < 1:
            raise ValueError("grid counts must be positive")
        if self.omega_count > 1:
            _nonempty(self.omega_range)
        if self.theta_count > 1:
            _nonempty(self.theta_range)
        return self

    def omegas(self) -> np.ndarray:
        return np.linspace(*self.omega_range, self.omega_count)

    def thetas(self) -> np.ndarray:
        return np.linspace(*self.theta_range, self.theta_count)


class SolveConfig(_Block):
    omega: Direction = 0.0
    theta: Direction = 1.2
    search_radius: Optional[float] = None
    grid_density: float = 20.0


class ActionConfig(_Block):
    t0: Optional[float] = None
    s: Optional[float] = None
    r_bar: Optional[float] = None
    fd_step: float = 1e-4
    wkb_samples: int = 0
    region_radius: float = 8.0
    region_band: float = 2.0
    region_sigma: float = 0.5


class OracleConfig(_Block):
    lmax: Optional[int] = None
    tail_threshold: float = 1e-12
    born: bool = True


class FioConfig(_Block):
    resolution: int = 384
    alpha_range: NonEmptyRange = (-0.3, 0.3)
    beta_range: NonEmptyRange = (1.2, 2.0)
    margin: float = 0.3
    direction: int = 1


class RunConfig(_Block):
    potential: PotentialConfig = Field(default_factory=PotentialConfig)
    lam: float = Field(0.5, alias="lambda")
    dimension: int = 2
    tolerances: TolerancesConfig = Field(default_factory=TolerancesConfig)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    patch: PatchConfig = Field(default_factory=PatchConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    solve: SolveConfig = Field(default_factory=SolveConfig)
    action: ActionConfig = Field(default_factory=ActionConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    fio: FioConfig = Field(default_factory=FioConfig)
    h_values: list[float] = Field(default_factory=lambda: [0.2, 0.14, 0.1, 0.07, 0.05])
    out: str = "out"
    seed: int = 0
    threads: int = 1

    @field_validator("lam")
    @classmethod
    def _positive_energy(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("lambda must be positive")
        return v

    @field_validator("dimension")
    @classmethod
    def _dimension(cls, v: int) -> int:
        if v not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        return v

    @field_validator("h_values")
    @classmethod
    def _h_grid(cls, v: list[float]) -> list[float]:
        if not v or any(h <= 0 for h in v) or any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("h_values must be positive and strictly decreasing")
        return v

    @field_validator("threads")
    @classmethod
    def _threads(cls, v: int) -> int:
        if v == 0 or v < -1:
            raise ValueError("threads must be positive (or -1 for all cores)")
        return v

    def direction_problem(self) -> Optional[tuple[tuple[str, str], str]]:
        """First direction field that does not fit the dimension, with the reason."""
        fields = {
            ("trajectory", "omega"): self.trajectory.omega,
            ("solve", "omega"): self.solve.omega,
            ("solve", "theta"): self.solve.theta,
        }
        for loc, value in fields.items():
            try:
                direction_vector(value, self.dimension)
            except DomainError as exc:
                return loc, str(exc)
        return None

    def system(self, base: Optional[Path] = None) -> HamiltonianSystem:
        return HamiltonianSystem(self.potential.build(self.dimension, base), self.lam)

    def canonical_json(self) -> str:
        """Serialization used for the config hash: sorted keys, output location excluded."""
        data = self.model_dump(mode="json", by_alias=True, exclude={"out", "threads"})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _field_line(text: str, loc: tuple) -> Optional[int]:
    for key in reversed([part for part in loc if isinstance(part, str)]):
        name = "lambda" if key == "lam" else key
        match = re.search(rf'"{re.escape(name)}"\s*:', text)
        if match:
            return text.count("\n", 0, match.start()) + 1
    return None


def parse_config(text: str) -> RunConfig:
    """Validate a JSON document; errors carry the line and the field path."""
    try:
        json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    try:
        cfg = RunConfig.model_validate_json(text)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = tuple(first["loc"])
        path = ".".join(str(p) for p in loc)
        raise ConfigError(f"{path}: {first['msg']}", line=_field_line(text, loc), field=path) from exc
    problem = cfg.direction_problem()
    if problem is not None:
        loc, reason = problem
        path = ".".join(loc)
        raise ConfigError(f"{path}: {reason}", line=_field_line(text, loc), field=path)
    return cfg


def load_config(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
