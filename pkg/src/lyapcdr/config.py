"""Run and study configuration with strict JSON round-tripping.

Every field has an explicit default, unknown keys are rejected, and
:meth:`RunConfig.to_dict` emits the fully resolved configuration so that a
summary file can be fed back in to reproduce a run.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .rrk import available_tableaux
from .sbp import MAX_DEGREE

IC_KINDS = ("constant", "blob", "mms")
MAPPINGS = ("affine", "warp")
MAX_3D_ELEMENTS_PER_DIM = 24
MAX_3D_DEGREE = 4


def _reject_unknown(cls, data: dict, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {', '.join(unknown)}")


@dataclass
class InitialCondition:
    """Initial state selector.

    ``constant`` uses ``state`` (or the mass-derived equilibrium when
    ``state`` is ``None``), ``blob`` blends ``inside`` and ``outside`` levels
    across a tanh profile of width ``width`` around a ball of ``radius``,
    and ``mms`` samples the manufactured solution at the start time.
    """

    kind: str = "blob"
    state: list[float] | None = None
    inside: list[float] = field(default_factory=lambda: [10.0, 1.0])
    outside: list[float] = field(default_factory=lambda: [0.1, 0.1])
    radius: float = 0.3
    width: float = 0.03
    center: list[float] | None = None
    wavenumber: float = 3.0
    base: float = 1.25
    amplitude: float = 0.75
    form: str = "cos"

    @classmethod
    def from_dict(cls, data: dict) -> "InitialCondition":
        _reject_unknown(cls, data, "initial_condition")
        return cls(**data)

    def validate(self, dim: int) -> None:
        if self.kind not in IC_KINDS:
            raise ConfigurationError(f"initial_condition.kind must be one of {IC_KINDS}, got {self.kind!r}")
        for name in ("inside", "outside"):
            vals = getattr(self, name)
            if len(vals) != 2 or min(vals) <= 0:
                raise ConfigurationError(f"initial_condition.{name} must be two positive levels")
        if self.state is not None and (len(self.state) != 2 or min(self.state) <= 0):
            raise ConfigurationError("initial_condition.state must be two positive values")
        if self.radius <= 0 or self.width <= 0:
            raise ConfigurationError("initial_condition radius and width must be positive")
        if self.center is not None and len(self.center) != dim:
            raise ConfigurationError("initial_condition.center must have one entry per dimension")
        if self.form not in ("cos", "sqrt"):
            raise ConfigurationError("initial_condition.form must be 'cos' or 'sqrt'")


@dataclass
class RunConfig:
    """All inputs of one simulation."""

    dim: int = 2
    degree: int = 3
    elements: list[int] = field(default_factory=lambda: [16, 16])
    box: list[list[float]] | None = None
    mapping: str = "affine"
    warp_amplitude: float = 0.0
    k_f: float = 10.0
    k_r: float = 1.0
    d: float = 0.05
    velocity: list[float] | None = None
    time_dependent_diffusion: bool = False
    initial_condition: InitialCondition = field(default_factory=InitialCondition)
    equilibrium: list[float] | None = None
    tableau: str = "bs3"
    tableau_file: str | None = None
    relaxation: bool = True
    atol: float = 1e-8
    rtol: float = 1e-8
    dt_initial: float | None = None
    dt_fixed: float | None = None
    dt_max: float | None = None
    stability_cap: bool = True
    stability_safety: float = 0.8
    t_start: float = 0.0
    t_end: float = 1.0
    enable_convection: bool = True
    enable_diss_c: bool = True
    enable_diss_d: bool = True
    enable_viscous: bool = True
    enable_reaction: bool = True
    deterministic: bool = True
    threads: int = 1
    output_dir: str = "output"
    stride: int = 1
    threshold: float = 1e-8
    max_steps: int = 1_000_000

    def __post_init__(self):
        if isinstance(self.elements, int):
            self.elements = [self.elements] * self.dim
        self.elements = [int(k) for k in self.elements]
        if isinstance(self.initial_condition, dict):
            self.initial_condition = InitialCondition.from_dict(self.initial_condition)
        if self.velocity is None:
            self.velocity = [1.0] * self.dim
        if self.box is None:
            side = 2.0 * math.pi if self.initial_condition.kind == "mms" else 1.0
            self.box = [[0.0, side] for _ in range(self.dim)]
        self.validate()

    # validation -------------------------------------------------------------
    def validate(self) -> None:
        if self.dim not in (1, 2, 3):
            raise ConfigurationError(f"dim must be 1, 2 or 3, got {self.dim}")
        if not 1 <= self.degree <= MAX_DEGREE:
            raise ConfigurationError(f"degree must lie in [1, {MAX_DEGREE}], got {self.degree}")
        if len(self.elements) != self.dim or min(self.elements) < 1:
            raise ConfigurationError("elements must list one positive count per dimension")
        if self.dim == 3 and (max(self.elements) > MAX_3D_ELEMENTS_PER_DIM or self.degree > MAX_3D_DEGREE):
            raise ConfigurationError(
                f"3D runs are limited to {MAX_3D_ELEMENTS_PER_DIM} elements per direction and degree "
                f"{MAX_3D_DEGREE}")
        if len(self.box) != self.dim or any(len(b) != 2 or not b[1] > b[0] for b in self.box):
            raise ConfigurationError("box must list [lo, hi] with hi > lo for each dimension")
        if self.mapping not in MAPPINGS:
            raise ConfigurationError(f"mapping must be one of {MAPPINGS}")
        if self.mapping == "warp" and self.dim != 2:
            raise ConfigurationError("the warped mapping is available in 2D only")
        if len(self.velocity) != self.dim:
            raise ConfigurationError("velocity must have one component per dimension")
        if self.k_f < 0 or self.k_r <= 0 or self.d < 0:
            raise ConfigurationError("require k_f >= 0, k_r > 0 and d >= 0")
        if self.equilibrium is not None and (len(self.equilibrium) != 2 or min(self.equilibrium) <= 0):
            raise ConfigurationError("equilibrium must be two positive values")
        if self.tableau_file is None and self.tableau.lower() not in available_tableaux(include_aliases=True):
            raise ConfigurationError(f"unknown tableau {self.tableau!r}")
        if self.tableau_file is not None and not Path(self.tableau_file).is_file():
            raise ConfigurationError(f"tableau file {self.tableau_file!r} does not exist")
        if self.atol <= 0 or self.rtol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if not self.t_end > self.t_start:
            raise ConfigurationError("t_end must exceed t_start")
        if not 0 < self.stability_safety <= 1:
            raise ConfigurationError("stability_safety must lie in (0, 1]")
        for name in ("dt_initial", "dt_fixed", "dt_max"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.threads < 1 or self.stride < 1 or self.max_steps < 1:
            raise ConfigurationError("threads, stride and max_steps must be positive")
        if self.threshold <= 0:
            raise ConfigurationError("threshold must be positive")
        self.initial_condition.validate(self.dim)

    # serialization ------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        _reject_unknown(cls, data, "run config")
        data = dict(data)
        if "initial_condition" in data and isinstance(data["initial_condition"], dict):
            data["initial_condition"] = InitialCondition.from_dict(data["initial_condition"])
        return cls(**data)

    def with_overrides(self, **changes) -> "RunConfig":
        """Copy with ``changes`` applied; ``elements`` may be an int."""
        _reject_unknown(RunConfig, changes, "override")
        merged = self.to_dict()
        merged.update(changes)
        if "dim" in changes and "velocity" not in changes:
            merged["velocity"] = None
        if ("dim" in changes or "initial_condition" in changes) and "box" not in changes:
            merged["box"] = None
        return RunConfig.from_dict(merged)


@dataclass
class StudyConfig:
    """Refinement study: a base run repeated over degrees and element counts."""

    base: RunConfig = field(default_factory=RunConfig)
    levels: list[Any] = field(default_factory=lambda: [4, 8, 16])
    degrees: list[int] = field(default_factory=lambda: [3])
    overrides: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = RunConfig.from_dict(self.base)
        if len(self.levels) < 2:
            raise ConfigurationError("a study needs at least two refinement levels")
        if not self.degrees:
            raise ConfigurationError("a study needs at least one degree")
        if self.overrides and len(self.overrides) != len(self.levels):
            raise ConfigurationError("overrides must have one entry per level")
        for ov in self.overrides:
            _reject_unknown(RunConfig, ov, "override")

    def level_elements(self, k: int) -> list[int]:
        level = self.levels[k]
        return [int(level)] * self.base.dim if isinstance(level, (int, float)) else [int(v) for v in level]

    def run_config(self, degree: int, k: int) -> RunConfig:
        extra = dict(self.overrides[k]) if self.overrides else {}
        return self.base.with_overrides(degree=degree, elements=self.level_elements(k), **extra)

    def to_dict(self) -> dict[str, Any]:
        return {"base": self.base.to_dict(), "levels": list(self.levels),
                "degrees": list(self.degrees), "overrides": list(self.overrides)}

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        _reject_unknown(cls, data, "study config")
        return cls(**data)


def load_json(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    data = load_json(path)
    if "config" in data and "summary_version" in data:
        data = data["config"]
    return RunConfig.from_dict(data)


def load_study_config(path: str | Path) -> StudyConfig:
    return StudyConfig.from_dict(load_json(path))


