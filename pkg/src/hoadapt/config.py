"""Run configuration dataclasses and their JSON form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-4  # RMS residual
    step_tolerance: float = 1e-4  # l2 length of the accepted step
    max_iterations: int = 100
    max_halvings: int = 50
    cg_rtol: float = 1e-6
    cg_max_iter: int = 1000
    preconditioner: str = "diagonal"  # or "ilu"
    armijo: float = 1e-4
    sufficient_decrease: bool = True

    def __post_init__(self):
        for name in ("tolerance", "step_tolerance", "cg_rtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.preconditioner not in ("diagonal", "ilu"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")
        if self.max_iterations < 0 or self.max_halvings < 1:
            raise ValueError("iteration limits must be positive")


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 1e4
    boundary_exactness: int | None = None  # default 2p + 2
    corner_penalty: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")


@dataclass(frozen=True)
class RunConfig:
    """The on-disk run configuration (keys as in the config file)."""

    lam: float = 1e4
    tolerance: float = 1e-4
    step_tolerance: float = 1e-4
    max_iterations: int = 100
    quadrature_exactness: int | None = None
    preconditioner: str = "diagonal"

    def solver(self) -> SolverConfig:
        return SolverConfig(tolerance=self.tolerance, step_tolerance=self.step_tolerance,
                            max_iterations=self.max_iterations, preconditioner=self.preconditioner)

    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig(lam=self.lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1))
