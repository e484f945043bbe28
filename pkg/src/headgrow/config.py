"""Run configuration shared by the CLI subcommands."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .grow import GrowConfig

THRESHOLDS = ("nz_threshold", "blend_band", "residual_gate", "edge_factor", "merge_tol", "region_fraction")


@dataclass
class RunConfig:
    dataset: str | None = None
    out: str | None = None
    seed: int = 0
    workers: int | None = None
    clusters: list | None = None
    fractions: list = field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125, 0.0625])
    nz_threshold: float = 0.05
    blend_band: float = 10.0
    residual_gate: float = 2.0
    gate_iterations: int = 1
    n_over_3: bool = True
    edge_factor: float = 5.0
    merge_tol: float = 5.0
    region_fraction: float = 0.25
    sign: float = -1.0
    ambiguity_dims: int = 4
    same_side_reference: bool = True
    refine_azimuth: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in THRESHOLDS:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sign not in (-1.0, 1.0):
            raise ValueError(f"sign must be -1 or +1, got {self.sign}")
        if self.ambiguity_dims not in (3, 4):
            raise ValueError(f"ambiguity_dims must be 3 or 4, got {self.ambiguity_dims}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError(f"fractions must lie in (0, 1], got {self.fractions}")

    def grow_config(self) -> GrowConfig:
        names = {f.name for f in fields(GrowConfig)}
        return GrowConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def updated(self, **overrides) -> "RunConfig":
        doc = self.to_dict()
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**doc)
