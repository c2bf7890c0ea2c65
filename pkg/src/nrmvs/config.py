"""Run configuration shared by the pipeline and the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    # energy weights
    w_sparse: float = 1000.0
    w_dense: float = 0.01
    w_reg: float = 10.0
    # outlier rejection
    d_max: float = 0.01
    rho_max: float = 0.9
    tau: float = 0.9
    # deformation graph and solver
    k: int = 4
    num_nodes: int = 100
    pyramid_levels: int = 3
    assoc_iters_N: int = 5
    lm_max_iters: int = 50
    template_max_points: int = 20000
    # PatchMatch
    pm_iterations: int = 5
    pm_halvings: int = 6
    min_consistent_views: int = 1
    max_supports: int = 5
    min_ncc: float = 0.1
    geom_tol: float = 0.01
    window: int = 11
    sigma_color: float = 0.2
    seed: int = 0

    def validate(self) -> "RunConfig":
        if min(self.w_sparse, self.w_dense, self.w_reg) < 0:
            raise ValueError("weights must be nonnegative")
        if self.w_sparse == 0 and self.w_dense == 0:
            raise ValueError("w_sparse and w_dense cannot both be zero")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 < self.rho_max < 2:
            raise ValueError("rho_max must lie in (0, 2)")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        for name in (
            "k", "num_nodes", "pyramid_levels", "assoc_iters_N", "lm_max_iters",
            "template_max_points", "pm_iterations", "min_consistent_views", "max_supports",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pm_halvings < 0:
            raise ValueError("pm_halvings must be >= 0")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.num_nodes < self.k + 1:
            raise ValueError("num_nodes must exceed k")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            kind = int if known[key].type in ("int", int) else float
            if kind is int and (isinstance(value, bool) or float(value) != int(value)):
                raise ValueError(f"{key} must be an integer")
            kwargs[key] = kind(value)
        return cls(**kwargs).validate()

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def merged(self, overrides: dict) -> "RunConfig":
        """Copy with ``overrides`` applied (``None`` values are ignored)."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)
