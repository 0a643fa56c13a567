"""Experiment configuration: one flat dataclass, one flat key=value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised on unknown keys or values that cannot be coerced."""


@dataclass
class Config:
    # embedding model
    model_kind: str = "transe"      # transe | rotate
    dim_entity: int = 100
    dim_class: int = 50
    margin_er: float = 1.0
    margin_ec: float = 1.0
    negatives_per_pos: int = 2
    epochs: int = 200
    batch_size: int = 512
    lr: float = 0.05
    grad_clip: float = 5.0
    normalize_entities: int = 1   # project entity rows to the unit sphere per epoch
    fit_weight: float = 0.0       # extra pull of positive triplet scores toward 0

    # alignment model
    z_ent: float = 0.05
    z_rel: float = 0.1
    z_cls: float = 0.1
    tau: float = 0.9
    focal_gamma: float = 2.0
    align_epochs: int = 100
    align_lr: float = 0.05
    finetune_epochs: int = 30
    joint_structure: int = 1    # interleave structure passes with alignment epochs

    # inference power
    mu: int = 5
    kappa: float = 0.8
    bound_samples: int = 8
    beam_width: int = 64

    # selection
    pool_top_n: int = 20
    budget: int = 100
    rho: float = 0.9
    edge_sim_floor: float = 0.0

    # harness
    selector: str = "daakg_greedy"
    rounds: int = 5
    total_budget: int = -1          # -1 means rounds * budget
    seed_match_fraction: float = 0.1
    test_match_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> "Config":
        if self.model_kind not in ("transe", "rotate"):
            raise ConfigError(f"model_kind must be transe or rotate, got {self.model_kind!r}")
        if self.model_kind == "rotate" and self.dim_entity % 2 != 0:
            raise ConfigError("rotate needs an even dim_entity (complex pairing)")
        if not (0.0 < self.tau < 1.0):
            raise ConfigError(f"tau must lie in (0,1), got {self.tau}")
        if not (0.0 <= self.kappa < 1.0):
            raise ConfigError(f"kappa must lie in [0,1), got {self.kappa}")
        if not (0.0 < self.rho <= 1.0):
            raise ConfigError(f"rho must lie in (0,1], got {self.rho}")
        for name in ("z_ent", "z_rel", "z_cls"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be non-negative")
        return self

    @property
    def dim_relation(self) -> int:
        # rotate stores one phase per complex coordinate
        return self.dim_entity if self.model_kind == "transe" else self.dim_entity // 2

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw).validate()


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    text = raw.strip()
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    return text


def load_config(path: str | Path, overrides: dict | None = None) -> Config:
    """Parse a flat `key = value` file; later keys win, `#` starts a comment."""
    values: dict = {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return Config(**values).validate()


def dump_config(cfg: Config, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(Config)]
    Path(path).write_text("\n".join(lines) + "\n")
