"""Run configuration: frozen dataclasses plus JSON loading and CLI merging."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .discretizer import DISCRETIZERS, ZERO_CONFIGS
from .errors import ConfigError
from .networks import NetworkTemplate
from .operations import SPACES

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    space_id: str = "3"
    zero_config: str = "V1"
    discretizer: str = "darts"
    k: int = 2
    xdarts_count_inputs: bool = True
    template: NetworkTemplate = field(default_factory=NetworkTemplate)
    loss: str = "icdarts"
    lam: float = 1.0
    temperature: float = 2.0
    seed: int = 0
    dataset: str = "synthetic"
    data_root: Optional[str] = None
    batch_size: int = 64
    pretrain_epochs: int = 1
    search_steps: int = 5
    warmup_steps: int = 10
    update_interval: int = 1
    steps_per_epoch: Optional[int] = None
    ws_lr: float = 0.08
    ws_momentum: float = 0.9
    ws_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_betas: Tuple[float, float] = (0.5, 0.999)
    alpha_weight_decay: float = 0.0
    grad_clip: float = 5.0
    we_inherit: bool = False
    verify_isolation: bool = False

    def __post_init__(self) -> None:
        if str(self.space_id) not in SPACES:
            raise ConfigError(f"Unknown search space: {self.space_id}")
        object.__setattr__(self, "space_id", str(self.space_id))
        if self.zero_config.upper() not in ZERO_CONFIGS:
            raise ConfigError(f"Unknown zero config: {self.zero_config}")
        object.__setattr__(self, "zero_config", self.zero_config.upper())
        if self.discretizer not in DISCRETIZERS:
            raise ConfigError(f"Unknown discretizer: {self.discretizer}")
        if self.search_steps < 1:
            raise ConfigError("search_steps (S_S) must be at least 1")
        if self.update_interval < 1:
            raise ConfigError("update_interval (S_U) must be at least 1")
        if self.warmup_steps < 0 or self.pretrain_epochs < 0:
            raise ConfigError("warmup_steps and pretrain_epochs must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        object.__setattr__(self, "alpha_betas", tuple(self.alpha_betas))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["template"] = self.template.to_dict()
        data["alpha_betas"] = list(self.alpha_betas)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SearchConfig":
        data = _known(cls, data)
        if isinstance(data.get("template"), Mapping):
            data["template"] = NetworkTemplate.from_dict(data["template"])
        return cls(**data)


@dataclass(frozen=True)
class RetrainSchedule:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cutout: Optional[int] = None
    drop_path: float = 0.3
    aux_weight: float = 0.4
    grad_clip: float = 5.0
    seed: int = 0
    steps_per_epoch: Optional[int] = None
    latency_batch_size: int = 128
    latency_batches: int = 10

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 1 or self.latency_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.latency_batches < 2:
            raise ConfigError("latency_batches must be at least 2")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError("drop_path must be in [0, 1)")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RetrainSchedule":
        return cls(**_known(cls, data))


@dataclass(frozen=True)
class TournamentConfig:
    tiers: int = 3
    o_max: int = 8
    seed: int = 0
    master_space: str = "combined"
    search: SearchConfig = field(default_factory=lambda: SearchConfig(space_id="combined"))
    tier_epochs: Optional[int] = None
    run_budget: Optional[int] = None

    def __post_init__(self) -> None:
        if self.tiers < 1:
            raise ConfigError("tiers (T) must be at least 1")
        if self.o_max < 1:
            raise ConfigError("o_max must be at least 1")
        if self.master_space not in SPACES:
            raise ConfigError(f"Unknown master space: {self.master_space}")
        if self.run_budget is not None and self.run_budget < 0:
            raise ConfigError("run_budget must be nonnegative")

    @property
    def epochs_per_run(self) -> int:
        if self.tier_epochs is not None:
            return max(1, self.tier_epochs)
        return max(1, self.search.search_steps // 3)

    def run_search_config(self, seed: int) -> SearchConfig:
        return replace(self.search, space_id=self.master_space, search_steps=self.epochs_per_run, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["search"] = self.search.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TournamentConfig":
        data = _known(cls, data)
        if isinstance(data.get("search"), Mapping):
            data["search"] = SearchConfig.from_dict(data["search"])
        return cls(**data)


def _known(cls, data: Mapping[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} fields: {', '.join(unknown)}")
    return dict(data)


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def merge_options(base: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """CLI flags win over the config file; ``None`` means the flag was not given."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            nested = merged.get(key)
            merged[key] = merge_options(nested if isinstance(nested, Mapping) else {}, value)
        else:
            merged[key] = value
    return merged
