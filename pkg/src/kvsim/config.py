"""Configuration management: application settings and experiment configs."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from kvsim.perfmodel import (
    DeviceSpec,
    EfficiencyFactors,
    InstanceSpec,
    LinkMode,
    ModelSpec,
    Phase,
    get_device,
    get_model,
)
from kvsim.workload import ArrivalProcess, ArrivalSpec, WorkloadSpec, get_workload


class ConfigError(ValueError):
    """Raised for unreadable or invalid experiment configuration."""

    def __init__(self, message: str, details: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.details = details or []


class Settings(BaseSettings):
    """Process-wide kvsim settings: `KVSIM_*` environment variables, `.env`, or a YAML profile."""

    app_name: str = "kvsim"
    app_version: str = "0.1.0"

    log: Optional[str] = None  # KVSIM_LOG, takes precedence over log_level
    log_level: str = "WARNING"
    log_format: str = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
    log_file: Optional[str] = None
    structured_logging: bool = False

    # Output and orchestration
    output_dir: Path = Path("results")
    max_workers: int = 1
    show_progress: bool = True

    model_config = SettingsConfigDict(
        env_prefix="KVSIM_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @property
    def effective_log_level(self) -> str:
        return (self.log or self.log_level).upper()

    @classmethod
    def from_yaml(cls, yaml_path: Path) -> "Settings":
        """Settings from a YAML mapping; environment variables still fill unset keys."""
        path = Path(yaml_path)
        if not path.is_file():
            raise FileNotFoundError(f"Settings file not found: {path}")
        values = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return cls(**values)

    @classmethod
    def from_profile(cls, profile: str) -> "Settings":
        """Settings from `configs/<profile>.yaml` (local, ci, batch)."""
        path = PROFILE_DIR / f"{profile}.yaml"
        if not path.is_file():
            raise FileNotFoundError(f"Unknown settings profile '{profile}': {path} does not exist")
        return cls.from_yaml(path)


PROFILE_DIR = Path("configs")

_active_settings: Optional[Settings] = None


def get_settings(config_path: Optional[Path] = None, profile: Optional[str] = None) -> Settings:
    """
    Return the process-wide settings, creating them on first use.

    An explicit settings file wins over a profile. Both are ignored once settings
    exist; call clear_settings_cache() to pick up new sources.
    """
    global _active_settings

    if _active_settings is not None:
        return _active_settings
    if config_path:
        _active_settings = Settings.from_yaml(config_path)
    elif profile:
        _active_settings = Settings.from_profile(profile)
    else:
        _active_settings = Settings()
    return _active_settings


def clear_settings_cache() -> None:
    """Forget the current settings; the next get_settings() call rebuilds them."""
    global _active_settings
    _active_settings = None


PolicyName = Literal["accellm", "splitwise_static", "unified"]


class PolicyConfig(BaseModel):
    """Scheduling policy selection plus every tunable it exposes."""

    model_config = ConfigDict(extra="forbid")

    name: PolicyName = "accellm"

    # accellm
    redundancy: bool = True
    synchronized_pairs: bool = True
    max_rebalance_moves: int = Field(default=8, ge=0)
    steal_prefill: bool = True
    timer_period_s: float = Field(default=1.0, gt=0.0)
    degraded_mode: bool = True
    degraded_trigger_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    degraded_ticks: int = Field(default=3, ge=1)
    degraded_exit_free_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    dual_retain_fraction: float = Field(default=1.0 / 3.0, ge=0.0, le=1.0)
    leveling: bool = True
    leveling_imbalance_threshold: float = Field(default=0.25, ge=0.0)
    leveling_budget_fraction: float = Field(default=0.10, ge=0.0, le=1.0)

    # splitwise_static
    num_prefill_instances: Optional[int] = Field(default=None, ge=1)
    high_load_cobatch: bool = False
    overflow_threshold_tokens: int = Field(default=16384, ge=0)


class EngineConfig(BaseModel):
    """Simulation engine knobs."""

    model_config = ConfigDict(extra="forbid")

    prefill_token_budget: int = Field(default=8192, ge=1)
    first_token_mode: Literal["prefill", "decode"] = "prefill"
    check_invariants: bool = False


class CurvesConfig(BaseModel):
    """Grid for the latency/throughput tables."""

    model_config = ConfigDict(extra="forbid")

    lengths: List[int] = Field(default_factory=lambda: [100, 500, 1000], min_length=1)
    batch_sizes: List[int] = Field(
        default_factory=lambda: [1, 2, 4, 8, 16, 32, 64, 128, 256], min_length=1
    )
    phases: List[Phase] = Field(default_factory=lambda: [Phase.PREFILL, Phase.DECODE])

    @model_validator(mode="after")
    def _positive(self) -> "CurvesConfig":
        if any(v <= 0 for v in self.lengths) or any(v <= 0 for v in self.batch_sizes):
            raise ValueError("curve lengths and batch sizes must be positive")
        return self


class ResourceSweepConfig(BaseModel):
    """Which device resource to vary and over which values."""

    model_config = ConfigDict(extra="forbid")

    resource: Literal["hbm_capacity", "link_bandwidth"] = "link_bandwidth"
    values: List[float] = Field(min_length=1)
    rate: Optional[float] = Field(default=None, ge=0.0)
    knee_tolerance: float = Field(default=0.01, ge=0.0)

    @model_validator(mode="after")
    def _positive(self) -> "ResourceSweepConfig":
        if any(v <= 0 for v in self.values):
            raise ValueError("resource values must be positive")
        return self


class ExperimentConfig(BaseModel):
    """
    One experiment: cluster, model, workload, policies and rates.

    Presets are referenced by name or given inline. Unknown keys are rejected.
    """

    model_config = ConfigDict(extra="forbid")

    model: Union[str, ModelSpec] = "llama-2-70b"
    device: Union[str, DeviceSpec] = "H100"
    instances: int = Field(default=4, ge=1)
    devices_per_instance: int = Field(default=4, ge=1)
    memory_reserve_fraction: float = Field(default=0.10, ge=0.0, lt=1.0)
    link_mode: LinkMode = LinkMode.STRIPED
    efficiency: EfficiencyFactors = Field(default_factory=EfficiencyFactors)

    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    policies: List[PolicyName] = Field(
        default_factory=list, description="policies compared by sweeps; empty means policy.name"
    )

    workload: Union[str, WorkloadSpec] = "mixed"
    arrival_process: ArrivalProcess = ArrivalProcess.POISSON
    rates: List[float] = Field(default_factory=lambda: [4.0])
    duration_s: float = Field(default=300.0, gt=0.0)
    warmup_s: float = Field(default=30.0, ge=0.0)
    drain_s: float = Field(default=120.0, ge=0.0)
    seed: int = 0
    trace_path: Optional[Path] = None

    engine: EngineConfig = Field(default_factory=EngineConfig)
    curves: CurvesConfig = Field(default_factory=CurvesConfig)
    resource_sweep: Optional[ResourceSweepConfig] = None
    output_dir: Optional[Path] = None

    @model_validator(mode="after")
    def _cross_checks(self) -> "ExperimentConfig":
        if not self.rates:
            raise ValueError("rates must not be empty")
        if any(r < 0 for r in self.rates):
            raise ValueError("rates must be non-negative")
        if self.warmup_s >= self.duration_s:
            raise ValueError("warmup_s must be shorter than duration_s")
        for name in self.sweep_policies():
            if name == "accellm" and self.instances % 2:
                raise ValueError("even instance count required")
            if name == "splitwise_static":
                if self.instances < 2:
                    raise ValueError("splitwise_static needs at least 2 instances")
                k = self.policy.num_prefill_instances
                if k is not None and k >= self.instances:
                    raise ValueError("splitwise requires fewer prefill instances than instances")
        if isinstance(self.model, str):
            get_model(self.model)
        if isinstance(self.device, str):
            get_device(self.device)
        if isinstance(self.workload, str):
            get_workload(self.workload)
        return self

    def sweep_policies(self) -> List[str]:
        return list(self.policies) if self.policies else [self.policy.name]

    def resolved_model(self) -> ModelSpec:
        return get_model(self.model) if isinstance(self.model, str) else self.model

    def resolved_device(self) -> DeviceSpec:
        return get_device(self.device) if isinstance(self.device, str) else self.device

    def resolved_workload(self) -> WorkloadSpec:
        return get_workload(self.workload) if isinstance(self.workload, str) else self.workload

    def instance_spec(self, device: Optional[DeviceSpec] = None) -> InstanceSpec:
        return InstanceSpec(
            device=device or self.resolved_device(),
            num_devices=self.devices_per_instance,
            tensor_parallel=self.devices_per_instance,
            memory_reserve_fraction=self.memory_reserve_fraction,
            link_mode=self.link_mode,
        )

    def cluster(self, device: Optional[DeviceSpec] = None) -> List[InstanceSpec]:
        return [self.instance_spec(device)] * self.instances

    def arrival_spec(self, rate: float) -> ArrivalSpec:
        return ArrivalSpec(
            rate=rate, process=self.arrival_process, duration=self.duration_s, seed=self.seed
        )

    def policy_for(self, name: str) -> PolicyConfig:
        return self.policy.model_copy(update={"name": name})

    def resolved_dump(self) -> Dict[str, Any]:
        """Every field with presets expanded, as JSON-compatible data."""
        data = self.model_dump(mode="json")
        data["model"] = self.resolved_model().model_dump(mode="json")
        data["device"] = self.resolved_device().model_dump(mode="json")
        data["workload"] = self.resolved_workload().model_dump(mode="json")
        return data

    def config_hash(self) -> str:
        """SHA-256 of the canonical resolved configuration."""
        canonical = json.dumps(self.resolved_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _validation_details(error: ValidationError) -> List[Dict[str, Any]]:
    return [
        {"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"], "type": e["type"]}
        for e in error.errors()
    ]


def parse_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate raw config data.

    Raises:
        ConfigError: With one detail entry per validation problem
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        details = _validation_details(e)
        first = details[0]["msg"] if details else str(e)
        raise ConfigError(f"invalid experiment config: {first}", details) from None


def load_experiment_config(path: Path) -> ExperimentConfig:
    """
    Load an experiment config from JSON (or YAML by extension).

    Args:
        path: Config file path

    Returns:
        Validated configuration

    Raises:
        ConfigError: If the file is missing, unparseable or invalid
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object: {path}")
    return parse_experiment_config(data)


def experiment_config_schema() -> Dict[str, Any]:
    """JSON schema of the experiment config format."""
    return ExperimentConfig.model_json_schema()
