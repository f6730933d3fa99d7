"""
Run configuration: defaults, optional JSON config file, flag overrides and .env.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from .errors import ConfigError
from .models import GeoPoint, Geofence, DbscanParams

# Environment from .env (GEOPULSE_SEED, GEOPULSE_LOG_LEVEL)
load_dotenv()

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "GEOPULSE_SEED"
LOG_LEVEL_ENV_VAR = "GEOPULSE_LOG_LEVEL"

# Times Square, 5 km
DEFAULT_CENTER = GeoPoint(lat=40.756667, lon=-73.986389)
DEFAULT_RADIUS_M = 5000.0

# Override value that clears an optional bound (bucket_cap, window_h)
UNBOUNDED = object()


class RelevanceWeights(BaseModel):
    """Severity weight of the cluster holding a thread's posts."""
    extreme_high: float = Field(default=3.0, ge=0)
    unexpected: float = Field(default=3.0, ge=0)
    mild_high: float = Field(default=2.0, ge=0)
    normal: float = Field(default=1.0, ge=0)
    low: float = Field(default=1.0, ge=0)
    unclustered: float = Field(default=0.0, ge=0)


class LshGeometry(BaseModel):
    dimension_bits: int = Field(default=18, ge=4, le=30)
    bands: int = Field(default=8, ge=1)
    rows: int = Field(default=12, ge=1, le=62)
    bucket_cap: Optional[int] = Field(default=64, ge=1)
    window_h: Optional[float] = Field(default=24.0, gt=0)


class RunConfig(BaseModel):
    timezone: str = "America/New_York"
    geofence: Geofence = Geofence(center=DEFAULT_CENTER, radius_m=DEFAULT_RADIUS_M)
    eps_m: Optional[float] = Field(default=None, gt=0)
    min_points: Optional[int] = Field(default=None, ge=2)
    k: int = Field(default=4, ge=2)
    match_eps_m: Optional[float] = Field(default=None, gt=0)
    threshold: float = Field(default=0.65, gt=0, lt=1)
    lsh: LshGeometry = LshGeometry()
    seed: Optional[int] = Field(default=None, ge=0)
    jobs: int = Field(default=1, ge=1)
    weights: RelevanceWeights = RelevanceWeights()
    site_link_m: float = Field(default=300.0, gt=0)
    top_k: int = Field(default=10, ge=0)

    @field_validator("timezone")
    @classmethod
    def _known_timezone(cls, name: str) -> str:
        from .ingest import resolve_timezone

        resolve_timezone(name)
        return name

    def dbscan_override(self) -> Optional[DbscanParams]:
        """Fixed DBSCAN parameters when both eps and min_points are configured."""
        if self.eps_m is None or self.min_points is None:
            return None
        return DbscanParams(eps=self.eps_m, min_points=self.min_points)

    def effective_seed(self) -> int:
        return self.seed if self.seed is not None else 0


def seed_from_env() -> Optional[int]:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from e


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Resolve a RunConfig: defaults < config file < overrides; seed falls back to GEOPULSE_SEED.

    Args:
        path: Optional JSON config file
        overrides: Flag values; None entries are ignored

    Returns:
        The validated RunConfig
    """
    data: Dict[str, Any] = RunConfig().model_dump(mode="json")
    if path is not None:
        try:
            from_file = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(from_file, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(data, from_file)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        _set_dotted(data, dotted, None if value is UNBOUNDED else value)

    if data.get("seed") is None:
        env_seed = seed_from_env()
        if env_seed is not None:
            data["seed"] = env_seed

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {err['msg']}") from e
    logger.debug("Resolved run config: %s", config.model_dump_json())
    return config


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> None:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def write_config_echo(config: RunConfig, output_dir: Path) -> Path:
    """Write the resolved configuration next to the command outputs."""
    output_dir.mkdir(parents=True, exist_ok=True)
    target = output_dir / "run-config.json"
    target.write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return target
