import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings

from errors import ConfigurationError
from models import RunConfig

load_dotenv()

SEED_STREAMS = ("source", "target", "augment", "model", "select", "vendor", "client", "metrics")


class Settings(BaseSettings):
    runs_dir: str = os.getenv("CSFT_RUNS_DIR", "runs")
    log_level: str = os.getenv("CSFT_LOG_LEVEL", "INFO")
    workers: int = int(os.getenv("CSFT_WORKERS", "1"))
    port: int = int(os.getenv("CSFT_PORT", "8000"))
    host: str = os.getenv("CSFT_HOST", "0.0.0.0")

    class Config:
        env_file = ".env"
        env_prefix = "CSFT_"
        extra = "ignore"


settings = Settings()


def stream_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed for one named random stream of a run."""
    if stream not in SEED_STREAMS:
        raise ConfigurationError(f"unknown seed stream {stream!r}")
    return int(np.random.SeedSequence([seed, SEED_STREAMS.index(stream)]).generate_state(1)[0])


def resolve_run_config(config: RunConfig, seed: Optional[int] = None) -> RunConfig:
    """Applies a seed override and derives the per-section seeds from the master seed."""
    seed = config.seed if seed is None else seed
    return config.model_copy(
        update={
            "seed": seed,
            "source": config.source.model_copy(update={"seed": stream_seed(seed, "source")}),
            "target": config.target.model_copy(update={"seed": stream_seed(seed, "target")}),
            "augment": config.augment.model_copy(update={"seed": stream_seed(seed, "augment")}),
        }
    )


def _nest(flat: Dict[str, Optional[str]]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    sections = set(RunConfig.model_fields)
    for key, value in flat.items():
        if value is None:
            raise ConfigurationError(f"config key {key} has no value")
        parts = key.lower().split("__")
        if parts[0] not in sections or len(parts) > 2:
            raise ConfigurationError(f"unknown config key {key}")
        if len(parts) == 1:
            nested[parts[0]] = value
        else:
            nested.setdefault(parts[0], {})[parts[1]] = value
    return nested


def parse_run_config(flat: Dict[str, Optional[str]]) -> RunConfig:
    try:
        return RunConfig(**_nest(flat))
    except ValidationError as e:
        first = e.errors()[0]
        where = "__".join(str(part) for part in first["loc"]).upper()
        raise ConfigurationError(f"invalid config {where}: {first['msg']}") from e


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Reads a `SECTION__FIELD=value` file; a missing path means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_run_config(dotenv_values(path))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def run_config_lines(config: RunConfig) -> list:
    lines = []
    for name, value in config:
        if isinstance(value, BaseModel):
            for field, inner in value:
                lines.append(f"{name.upper()}__{field.upper()}={_format_value(inner)}")
        else:
            lines.append(f"{name.upper()}={_format_value(value)}")
    return lines


def write_run_config(path: Union[str, Path], config: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(run_config_lines(config)) + "\n")
