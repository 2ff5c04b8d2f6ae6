from pathlib import Path
from typing import Any, Dict, Union
import json
import logging

from pydantic import TypeAdapter, ValidationError

from app.core.exceptions import ConfigError
from app.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

_adapter = TypeAdapter(ExperimentConfig)


def describe_errors(error: ValidationError) -> str:
    """Uma linha por erro, com o caminho do campo"""
    return "; ".join(
        f"{'.'.join(str(part) for part in item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    )


def validate_config(data: Any) -> ExperimentConfig:
    """
    Valida um dict contra o schema do experimento indicado em `experiment`

    Raises:
        ConfigError: campo ausente, desconhecido ou inválido
    """
    if not isinstance(data, dict):
        raise ConfigError(f"Config must be a JSON object, got {type(data).__name__}")
    if "experiment" not in data:
        raise ConfigError("Missing required field 'experiment'")
    try:
        return _adapter.validate_python(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {describe_errors(e)}")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Lê e valida um config JSON

    Raises:
        ConfigError: arquivo ilegível, JSON inválido ou violação de schema
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}")
    config = validate_config(data)
    logger.debug(f"Loaded {config.experiment} config from {path}")
    return config


def merge_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Overrides não-None substituem campos; chaves com '.' descem em sub-objetos"""
    merged = json.loads(json.dumps(data))
    for key, value in overrides.items():
        if value is None:
            continue
        target = merged
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return merged


def effective_config(config: ExperimentConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")
