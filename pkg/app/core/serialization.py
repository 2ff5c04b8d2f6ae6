"""
JSON codec for TransformerModel.

Component configs are plain JSON; parameter arrays are base64 of
little-endian float64 so a round trip is value-exact.
"""
from pathlib import Path
from typing import Dict, Union
import base64
import json
import logging

import numpy as np
import torch

from app.core.attention import build_layer
from app.core.encodings import build_embedding
from app.core.exceptions import ConfigError, ModelConfigError
from app.core.numeric import DTYPE
from app.core.sequences import Alphabet
from app.core.transformer import TransformerModel, build_readout

logger = logging.getLogger(__name__)

FORMAT_NAME = "cpe-lab-model"
FORMAT_VERSION = 1


def encode_array(tensor: torch.Tensor) -> Dict:
    array = tensor.detach().cpu().numpy().astype("<f8")
    return {
        "dtype": "float64",
        "shape": list(array.shape),
        "data": base64.b64encode(array.tobytes()).decode("ascii"),
    }


def decode_array(payload: Dict) -> torch.Tensor:
    if payload.get("dtype") != "float64":
        raise ModelConfigError(f"Unsupported array dtype {payload.get('dtype')!r}")
    raw = base64.b64decode(payload["data"])
    array = np.frombuffer(raw, dtype="<f8").reshape(payload["shape"])
    return torch.tensor(array.astype(np.float64), dtype=DTYPE)


def model_to_dict(model: TransformerModel) -> Dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config(),
        "parameters": {name: encode_array(t) for name, t in model.state_dict().items()},
    }


def build_model(config: Dict) -> TransformerModel:
    """Monta a arquitetura (parâmetros zerados) a partir de `model.config()`"""
    try:
        return TransformerModel(
            Alphabet(tuple(config["alphabet"])),
            build_embedding(config["embedding"]),
            [build_layer(layer) for layer in config["layers"]],
            build_readout(config["readout"]),
        )
    except KeyError as e:
        raise ModelConfigError(f"Model config is missing field {e}")


def model_from_dict(document: Dict) -> TransformerModel:
    if document.get("format") != FORMAT_NAME:
        raise ModelConfigError(f"Not a model document (format={document.get('format')!r})")
    model = build_model(document["config"])
    state = {name: decode_array(payload) for name, payload in document["parameters"].items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ModelConfigError(f"Parameters do not match the model config: {e}")
    return model


def save_model(model: TransformerModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model), indent=2), encoding="utf-8")
    logger.info(f"Model saved to {path}")
    return path


def load_model(path: Union[str, Path]) -> TransformerModel:
    """
    Carrega um modelo salvo por `save_model`

    Raises:
        ConfigError: arquivo ilegível ou JSON inválido
        ModelConfigError: documento com arquitetura/parâmetros inconsistentes
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read model file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Model file {path} is not valid JSON: {e}")
    return model_from_dict(document)
