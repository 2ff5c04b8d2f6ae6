"""
Respostas determinísticas do servidor mock: prompt -> {token: logprob}.
"""
from typing import Dict, Optional
import math

CONFIDENT = -0.05
UNLIKELY = -3.0


def payload_of(prompt: str) -> str:
    """Sequência após a instrução (texto depois do último ':')"""
    return prompt.rsplit(":", 1)[-1].strip()


def _pair(chosen: str, other: str) -> Dict[str, float]:
    return {chosen: CONFIDENT, other: UNLIKELY}


class Responder:
    name = "base"

    def __call__(self, prompt: str) -> Dict[str, float]:
        raise NotImplementedError


class ConstantResponder(Responder):
    """Sempre os mesmos logprobs"""

    name = "constant"

    def __init__(self, logprobs: Optional[Dict[str, float]] = None):
        self.logprobs = dict(logprobs or {"0": -0.1, "1": -2.4})

    def __call__(self, prompt: str) -> Dict[str, float]:
        return dict(self.logprobs)


class FlipDetector(Responder):
    """Responde "1" se qualquer posição da sequência for "1", senão "0" """

    name = "flip-detector"

    def __call__(self, prompt: str) -> Dict[str, float]:
        return _pair("1", "0") if "1" in payload_of(prompt) else _pair("0", "1")


class PeriodicContinuation(Responder):
    """Copia o símbolo `period` posições atrás: continuação exata de período `period`"""

    name = "periodic"

    def __init__(self, period: int = 3):
        if period < 1:
            raise ValueError(f"period must be >= 1, got {period}")
        self.period = period

    def __call__(self, prompt: str) -> Dict[str, float]:
        payload = payload_of(prompt)
        if len(payload) < self.period:
            return _pair("0", "1")
        token = payload[-self.period]
        return _pair(token, "1" if token == "0" else "0")


class FixtureResponder(Responder):
    """Tabela fixa prompt -> logprobs, com fallback"""

    name = "fixture"

    def __init__(self, table: Dict[str, Dict[str, float]], default: Optional[Dict[str, float]] = None):
        self.table = {prompt: dict(entry) for prompt, entry in table.items()}
        self.default = dict(default or {"0": math.log(0.5), "1": math.log(0.5)})

    def __call__(self, prompt: str) -> Dict[str, float]:
        return dict(self.table.get(prompt, self.default))


RESPONDERS = {
    "constant": ConstantResponder,
    "flip-detector": FlipDetector,
    "periodic": PeriodicContinuation,
}


def build_responder(name: str, **kwargs) -> Responder:
    try:
        return RESPONDERS[name](**kwargs)
    except KeyError:
        raise ValueError(f"Unknown responder {name!r}; choose from {sorted(RESPONDERS)}")
