from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union
from math import exp

from app.config import get_settings
from app.core.exceptions import SequenceSpecError
from app.core.experiments import DEFAULT_GAMMAS, DEFAULT_REPS, DEFAULT_SHAPES
from app.core.sequences import parse_sequence_spec

settings = get_settings()

SpecField = Union[str, Dict[str, Any]]


def _check_spec(value: SpecField) -> SpecField:
    try:
        parse_sequence_spec(value)
    except SequenceSpecError as e:
        raise ValueError(str(e))
    return value


# ---------------------------------------------------------------------------
# Remote endpoint and wire schemas
# ---------------------------------------------------------------------------

class EndpointConfig(BaseModel):
    """Endpoint compatível com a API de completions"""

    model_config = ConfigDict(extra="forbid")

    base_url: str
    model: str
    auth_env: Optional[str] = "OPENAI_API_KEY"
    timeout: float = Field(default_factory=lambda: settings.REMOTE_TIMEOUT, gt=0)
    max_retries: int = Field(default_factory=lambda: settings.REMOTE_MAX_RETRIES, ge=0)
    top_k: int = Field(default_factory=lambda: settings.REMOTE_TOP_K, ge=2)
    max_in_flight: int = Field(default_factory=lambda: settings.REMOTE_MAX_IN_FLIGHT, ge=1)
    backoff: float = Field(default_factory=lambda: settings.REMOTE_BACKOFF_SECONDS, ge=0)
    api: Literal["completions", "chat"] = "completions"


class TokenLogprob(BaseModel):
    token: str
    logprob: float = Field(..., le=0.0)

    @property
    def prob(self) -> float:
        return exp(self.logprob)


class PromptPairRow(BaseModel):
    sigma: str
    p_alpha: float = Field(..., ge=0.0, le=1.0)
    p_beta: float = Field(..., ge=0.0, le=1.0)
    truncated: bool = False
    sensitive: bool = False


class CompletionRequest(BaseModel):
    model: str
    prompt: str
    max_tokens: int = 1
    temperature: float = 0.0
    logprobs: Optional[int] = None


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatCompletionRequest(BaseModel):
    model: str
    messages: List[ChatMessage]
    max_tokens: int = 1
    temperature: float = 0.0
    logprobs: bool = False
    top_logprobs: Optional[int] = None


class HealthResponse(BaseModel):
    status: str
    version: str
    responder: str
    uptime_seconds: float


class ErrorResponse(BaseModel):
    success: bool = False
    error: str
    error_code: str
    detail: Optional[str] = None


class RequestRecord(BaseModel):
    prompt_sha256: str
    latency_ms: float
    retries: int
    status: Optional[int] = None
    error: Optional[str] = None


# ---------------------------------------------------------------------------
# Models and training
# ---------------------------------------------------------------------------

class RandomModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Field(16, ge=1)
    k: int = Field(2, ge=0)
    pe_kind: Literal["sinusoidal", "rotary-relative", "table-bounded", "constant-zero"] = "rotary-relative"
    weight_kind: Optional[Literal["dot-product-exp", "dot-product-exp-rotary"]] = None
    seed: int = 0


class ModelSource(BaseModel):
    """Exatamente uma origem: construct, file, remote ou random"""

    model_config = ConfigDict(extra="forbid")

    construct: Optional[Literal["single", "family"]] = None
    target: Optional[SpecField] = None
    eta: Optional[float] = Field(None, gt=0.0, lt=0.5)
    periods: Optional[List[int]] = None
    sharpness: Optional[float] = Field(None, gt=0.0)
    max_lag: Optional[int] = None
    file: Optional[str] = None
    remote: Optional[EndpointConfig] = None
    random: Optional[RandomModelConfig] = None
    ssmax: Optional[float] = Field(None, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def check_source(self):
        chosen = [name for name in ("construct", "file", "remote", "random") if getattr(self, name) is not None]
        if len(chosen) != 1:
            raise ValueError(f"exactly one of construct/file/remote/random is required, got {chosen or 'none'}")
        if self.construct == "single" and self.target is None:
            raise ValueError("single learner needs 'target'")
        if self.construct == "family" and not self.periods:
            raise ValueError("family learner needs 'periods'")
        if self.target is not None:
            _check_spec(self.target)
        return self


class MixtureEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spec: SpecField
    weight: float = Field(1.0, ge=0.0)

    @field_validator("spec")
    @classmethod
    def check_spec(cls, value: SpecField) -> SpecField:
        return _check_spec(value)


class TrainableConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Field(32, ge=1)
    k: int = Field(2, ge=0)
    pe_kind: Literal["sinusoidal", "rotary-relative", "table-bounded", "constant-zero"] = "rotary-relative"
    weight_kind: Optional[Literal["dot-product-exp", "dot-product-exp-rotary"]] = None
    hidden: Optional[int] = Field(None, ge=1)
    layer_norm: bool = True
    alphabet: List[str] = Field(default_factory=lambda: ["0", "1"])
    context: int = Field(128, ge=2)
    window_offset_max: int = Field(256, ge=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(3e-4, gt=0.0)
    schedule: Literal["constant", "cosine"] = "constant"
    warmup: int = Field(0, ge=0)
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)
    log_every: int = Field(100, ge=0)
    mixture: List[MixtureEntry] = Field(..., min_length=1)

    @field_validator("mixture")
    @classmethod
    def positive_total(cls, entries: List[MixtureEntry]) -> List[MixtureEntry]:
        if sum(entry.weight for entry in entries) <= 0:
            raise ValueError("mixture weights must have a positive sum")
        return entries


# ---------------------------------------------------------------------------
# Experiment configs
# ---------------------------------------------------------------------------

class _Experiment(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: Optional[int] = Field(None, ge=0, lt=2 ** 64)


class ConstructConfig(_Experiment):
    experiment: Literal["construct"]
    model: ModelSource
    horizon: int = Field(1000, ge=1)
    output: Optional[str] = None


class TrainConfig(TrainableConfig):
    experiment: Literal["train"]
    seed: Optional[int] = Field(None, ge=0)
    output: Optional[str] = None


class NTSConfig(_Experiment):
    experiment: Literal["nts"]
    model: ModelSource
    gammas: List[float] = Field(default_factory=lambda: list(DEFAULT_GAMMAS))
    samples: int = Field(100, ge=1)
    length: int = Field(190, ge=2)


class NTSPositionalConfig(_Experiment):
    experiment: Literal["nts-positional"]
    model: ModelSource
    shapes: List[Tuple[float, float]] = Field(default_factory=lambda: list(DEFAULT_SHAPES))
    gamma: float = Field(0.05, gt=0.0, le=0.5)
    samples: int = Field(100, ge=1)
    length: int = Field(190, ge=2)


class PeriodicConfig(_Experiment):
    experiment: Literal["periodic"]
    model: ModelSource
    periods: List[int] = Field(default_factory=lambda: list(range(2, 41)))
    reps: List[int] = Field(default_factory=lambda: list(DEFAULT_REPS))
    steps: int = Field(505, ge=0)


class CriticalPeriodConfig(_Experiment):
    experiment: Literal["critical-period"]
    model: ModelSource
    r: int = Field(10, ge=1)
    p_max: int = Field(40, ge=2)
    steps: int = Field(505, ge=0)
    stop_at_first: bool = False


class ModulusConfig(_Experiment):
    experiment: Literal["modulus"]
    model: ModelSource
    gammas: List[float] = Field(default_factory=lambda: [1 / 64, 1 / 16, 1 / 4])
    ns: List[int] = Field(default_factory=lambda: [64, 256, 1024])
    samples: int = Field(20, ge=1)
    base: SpecField = "constant0"

    @field_validator("base")
    @classmethod
    def check_base(cls, value: SpecField) -> SpecField:
        return _check_spec(value)


class CollapseConfig(_Experiment):
    experiment: Literal["collapse"]
    model: ModelSource
    spec: SpecField
    gammas: List[float] = Field(default_factory=lambda: [0.0] + list(DEFAULT_GAMMAS))
    samples: int = Field(100, ge=1)
    n: int = Field(190, ge=2)
    epsilon: float = Field(0.1, gt=0.0)
    n0: int = Field(1, ge=1)

    @field_validator("spec")
    @classmethod
    def check_spec(cls, value: SpecField) -> SpecField:
        return _check_spec(value)


class IsolationConfig(_Experiment):
    experiment: Literal["isolation"]
    model: ModelSource
    ks: List[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32])
    horizon: int = Field(256, ge=1)
    epsilon: float = Field(0.1, gt=0.0)
    n0: int = Field(1, ge=1)


class SSMaxCompareConfig(_Experiment):
    experiment: Literal["ssmax-compare"]
    model: ModelSource
    scaled: Optional[ModelSource] = None
    s: float = Field(1.0, gt=0.0, le=1.0)
    gammas: List[float] = Field(default_factory=lambda: list(DEFAULT_GAMMAS[1:]))
    samples: int = Field(100, ge=1)
    length: int = Field(190, ge=2)


class PairSensitivityConfig(_Experiment):
    experiment: Literal["pair-sensitivity"]
    model: ModelSource
    pairs: List[Tuple[str, str]] = Field(default_factory=list)
    pairs_file: Optional[str] = None

    @model_validator(mode="after")
    def needs_pairs(self):
        if self.model.remote is None:
            raise ValueError("pair sensitivity needs a remote model source")
        if not self.pairs and not self.pairs_file:
            raise ValueError("either 'pairs' or 'pairs_file' is required")
        return self


class VerifyConfig(_Experiment):
    experiment: Literal["verify"]
    model: ModelSource
    spec: SpecField
    spec_b: Optional[SpecField] = None
    eps: float = Field(..., gt=0.0)
    n0: int = Field(1, ge=1)
    N: int = Field(1000, ge=1)

    @field_validator("spec", "spec_b")
    @classmethod
    def check_specs(cls, value: Optional[SpecField]) -> Optional[SpecField]:
        return value if value is None else _check_spec(value)

    @model_validator(mode="after")
    def horizon_after_start(self):
        if self.N < self.n0:
            raise ValueError("N must be >= n0")
        return self


class ScatterConfig(_Experiment):
    experiment: Literal["scatter"]
    model: ModelSource
    counts: List[int] = Field(default_factory=lambda: [1, 2, 5, 10, 20, 30, 40, 49])
    samples: int = Field(10, ge=1)
    length: int = Field(100, ge=2)
    delta: float = Field(0.1, ge=0.0)


ExperimentConfig = Annotated[
    Union[
        ConstructConfig,
        TrainConfig,
        NTSConfig,
        NTSPositionalConfig,
        PeriodicConfig,
        CriticalPeriodConfig,
        ModulusConfig,
        CollapseConfig,
        IsolationConfig,
        SSMaxCompareConfig,
        PairSensitivityConfig,
        VerifyConfig,
        ScatterConfig,
    ],
    Field(discriminator="experiment"),
]


class RunManifest(BaseModel):
    command_line: List[str]
    experiment: str
    config_hash: str
    seed: int
    code_version: str
    started_at: str
    finished_at: str
    outputs: List[str] = Field(default_factory=list)
    tie_break: str = "lowest-index"
    requests: List[RequestRecord] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
