"""
Decoder-only transformer T: Sigma* -> Dist(Sigma).

x_j = e(alpha_j, j), then layers L_1..L_k, then T(w) = P(y_n).
"""
from copy import deepcopy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import torch
from torch import nn

from app.core.attention import (
    AttentionLayer,
    DotProductExp,
    DotProductExpRotary,
    LinearValue,
    PassThrough,
    Residual,
    ResidualMLP,
    SSMaxScaled,
)
from app.core.encodings import TableEmbedding, make_encoding
from app.core.exceptions import AlphabetError, ModelConfigError
from app.core.numeric import DTYPE, Dist, RngStream, argmax_with_margin
from app.core.sequences import Alphabet

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Readouts
# ---------------------------------------------------------------------------

class Readout(nn.Module):
    """P: R^d -> Dist(Sigma), contínua"""

    kind: str = ""

    def probs(self, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def log_probs(self, y: torch.Tensor) -> torch.Tensor:
        return torch.log(self.probs(y))

    def config(self) -> Dict:
        raise NotImplementedError


class AffineSoftmax(Readout):
    kind = "affine-softmax"

    def __init__(self, dim: int, size: int):
        super().__init__()
        self.dim = dim
        self.size = size
        self.weight = nn.Parameter(torch.zeros(size, dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(size, dtype=DTYPE))

    def logits(self, y):
        return y @ self.weight.T + self.bias

    def probs(self, y):
        return torch.softmax(self.logits(y), dim=-1)

    def log_probs(self, y):
        return torch.log_softmax(self.logits(y), dim=-1)

    def config(self) -> Dict:
        return {"kind": self.kind, "dim": self.dim, "size": self.size}


class AffineLookup(Readout):
    """relu(W y + b) normalizado; vetor nulo cai na distribuição uniforme"""

    kind = "affine-lookup"

    def __init__(self, dim: int, size: int):
        super().__init__()
        self.dim = dim
        self.size = size
        self.weight = nn.Parameter(torch.zeros(size, dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(size, dtype=DTYPE))

    def probs(self, y):
        mass = torch.relu(y @ self.weight.T + self.bias)
        total = mass.sum(dim=-1, keepdim=True)
        uniform = torch.full_like(mass, 1.0 / self.size)
        return torch.where(total > 0, mass / total.clamp_min(1e-300), uniform)

    def config(self) -> Dict:
        return {"kind": self.kind, "dim": self.dim, "size": self.size}


class ConstantReadout(Readout):
    kind = "constant"

    def __init__(self, probs: Sequence[float]):
        super().__init__()
        fixed = Dist(probs)
        self.register_buffer("fixed", torch.as_tensor(np.array(fixed.probs), dtype=DTYPE))

    def probs(self, y):
        return self.fixed.expand(*y.shape[:-1], self.fixed.shape[0])

    def config(self) -> Dict:
        return {"kind": self.kind, "probs": self.fixed.tolist()}


class FamilySelect(Readout):
    """
    pi = softmax(-beta * rates); mix = sum_t pi_t next_t; P = softmax(kappa * mix)

    `next_starts[t]` is the first coordinate of candidate t's fetched next-token
    one-hot, `rate_indices[t]` its mismatch-rate coordinate.
    """

    kind = "family-select"

    def __init__(self, size: int, next_starts: Sequence[int], rate_indices: Sequence[int],
                 sharpness: float, kappa: float):
        super().__init__()
        if len(next_starts) != len(rate_indices) or not next_starts:
            raise ModelConfigError("Family readout needs one next block and one rate per candidate")
        self.size = size
        self.next_starts = [int(s) for s in next_starts]
        self.rate_indices = [int(r) for r in rate_indices]
        self.sharpness = float(sharpness)
        self.kappa = float(kappa)

    def _mix(self, y):
        rates = y[..., self.rate_indices]
        pi = torch.softmax(-self.sharpness * rates, dim=-1)
        nexts = torch.stack([y[..., s:s + self.size] for s in self.next_starts], dim=-2)
        return (pi[..., None] * nexts).sum(dim=-2)

    def probs(self, y):
        return torch.softmax(self.kappa * self._mix(y), dim=-1)

    def log_probs(self, y):
        return torch.log_softmax(self.kappa * self._mix(y), dim=-1)

    def config(self) -> Dict:
        return {
            "kind": self.kind,
            "size": self.size,
            "next_starts": self.next_starts,
            "rate_indices": self.rate_indices,
            "sharpness": self.sharpness,
            "kappa": self.kappa,
        }


def build_readout(config: Dict) -> Readout:
    kind = config.get("kind")
    if kind == AffineSoftmax.kind:
        return AffineSoftmax(config["dim"], config["size"])
    if kind == AffineLookup.kind:
        return AffineLookup(config["dim"], config["size"])
    if kind == ConstantReadout.kind:
        return ConstantReadout(config["probs"])
    if kind == FamilySelect.kind:
        return FamilySelect(
            config["size"], config["next_starts"], config["rate_indices"], config["sharpness"], config["kappa"]
        )
    raise ModelConfigError(f"Unknown readout kind {kind!r}")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class DecodeState:
    """
    Cache de decodificação de uma sessão

    outputs[0] são os embeddings, outputs[l] a saída da camada l; cada um (n, d).
    Somas de pesos não são cacheadas: dependem da posição da query.
    """

    tokens: List[int]
    outputs: List[torch.Tensor]
    probs: np.ndarray

    @property
    def length(self) -> int:
        return len(self.tokens)

    def dist(self) -> Dist:
        return Dist(self.probs)


class TransformerModel(nn.Module):
    """
    k-layer decoder-only transformer over a finite alphabet

    Immutable after construction; `DecodeState` carries per-session state.
    """

    def __init__(self, alphabet: Alphabet, embedding: TableEmbedding, layers: Sequence[AttentionLayer],
                 readout: Readout):
        super().__init__()
        if embedding.alphabet_size != alphabet.size:
            raise ModelConfigError(
                f"Embedding has {embedding.alphabet_size} token rows for an alphabet of {alphabet.size}"
            )
        for index, layer in enumerate(layers):
            if layer.dim != embedding.dim:
                raise ModelConfigError(f"Layer {index} has dimension {layer.dim}, model has {embedding.dim}")
        self.alphabet = alphabet
        self.embedding = embedding
        self.layers = nn.ModuleList(layers)
        self.readout = readout

    @property
    def dim(self) -> int:
        return self.embedding.dim

    @property
    def length_aware(self) -> bool:
        return any(layer.length_aware for layer in self.layers)

    def token_ids(self, prompts: Union[str, Sequence[str]]) -> torch.Tensor:
        """
        Converte prompts de mesmo comprimento em índices (B, n)

        Raises:
            AlphabetError: token fora do alfabeto
            ModelConfigError: prompts vazios ou de comprimentos diferentes
        """
        if isinstance(prompts, str):
            prompts = [prompts]
        lengths = {len(p) for p in prompts}
        if not prompts or lengths == {0}:
            raise ModelConfigError("Prompts must be nonempty")
        if len(lengths) != 1:
            raise ModelConfigError("Prompts in one batch must share a length")
        return torch.tensor([self.alphabet.encode(p) for p in prompts], dtype=torch.long)

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.embedding(token_ids, torch.arange(1, token_ids.shape[1] + 1))

    def hidden_states(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = self.embed(token_ids)
        for layer in self.layers:
            x = layer(x)
        return x

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """log P em todas as posições, shape (B, n, |Sigma|)"""
        return self.readout.log_probs(self.hidden_states(token_ids))

    def last_probs(self, token_ids: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.readout.probs(self.hidden_states(token_ids)[:, -1]).numpy()

    def distribution(self, prompt: str) -> Dist:
        return Dist(self.last_probs(self.token_ids(prompt))[0])

    def clamp_hits(self, token_ids: torch.Tensor) -> int:
        hits = 0
        with torch.no_grad():
            x = self.embed(token_ids)
            for layer in self.layers:
                hits += layer.clamp_hits(x)
                x = layer(x)
        return hits

    # -- incremental decoding --------------------------------------------

    def start_decode(self, prompt: str) -> DecodeState:
        ids = self.token_ids(prompt)
        with torch.no_grad():
            outputs = [self.embed(ids)[0]]
            for layer in self.layers:
                outputs.append(layer(outputs[-1][None])[0])
            probs = self.readout.probs(outputs[-1][-1]).numpy()
        return DecodeState(ids[0].tolist(), outputs, probs)

    def advance(self, state: DecodeState, token: str) -> DecodeState:
        """Anexa um token e recalcula apenas a última posição de cada camada"""
        token_id = self.alphabet.index(token)
        n = state.length + 1
        with torch.no_grad():
            x = self.embedding(torch.tensor([[token_id]]), torch.tensor([n]))[0]
            state.outputs[0] = torch.cat([state.outputs[0], x], dim=0)
            for index, layer in enumerate(self.layers):
                y = layer.forward_last(state.outputs[index][None])[0]
                state.outputs[index + 1] = torch.cat([state.outputs[index + 1], y], dim=0)
            state.probs = self.readout.probs(state.outputs[-1][-1]).numpy()
        state.tokens.append(token_id)
        return state

    def config(self) -> Dict:
        return {
            "alphabet": list(self.alphabet.tokens),
            "dim": self.dim,
            "embedding": self.embedding.config(),
            "layers": [layer.config() for layer in self.layers],
            "readout": self.readout.config(),
        }


def transformer_forward(model: TransformerModel, tokens: str) -> Dist:
    """T(alpha_1..alpha_n) = P(y_n)"""
    return model.distribution(tokens)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Sampled:
    temperature: float
    rng: RngStream

    def __post_init__(self):
        if self.temperature <= 0:
            raise ModelConfigError(f"Temperature must be positive, got {self.temperature}")


DecodeMode = Union[Greedy, Sampled]


def _choose(probs: np.ndarray, mode: DecodeMode, step: int) -> int:
    if isinstance(mode, Sampled):
        logits = np.log(np.clip(probs, 1e-300, None)) / mode.temperature
        weights = np.exp(logits - logits.max())
        cdf = np.cumsum(weights / weights.sum())
        draw = mode.rng.fork(step).generator().random()
        return int(min(np.searchsorted(cdf, draw, side="right"), len(probs) - 1))
    return argmax_with_margin(probs)[0]


def decode_with_trace(model: TransformerModel, prompt: str, steps: int,
                      mode: Optional[DecodeMode] = None) -> Tuple[str, List[Dist]]:
    """
    Decodifica `steps` tokens; dists[k] é a distribuição usada para o token k
    """
    if steps < 0:
        raise ModelConfigError(f"steps must be >= 0, got {steps}")
    mode = mode or Greedy()
    state = model.start_decode(prompt)
    generated: List[str] = []
    dists: List[Dist] = []
    for step in range(steps):
        dists.append(state.dist())
        token = model.alphabet.tokens[_choose(state.probs, mode, step)]
        generated.append(token)
        if step < steps - 1:
            model.advance(state, token)
    return "".join(generated), dists


def decode_autoregressive(model: TransformerModel, prompt: str, steps: int,
                          mode: Optional[DecodeMode] = None) -> str:
    return decode_with_trace(model, prompt, steps, mode)[0]


# ---------------------------------------------------------------------------
# Compactness
# ---------------------------------------------------------------------------

@dataclass
class CompactnessReport:
    horizon: int
    embedding_norm: float
    embedding_bound: float
    encoding_norms: List[float] = field(default_factory=list)
    encoding_bounds: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        if self.embedding_norm > self.embedding_bound:
            return False
        return all(norm <= bound for norm, bound in zip(self.encoding_norms, self.encoding_bounds))

    def to_dict(self) -> Dict:
        return {
            "horizon": self.horizon,
            "embedding_norm": self.embedding_norm,
            "embedding_bound": self.embedding_bound,
            "encoding_norms": self.encoding_norms,
            "encoding_bounds": self.encoding_bounds,
            "passed": self.passed,
        }


def check_compactness(model: TransformerModel, horizon: int) -> CompactnessReport:
    """
    Varre i <= j <= horizon e compara normas com os limites declarados

    Encodings relativos e tabelas têm finitos valores; a varredura é exata.
    """
    if horizon < 1:
        raise ModelConfigError(f"Horizon must be >= 1, got {horizon}")
    report = CompactnessReport(
        horizon=horizon,
        embedding_norm=model.embedding.max_norm(horizon),
        embedding_bound=model.embedding.declared_bound,
    )
    for layer in model.layers:
        report.encoding_norms.append(layer.pe.max_norm(horizon))
        report.encoding_bounds.append(layer.pe.declared_bound)
    logger.info(f"Compactness up to {horizon}: {'pass' if report.passed else 'fail'}")
    return report


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

NO_INIT_SUFFIXES = ("ln_gain", "ln_bias")


def build_standard_model(
    alphabet: Alphabet,
    dim: int,
    layers: int,
    pe_kind: str = "rotary-relative",
    weight_kind: Optional[str] = None,
    activation: str = "residual-mlp",
    hidden: Optional[int] = None,
    layer_norm: bool = True,
) -> TransformerModel:
    """
    Instância padrão com parâmetros zerados: atenção dot-product, PE compacto,
    MLP residual e readout afim + softmax
    """
    if dim < 1 or layers < 0:
        raise ModelConfigError(f"Invalid model shape d={dim}, k={layers}")
    if weight_kind is None:
        weight_kind = "dot-product-exp-rotary" if pe_kind == "rotary-relative" else "dot-product-exp"
    stack = []
    for _ in range(layers):
        pe = make_encoding(pe_kind, dim)
        if weight_kind == "dot-product-exp-rotary":
            weight = DotProductExpRotary(dim, dim)
        elif weight_kind == "dot-product-exp":
            weight = DotProductExp(dim, dim, pe.dim)
        else:
            raise ModelConfigError(f"Weight kind {weight_kind!r} is not trainable here")
        if activation == "residual-mlp":
            act = ResidualMLP(dim, hidden, layer_norm)
        elif activation == "residual":
            act = Residual()
        elif activation == "pass-through":
            act = PassThrough()
        else:
            raise ModelConfigError(f"Unknown activation {activation!r}")
        stack.append(AttentionLayer(pe, weight, LinearValue(dim), act))
    embedding = TableEmbedding.empty(alphabet.size, dim)
    return TransformerModel(alphabet, embedding, stack, AffineSoftmax(dim, alphabet.size))


def initialize_parameters(model: nn.Module, rng: RngStream, scale: Optional[float] = None) -> nn.Module:
    """Uniforme simétrica em +-1/sqrt(d), semeada por parâmetro; ganhos de norma ficam em 1/0"""
    scale = scale if scale is not None else 1.0 / np.sqrt(getattr(model, "dim", 1))
    with torch.no_grad():
        for index, (name, param) in enumerate(model.named_parameters()):
            if name.endswith(NO_INIT_SUFFIXES):
                continue
            draws = rng.fork(index).generator().uniform(-scale, scale, size=tuple(param.shape))
            param.copy_(torch.from_numpy(np.asarray(draws, dtype=np.float64)))
    return model


def build_random_model(
    alphabet: Alphabet,
    dim: int,
    layers: int,
    rng: RngStream,
    pe_kind: str = "rotary-relative",
    weight_kind: Optional[str] = None,
    activation: str = "residual-mlp",
) -> TransformerModel:
    model = build_standard_model(alphabet, dim, layers, pe_kind, weight_kind, activation)
    initialize_parameters(model, rng)
    return model


def with_ssmax(model: TransformerModel, s: float = 1.0) -> TransformerModel:
    """Cópia do modelo com cada função de peso envolvida em ssmax (mesmos parâmetros)"""
    twin = deepcopy(model)
    for layer in twin.layers:
        if isinstance(layer.weight, SSMaxScaled):
            raise ModelConfigError("Model already uses ssmax scaling")
        layer.weight = SSMaxScaled(layer.weight, s)
    return twin


def strip_ssmax(model: TransformerModel) -> TransformerModel:
    """Cópia com as funções de peso ssmax substituídas pelas internas"""
    twin = deepcopy(model)
    for layer in twin.layers:
        if isinstance(layer.weight, SSMaxScaled):
            layer.weight = layer.weight.inner
    return twin
