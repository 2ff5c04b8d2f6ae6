"""
Decoder-only attention layer:

    w_ij = w(x_i, x_j, p(i, j)),  v_i = val(x_i)
    a_j  = sum_{i<=j} w_ij v_i / sum_{i<=j} w_ij
    y_j  = F(a_j, x_j)

Weights are exp(score) with the score clamped to +-SCORE_CLAMP, so the
codomain stays (0, inf) in finite arithmetic.
"""
from math import sqrt
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import torch
from torch import nn

from app.config import get_settings
from app.core.encodings import PositionalEncoding, RotaryRelative, build_encoding
from app.core.exceptions import DimensionMismatchError, ModelConfigError, NonFiniteError
from app.core.numeric import DTYPE

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Weight functions
# ---------------------------------------------------------------------------

class WeightFunction(nn.Module):
    """Produz scores; o peso é exp(clamp(score))"""

    kind: str = ""
    length_aware: bool = False

    def scores(self, keys: torch.Tensor, queries: torch.Tensor, key_pos: torch.Tensor,
               query_pos: torch.Tensor, pe: PositionalEncoding) -> torch.Tensor:
        raise NotImplementedError

    def weight(self, x_i, x_j, i: int, j: int, pe: PositionalEncoding) -> float:
        """w(x_i, x_j, p(i, j)) para um único par"""
        keys = torch.as_tensor(x_i, dtype=DTYPE).reshape(1, 1, -1)
        queries = torch.as_tensor(x_j, dtype=DTYPE).reshape(1, 1, -1)
        with torch.no_grad():
            raw = self.scores(keys, queries, torch.tensor([i]), torch.tensor([j]), pe)
            clamp = get_settings().SCORE_CLAMP
            return float(torch.exp(raw.clamp(-clamp, clamp))[0, 0, 0])

    def check_encoding(self, pe: PositionalEncoding) -> None:
        pass

    def config(self) -> Dict:
        raise NotImplementedError


class ConstantOne(WeightFunction):
    kind = "constant-one"

    def scores(self, keys, queries, key_pos, query_pos, pe):
        return torch.zeros(queries.shape[0], queries.shape[1], keys.shape[1], dtype=DTYPE)

    def config(self) -> Dict:
        return {"kind": self.kind}


class DotProductExp(WeightFunction):
    """score = <Q x_j, K x_i> / sqrt(k) + <u, p(i, j)>"""

    kind = "dot-product-exp"

    def __init__(self, dim: int, key_dim: int, pe_dim: int):
        super().__init__()
        self.dim = dim
        self.key_dim = key_dim
        self.pe_dim = pe_dim
        self.query = nn.Parameter(torch.zeros(key_dim, dim, dtype=DTYPE))
        self.key = nn.Parameter(torch.zeros(key_dim, dim, dtype=DTYPE))
        self.pos = nn.Parameter(torch.zeros(pe_dim, dtype=DTYPE))

    def check_encoding(self, pe: PositionalEncoding) -> None:
        if pe.dim != self.pe_dim:
            raise ModelConfigError(f"Weight expects a {self.pe_dim}-dim encoding, got {pe.dim}")

    def scores(self, keys, queries, key_pos, query_pos, pe):
        q = queries @ self.query.T
        k = keys @ self.key.T
        content = torch.einsum("bnk,bmk->bnm", q, k) / sqrt(self.key_dim)
        return content + pe.bias(self.pos, key_pos, query_pos)[None]

    def config(self) -> Dict:
        return {"kind": self.kind, "dim": self.dim, "key_dim": self.key_dim, "pe_dim": self.pe_dim}


class DotProductExpRotary(WeightFunction):
    """
    Rotary score: for each frequency t with offset angle c = cos, s = sin,
    score += c (q_e k_e + q_o k_o) + s (q_e k_o - q_o k_e), divided by sqrt(k).
    """

    kind = "dot-product-exp-rotary"

    def __init__(self, dim: int, key_dim: int):
        super().__init__()
        if key_dim % 2:
            raise ModelConfigError(f"Rotary key dimension must be even, got {key_dim}")
        self.dim = dim
        self.key_dim = key_dim
        self.query = nn.Parameter(torch.zeros(key_dim, dim, dtype=DTYPE))
        self.key = nn.Parameter(torch.zeros(key_dim, dim, dtype=DTYPE))

    def check_encoding(self, pe: PositionalEncoding) -> None:
        if not isinstance(pe, RotaryRelative) or pe.frequencies != self.key_dim // 2:
            raise ModelConfigError(
                f"Rotary weights need a rotary-relative encoding with {self.key_dim // 2} frequencies"
            )

    def scores(self, keys, queries, key_pos, query_pos, pe):
        q = queries @ self.query.T
        k = keys @ self.key.T
        q_even, q_odd = q[..., 0::2], q[..., 1::2]
        k_even, k_odd = k[..., 0::2], k[..., 1::2]
        offsets = pe.offsets(key_pos, query_pos)
        total = torch.zeros(q.shape[0], q.shape[1], k.shape[1], dtype=DTYPE)
        for t in range(self.key_dim // 2):
            aligned = q_even[..., t, None] * k_even[:, None, :, t] + q_odd[..., t, None] * k_odd[:, None, :, t]
            crossed = q_even[..., t, None] * k_odd[:, None, :, t] - q_odd[..., t, None] * k_even[:, None, :, t]
            total = total + pe.cos_table[:, t][offsets] * aligned + pe.sin_table[:, t][offsets] * crossed
        return total / sqrt(self.key_dim)

    def config(self) -> Dict:
        return {"kind": self.kind, "dim": self.dim, "key_dim": self.key_dim}


class SSMaxScaled(WeightFunction):
    """
    Scores of an inner weight multiplied by s * log(j), j = query position.

    Length-aware: outside the compact model, kept as the sensitivity baseline.
    """

    kind = "ssmax-scaled"
    length_aware = True

    def __init__(self, inner: WeightFunction, s: float = 1.0):
        super().__init__()
        if s <= 0:
            raise ModelConfigError(f"ssmax scale must be positive, got {s}")
        if isinstance(inner, SSMaxScaled):
            raise ModelConfigError("ssmax scaling cannot be nested")
        self.inner = inner
        self.s = float(s)

    def check_encoding(self, pe: PositionalEncoding) -> None:
        self.inner.check_encoding(pe)

    def scores(self, keys, queries, key_pos, query_pos, pe):
        scale = self.s * torch.log(query_pos.to(DTYPE))
        return self.inner.scores(keys, queries, key_pos, query_pos, pe) * scale[None, :, None]

    def config(self) -> Dict:
        return {"kind": self.kind, "s": self.s, "inner": self.inner.config()}


def build_weight(config: Dict) -> WeightFunction:
    kind = config.get("kind")
    if kind == ConstantOne.kind:
        return ConstantOne()
    if kind == DotProductExp.kind:
        return DotProductExp(config["dim"], config["key_dim"], config["pe_dim"])
    if kind == DotProductExpRotary.kind:
        return DotProductExpRotary(config["dim"], config["key_dim"])
    if kind == SSMaxScaled.kind:
        return SSMaxScaled(build_weight(config["inner"]), config.get("s", 1.0))
    raise ModelConfigError(f"Unknown weight function kind {kind!r}")


# ---------------------------------------------------------------------------
# Value and activation functions
# ---------------------------------------------------------------------------

class LinearValue(nn.Module):
    """val(x) = V x + b"""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.zeros(dim, dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    @classmethod
    def identity(cls, dim: int) -> "LinearValue":
        value = cls(dim)
        with torch.no_grad():
            value.weight.copy_(torch.eye(dim, dtype=DTYPE))
        return value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight.T + self.bias

    def config(self) -> Dict:
        return {"kind": "linear", "dim": self.dim}


class Activation(nn.Module):
    kind: str = ""

    def config(self) -> Dict:
        return {"kind": self.kind}


class PassThrough(Activation):
    kind = "pass-through"

    def forward(self, a, x):
        return a


class Residual(Activation):
    kind = "residual"

    def forward(self, a, x):
        return a + x


class ResidualMLP(Activation):
    """
    h = a + x; y = h + W2 tanh(W1 norm(h) + b1) + b2

    norm is a layer normalization with eps added to the variance (continuous).
    """

    kind = "residual-mlp"

    def __init__(self, dim: int, hidden: Optional[int] = None, layer_norm: bool = True, eps: Optional[float] = None):
        super().__init__()
        self.dim = dim
        self.hidden = hidden or 4 * dim
        self.layer_norm = layer_norm
        self.eps = float(eps if eps is not None else get_settings().LAYER_NORM_EPS)
        self.ln_gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.ln_bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.w1 = nn.Parameter(torch.zeros(self.hidden, dim, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(self.hidden, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.zeros(dim, self.hidden, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, a, x):
        h = a + x
        z = h
        if self.layer_norm:
            mean = h.mean(dim=-1, keepdim=True)
            var = ((h - mean) ** 2).mean(dim=-1, keepdim=True)
            z = (h - mean) / torch.sqrt(var + self.eps) * self.ln_gain + self.ln_bias
        return h + torch.tanh(z @ self.w1.T + self.b1) @ self.w2.T + self.b2

    def config(self) -> Dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "hidden": self.hidden,
            "layer_norm": self.layer_norm,
            "eps": self.eps,
        }


class LagCompare(Activation):
    """
    y = a + x, plus for each entry: y[out] += valid(x) * (1 - <token(x), back(x)>)

    `valid` is the sum of the listed coordinates (a one-hot position block).
    """

    kind = "lag-compare"

    def __init__(self, token_start: int, token_size: int, entries: Sequence[Tuple[int, Sequence[int], int]]):
        super().__init__()
        self.token_start = token_start
        self.token_size = token_size
        self.entries = [(int(b), [int(v) for v in valid], int(o)) for b, valid, o in entries]

    def forward(self, a, x):
        token = x[..., self.token_start:self.token_start + self.token_size]
        terms = []
        for back_start, valid, _ in self.entries:
            back = x[..., back_start:back_start + self.token_size]
            gate = x[..., valid].sum(dim=-1)
            terms.append(gate * (1.0 - (token * back).sum(dim=-1)))
        delta = torch.zeros_like(x)
        if terms:
            delta[..., [o for _, _, o in self.entries]] = torch.stack(terms, dim=-1)
        return a + x + delta

    def config(self) -> Dict:
        return {
            "kind": self.kind,
            "token_start": self.token_start,
            "token_size": self.token_size,
            "entries": [[b, v, o] for b, v, o in self.entries],
        }


def build_activation(config: Dict) -> Activation:
    kind = config.get("kind")
    if kind == PassThrough.kind:
        return PassThrough()
    if kind == Residual.kind:
        return Residual()
    if kind == ResidualMLP.kind:
        return ResidualMLP(config["dim"], config.get("hidden"), config.get("layer_norm", True), config.get("eps"))
    if kind == LagCompare.kind:
        return LagCompare(config["token_start"], config["token_size"], config["entries"])
    raise ModelConfigError(f"Unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# Layer
# ---------------------------------------------------------------------------

class AttentionLayer(nn.Module):
    """Camada de atenção decoder-only de dimensão d"""

    def __init__(self, pe: PositionalEncoding, weight: WeightFunction, value: LinearValue, activation: Activation):
        super().__init__()
        weight.check_encoding(pe)
        self.pe = pe
        self.weight = weight
        self.value = value
        self.activation = activation
        self.dim = value.dim

    @property
    def length_aware(self) -> bool:
        return self.weight.length_aware

    def _check(self, xs: torch.Tensor) -> None:
        if xs.dim() != 3 or xs.shape[1] < 1:
            raise DimensionMismatchError("Layer input must be a nonempty (batch, n, d) tensor")
        if xs.shape[-1] != self.dim:
            raise DimensionMismatchError(f"Layer expects dimension {self.dim}, got {xs.shape[-1]}")

    def _raw_scores(self, keys, queries, key_pos, query_pos):
        return self.weight.scores(keys, queries, key_pos, query_pos, self.pe)

    def _attend(self, keys: torch.Tensor, queries: torch.Tensor, key_pos: torch.Tensor,
                query_pos: torch.Tensor) -> torch.Tensor:
        clamp = get_settings().SCORE_CLAMP
        raw = self._raw_scores(keys, queries, key_pos, query_pos)
        causal = key_pos[None, :] <= query_pos[:, None]
        w = torch.exp(raw.clamp(-clamp, clamp)).masked_fill(~causal[None], 0.0)
        a = (w @ self.value(keys)) / w.sum(dim=-1, keepdim=True)
        y = self.activation(a, queries)
        if not torch.isfinite(y).all():
            raise NonFiniteError("Non-finite value in attention layer output")
        return y

    def forward(self, xs: torch.Tensor) -> torch.Tensor:
        self._check(xs)
        positions = torch.arange(1, xs.shape[1] + 1)
        return self._attend(xs, xs, positions, positions)

    def forward_last(self, xs: torch.Tensor) -> torch.Tensor:
        """Saída apenas na última posição (decodificação incremental)"""
        self._check(xs)
        n = xs.shape[1]
        return self._attend(xs, xs[:, -1:], torch.arange(1, n + 1), torch.tensor([n]))

    def clamp_hits(self, xs: torch.Tensor) -> int:
        """Número de scores causais fora de [-clamp, clamp]"""
        self._check(xs)
        clamp = get_settings().SCORE_CLAMP
        positions = torch.arange(1, xs.shape[1] + 1)
        with torch.no_grad():
            raw = self._raw_scores(xs, xs, positions, positions)
            causal = positions[None, :] <= positions[:, None]
            return int(((raw.abs() > clamp) & causal[None]).sum())

    def config(self) -> Dict:
        return {
            "pe": self.pe.config(),
            "weight": self.weight.config(),
            "value": self.value.config(),
            "activation": self.activation.config(),
        }


def build_layer(config: Dict) -> AttentionLayer:
    value_config = config["value"]
    if value_config.get("kind") != "linear":
        raise ModelConfigError(f"Unknown value function kind {value_config.get('kind')!r}")
    return AttentionLayer(
        build_encoding(config["pe"]),
        build_weight(config["weight"]),
        LinearValue(value_config["dim"]),
        build_activation(config["activation"]),
    )


def layer_forward(layer: AttentionLayer, xs) -> np.ndarray:
    """
    Aplica uma camada a uma sequência de vetores

    Args:
        layer: camada de atenção
        xs: sequência (n, d) de vetores

    Returns:
        np.ndarray: saídas y_1..y_n, shape (n, d)
    """
    try:
        tensor = torch.as_tensor(np.asarray(xs, dtype=np.float64), dtype=DTYPE)
    except ValueError:
        raise DimensionMismatchError("Input vectors must share one dimension")
    if tensor.dim() != 2:
        raise DimensionMismatchError("Expected a (n, d) sequence of vectors")
    with torch.no_grad():
        return layer(tensor[None])[0].numpy()
