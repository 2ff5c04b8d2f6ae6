"""
Compact positional encodings p(i, j) and the table input embedding e(sigma, i).

Every encoding here takes finitely many values or is bounded by construction,
so a declared l-infinity bound R holds for all position pairs.
"""
from typing import Dict, Optional
import logging

import torch
from torch import nn

from app.config import get_settings
from app.core.exceptions import ModelConfigError
from app.core.numeric import DTYPE

logger = logging.getLogger(__name__)

NORM_SWEEP_BLOCK = 1 << 20


def _positions(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=torch.long)


class PositionalEncoding(nn.Module):
    """
    Base de p: N x N -> R^d

    Subclasses implement `encode` for a single pair and `bias` for the
    query x key grid u . p(i, j) used by the dot-product weight functions.
    """

    kind: str = ""

    def __init__(self, dim: int, declared_bound: float):
        super().__init__()
        if dim < 1:
            raise ModelConfigError(f"Positional encoding dimension must be >= 1, got {dim}")
        self.dim = dim
        self.declared_bound = float(declared_bound)

    def encode(self, i: int, j: int) -> torch.Tensor:
        raise NotImplementedError

    def bias(self, u: torch.Tensor, key_pos: torch.Tensor, query_pos: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def max_norm(self, horizon: int) -> float:
        raise NotImplementedError

    def config(self) -> Dict:
        raise NotImplementedError


class ConstantZero(PositionalEncoding):
    kind = "constant-zero"

    def __init__(self, dim: int = 1):
        super().__init__(dim, 0.0)

    def encode(self, i: int, j: int) -> torch.Tensor:
        return torch.zeros(self.dim, dtype=DTYPE)

    def bias(self, u, key_pos, query_pos):
        return torch.zeros(query_pos.shape[0], key_pos.shape[0], dtype=DTYPE)

    def max_norm(self, horizon: int) -> float:
        return 0.0

    def config(self) -> Dict:
        return {"kind": self.kind, "dim": self.dim}


class Sinusoidal(PositionalEncoding):
    """
    p(i, j) = [sin(w i), cos(w i), sin(w j), cos(w j)] for h frequencies w.

    Every coordinate lies in [-1, 1], so R = 1.
    """

    kind = "sinusoidal"

    def __init__(self, frequencies: int = 4, base: Optional[float] = None):
        super().__init__(4 * frequencies, 1.0)
        self.frequencies = frequencies
        self.base = float(base if base is not None else get_settings().ROTARY_BASE)
        omega = self.base ** (-torch.arange(frequencies, dtype=DTYPE) / frequencies)
        self.register_buffer("omega", omega)

    def _waves(self, positions: torch.Tensor) -> torch.Tensor:
        angles = positions.to(DTYPE)[:, None] * self.omega[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)

    def encode(self, i: int, j: int) -> torch.Tensor:
        return torch.cat([self._waves(_positions([i]))[0], self._waves(_positions([j]))[0]])

    def bias(self, u, key_pos, query_pos):
        half = 2 * self.frequencies
        key_term = self._waves(key_pos) @ u[:half]
        query_term = self._waves(query_pos) @ u[half:]
        return query_term[:, None] + key_term[None, :]

    def max_norm(self, horizon: int) -> float:
        best = 0.0
        for start in range(1, horizon + 1, NORM_SWEEP_BLOCK):
            block = torch.arange(start, min(start + NORM_SWEEP_BLOCK, horizon + 1))
            best = max(best, float(self._waves(block).abs().max()))
        return best

    def config(self) -> Dict:
        return {"kind": self.kind, "frequencies": self.frequencies, "base": self.base}


class RelativeEncoding(PositionalEncoding):
    """p(i, j) = table[min(max(j - i, 0), K)]: finitely many rows, compact exactly"""

    def offset_limit(self) -> int:
        raise NotImplementedError

    def table(self) -> torch.Tensor:
        raise NotImplementedError

    def offsets(self, key_pos: torch.Tensor, query_pos: torch.Tensor) -> torch.Tensor:
        delta = query_pos[:, None] - key_pos[None, :]
        return delta.clamp(0, self.offset_limit())

    def encode(self, i: int, j: int) -> torch.Tensor:
        return self.table()[min(max(j - i, 0), self.offset_limit())]

    def bias(self, u, key_pos, query_pos):
        return (self.table() @ u)[self.offsets(key_pos, query_pos)]

    def max_norm(self, horizon: int) -> float:
        reachable = min(horizon - 1, self.offset_limit()) + 1
        return float(self.table()[:reachable].abs().max())


class RotaryRelative(RelativeEncoding):
    """
    Rotation angles of the clipped relative offset: p = [cos(t d), sin(t d)] per
    frequency t, with d = min(j - i, L). Unit rotations give R = 1.
    """

    kind = "rotary-relative"

    def __init__(self, frequencies: int = 4, max_offset: Optional[int] = None, base: Optional[float] = None):
        super().__init__(2 * frequencies, 1.0)
        settings = get_settings()
        self.frequencies = frequencies
        self.max_offset = int(max_offset if max_offset is not None else settings.ROTARY_MAX_OFFSET)
        self.base = float(base if base is not None else settings.ROTARY_BASE)
        if self.max_offset < 0:
            raise ModelConfigError("Rotary max offset must be >= 0")
        theta = self.base ** (-torch.arange(frequencies, dtype=DTYPE) / frequencies)
        angles = torch.arange(self.max_offset + 1, dtype=DTYPE)[:, None] * theta[None, :]
        self.register_buffer("cos_table", torch.cos(angles))
        self.register_buffer("sin_table", torch.sin(angles))

    def offset_limit(self) -> int:
        return self.max_offset

    def table(self) -> torch.Tensor:
        # intercalado: [cos t0, sin t0, cos t1, sin t1, ...]
        return torch.stack([self.cos_table, self.sin_table], dim=-1).reshape(self.max_offset + 1, -1)

    def config(self) -> Dict:
        return {
            "kind": self.kind,
            "frequencies": self.frequencies,
            "max_offset": self.max_offset,
            "base": self.base,
        }


class TableBounded(RelativeEncoding):
    """Explicit table indexed by min(j - i, rows - 1)"""

    kind = "table-bounded"

    def __init__(self, table: torch.Tensor, declared_bound: Optional[float] = None):
        table = torch.as_tensor(table, dtype=DTYPE)
        if table.dim() != 2 or table.shape[0] < 1:
            raise ModelConfigError("Bounded table must be a nonempty (rows, dim) matrix")
        bound = float(table.abs().max()) if declared_bound is None else declared_bound
        super().__init__(table.shape[1], bound)
        self.register_buffer("rows", table.clone())

    @classmethod
    def empty(cls, rows: int, dim: int, declared_bound: float) -> "TableBounded":
        return cls(torch.zeros(rows, dim, dtype=DTYPE), declared_bound)

    @classmethod
    def one_hot(cls, rows: int) -> "TableBounded":
        return cls(torch.eye(rows, dtype=DTYPE))

    def offset_limit(self) -> int:
        return self.rows.shape[0] - 1

    def table(self) -> torch.Tensor:
        return self.rows

    def config(self) -> Dict:
        return {
            "kind": self.kind,
            "rows": self.rows.shape[0],
            "dim": self.dim,
            "declared_bound": self.declared_bound,
        }


def build_encoding(config: Dict) -> PositionalEncoding:
    """Reconstrói um encoding a partir de `config()` (tabelas vêm do state_dict)"""
    kind = config.get("kind")
    if kind == ConstantZero.kind:
        return ConstantZero(config.get("dim", 1))
    if kind == Sinusoidal.kind:
        return Sinusoidal(config["frequencies"], config.get("base"))
    if kind == RotaryRelative.kind:
        return RotaryRelative(config["frequencies"], config.get("max_offset"), config.get("base"))
    if kind == TableBounded.kind:
        return TableBounded.empty(config["rows"], config["dim"], config["declared_bound"])
    raise ModelConfigError(f"Unknown positional encoding kind {kind!r}")


def make_encoding(kind: str, dim: int) -> PositionalEncoding:
    """Encoding padrão de um tipo para largura de chave `dim`"""
    if kind == ConstantZero.kind:
        return ConstantZero()
    if kind == Sinusoidal.kind:
        return Sinusoidal(max(1, dim // 4))
    if kind == RotaryRelative.kind:
        if dim % 2:
            raise ModelConfigError(f"Rotary encoding needs an even key dimension, got {dim}")
        return RotaryRelative(dim // 2)
    if kind == TableBounded.kind:
        return TableBounded.one_hot(dim)
    raise ModelConfigError(f"Unknown positional encoding kind {kind!r}")


# ---------------------------------------------------------------------------
# Input embedding
# ---------------------------------------------------------------------------

class TableEmbedding(nn.Module):
    """
    e(sigma, i) = token_table[sigma] + position_row(i)

    Position rows: one per preamble position 1..a, then a cycle of c rows
    repeating forever. Finitely many distinct vectors, hence compact.
    """

    def __init__(
        self,
        token_table: torch.Tensor,
        position_preamble: Optional[torch.Tensor] = None,
        position_cycle: Optional[torch.Tensor] = None,
        declared_bound: Optional[float] = None,
    ):
        super().__init__()
        token_table = torch.as_tensor(token_table, dtype=DTYPE)
        dim = token_table.shape[1]
        if position_preamble is None:
            position_preamble = torch.zeros(0, dim, dtype=DTYPE)
        if position_cycle is None:
            position_cycle = torch.zeros(1, dim, dtype=DTYPE)
        position_preamble = torch.as_tensor(position_preamble, dtype=DTYPE)
        position_cycle = torch.as_tensor(position_cycle, dtype=DTYPE)
        if position_cycle.shape[0] < 1:
            raise ModelConfigError("Position cycle needs at least one row")
        if position_preamble.shape[1] != dim or position_cycle.shape[1] != dim:
            raise ModelConfigError("Embedding tables must share the model dimension")
        self.dim = dim
        self.token_table = nn.Parameter(token_table.clone())
        self.position_preamble = nn.Parameter(position_preamble.clone())
        self.position_cycle = nn.Parameter(position_cycle.clone())
        self._declared_bound = declared_bound

    @classmethod
    def empty(cls, alphabet_size: int, dim: int, preamble_rows: int = 0, cycle_rows: int = 1,
              declared_bound: Optional[float] = None) -> "TableEmbedding":
        return cls(
            torch.zeros(alphabet_size, dim, dtype=DTYPE),
            torch.zeros(preamble_rows, dim, dtype=DTYPE),
            torch.zeros(cycle_rows, dim, dtype=DTYPE),
            declared_bound,
        )

    @property
    def alphabet_size(self) -> int:
        return self.token_table.shape[0]

    def row_index(self, positions: torch.Tensor) -> torch.Tensor:
        a = self.position_preamble.shape[0]
        c = self.position_cycle.shape[0]
        cyclic = a + torch.remainder(positions - a - 1, c)
        return torch.where(positions <= a, positions - 1, cyclic)

    def position_rows(self) -> torch.Tensor:
        return torch.cat([self.position_preamble, self.position_cycle], dim=0)

    def forward(self, token_ids: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        rows = self.position_rows()[self.row_index(positions)]
        return self.token_table[token_ids] + rows

    @property
    def declared_bound(self) -> float:
        if self._declared_bound is not None:
            return float(self._declared_bound)
        return self._norm_over(self.position_rows())

    def _norm_over(self, rows: torch.Tensor) -> float:
        with torch.no_grad():
            combos = self.token_table[:, None, :] + rows[None, :, :]
            return float(combos.abs().max())

    def max_norm(self, horizon: int) -> float:
        a = self.position_preamble.shape[0]
        c = self.position_cycle.shape[0]
        rows = [self.position_preamble[: min(a, horizon)]]
        if horizon > a:
            rows.append(self.position_cycle[: min(c, horizon - a)])
        return self._norm_over(torch.cat(rows, dim=0))

    def config(self) -> Dict:
        return {
            "kind": "table",
            "alphabet_size": self.alphabet_size,
            "dim": self.dim,
            "preamble_rows": self.position_preamble.shape[0],
            "cycle_rows": self.position_cycle.shape[0],
            "declared_bound": self._declared_bound,
        }


def build_embedding(config: Dict) -> TableEmbedding:
    if config.get("kind") != "table":
        raise ModelConfigError(f"Unknown embedding kind {config.get('kind')!r}")
    return TableEmbedding.empty(
        config["alphabet_size"],
        config["dim"],
        config.get("preamble_rows", 0),
        config.get("cycle_rows", 1),
        config.get("declared_bound"),
    )
