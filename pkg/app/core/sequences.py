"""
Sequence library: alphabets, finitely described infinite sequences, relative
Hamming distances and the perturbation samplers used by the experiments.
"""
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from math import floor, lcm
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.special import betaln, gammaln

from app.core.exceptions import AlphabetError, PreconditionError, SequenceSpecError
from app.core.numeric import RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Alphabet:
    """Ordered set of single-character tokens with stable indices"""

    tokens: Tuple[str, ...] = ("0", "1")

    def __post_init__(self):
        if not self.tokens:
            raise AlphabetError("Alphabet must be nonempty")
        if len(set(self.tokens)) != len(self.tokens):
            raise AlphabetError(f"Duplicate tokens in alphabet: {self.tokens}")
        for token in self.tokens:
            if len(token) != 1:
                raise AlphabetError(f"Tokens must be single characters, got {token!r}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise AlphabetError(f"Token {token!r} is not in alphabet {self.tokens}")

    def encode(self, sequence: str) -> List[int]:
        return [self.index(token) for token in sequence]

    def decode(self, indices: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in indices)


BINARY = Alphabet(("0", "1"))


# ---------------------------------------------------------------------------
# Infinite sequences
# ---------------------------------------------------------------------------

class SequenceSpec:
    """
    Finitely described infinite sequence over single-character symbols.

    Subclasses implement `symbol(i)` (1-based). Eventually periodic variants
    return `(preamble, pattern)` from `periodic_form`; density-zero indicator
    variants set `is_sparse`.
    """

    kind: str = ""
    is_sparse: bool = False

    def symbol(self, i: int) -> str:
        raise NotImplementedError

    def prefix(self, n: int) -> str:
        if n < 0:
            raise SequenceSpecError(f"Prefix length must be >= 0, got {n}")
        return "".join(self.symbol(i) for i in range(1, n + 1))

    def periodic_form(self) -> Optional[Tuple[str, str]]:
        return None

    @property
    def is_eventually_periodic(self) -> bool:
        return self.periodic_form() is not None

    def symbols(self) -> set:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(SequenceSpec):
    symbol_value: str = "0"
    kind = "constant"

    def __post_init__(self):
        if len(self.symbol_value) != 1:
            raise SequenceSpecError("Constant symbol must be a single character")

    def symbol(self, i: int) -> str:
        return self.symbol_value

    def prefix(self, n: int) -> str:
        if n < 0:
            raise SequenceSpecError(f"Prefix length must be >= 0, got {n}")
        return self.symbol_value * n

    def periodic_form(self) -> Tuple[str, str]:
        return "", self.symbol_value

    def symbols(self) -> set:
        return {self.symbol_value}

    def to_json(self) -> dict:
        return {"kind": self.kind, "symbol": self.symbol_value}


@dataclass(frozen=True)
class EventuallyPeriodic(SequenceSpec):
    preamble: str = ""
    pattern: str = "0"
    kind = "eventually-periodic"

    def __post_init__(self):
        if not self.pattern:
            raise SequenceSpecError("Periodic pattern must be nonempty")

    def symbol(self, i: int) -> str:
        if i <= len(self.preamble):
            return self.preamble[i - 1]
        return self.pattern[(i - len(self.preamble) - 1) % len(self.pattern)]

    def prefix(self, n: int) -> str:
        if n < 0:
            raise SequenceSpecError(f"Prefix length must be >= 0, got {n}")
        if n <= len(self.preamble):
            return self.preamble[:n]
        rest = n - len(self.preamble)
        reps = rest // len(self.pattern) + 1
        return self.preamble + (self.pattern * reps)[:rest]

    def periodic_form(self) -> Tuple[str, str]:
        return self.preamble, self.pattern

    def symbols(self) -> set:
        return set(self.preamble) | set(self.pattern)

    def to_json(self) -> dict:
        return {"kind": self.kind, "preamble": self.preamble, "pattern": self.pattern}


@dataclass(frozen=True)
class Periodic(EventuallyPeriodic):
    kind = "periodic"

    def __init__(self, pattern: str):
        object.__setattr__(self, "preamble", "")
        object.__setattr__(self, "pattern", pattern)
        self.__post_init__()

    def to_json(self) -> dict:
        return {"kind": self.kind, "pattern": self.pattern}


@lru_cache(maxsize=32)
def _prime_sieve(limit: int) -> np.ndarray:
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(limit ** 0.5) + 1):
        if sieve[p]:
            sieve[p * p::p] = False
    return sieve


@dataclass(frozen=True)
class IncreasingSpacing(SequenceSpec):
    """1 at the triangular positions 1, 3, 6, 10, ...; 0 elsewhere"""

    kind = "increasing-spacing"
    is_sparse = True

    def symbol(self, i: int) -> str:
        # i é triangular sse 8i+1 é quadrado perfeito
        root = int((8 * i + 1) ** 0.5)
        while root * root > 8 * i + 1:
            root -= 1
        while (root + 1) * (root + 1) <= 8 * i + 1:
            root += 1
        return "1" if root * root == 8 * i + 1 else "0"

    def symbols(self) -> set:
        return {"0", "1"}

    def to_json(self) -> dict:
        return {"kind": self.kind}


INDICATOR_SETS = ("powers-of-two", "squares", "primes")


@dataclass(frozen=True)
class Indicator(SequenceSpec):
    """Indicator sequence of a density-zero set of positive integers"""

    set_name: str = "powers-of-two"
    kind = "indicator"
    is_sparse = True

    def __post_init__(self):
        if self.set_name not in INDICATOR_SETS:
            raise SequenceSpecError(
                f"Unknown indicator set {self.set_name!r}. Allowed: {', '.join(INDICATOR_SETS)}"
            )

    def symbol(self, i: int) -> str:
        if self.set_name == "powers-of-two":
            return "1" if i & (i - 1) == 0 else "0"
        if self.set_name == "squares":
            root = int(i ** 0.5)
            while root * root > i:
                root -= 1
            while (root + 1) * (root + 1) <= i:
                root += 1
            return "1" if root * root == i else "0"
        return "1" if _prime_sieve(max(i, 2))[i] else "0"

    def prefix(self, n: int) -> str:
        if self.set_name != "primes" or n <= 0:
            return super().prefix(n)
        sieve = _prime_sieve(max(n, 2))
        return "".join("1" if sieve[i] else "0" for i in range(1, n + 1))

    def symbols(self) -> set:
        return {"0", "1"}

    def to_json(self) -> dict:
        return {"kind": self.kind, "set": self.set_name}


def parse_sequence_spec(raw: Union[str, dict, SequenceSpec]) -> SequenceSpec:
    """
    Constrói um SequenceSpec a partir de JSON ou atalho textual

    Atalhos aceitos: "constant0", "constant:0", "periodic:001",
    "eventually:111:0", "spacing", "powers-of-two", "squares", "primes",
    "indicator:primes".

    Raises:
        SequenceSpecError: se a descrição for inválida
    """
    if isinstance(raw, SequenceSpec):
        return raw
    if isinstance(raw, str):
        text = raw.strip()
        if text.startswith("constant"):
            symbol = text[len("constant"):].lstrip(":")
            return Constant(symbol or "0")
        if text.startswith("periodic:"):
            return Periodic(text.split(":", 1)[1])
        if text.startswith("eventually:"):
            parts = text.split(":")
            if len(parts) != 3:
                raise SequenceSpecError(f"Expected 'eventually:<preamble>:<pattern>', got {raw!r}")
            return EventuallyPeriodic(parts[1], parts[2])
        if text in ("spacing", "increasing-spacing"):
            return IncreasingSpacing()
        if text.startswith("indicator:"):
            return Indicator(text.split(":", 1)[1])
        if text in INDICATOR_SETS:
            return Indicator(text)
        raise SequenceSpecError(f"Unknown sequence spec {raw!r}")
    if isinstance(raw, dict):
        kind = raw.get("kind")
        try:
            if kind == "constant":
                return Constant(raw.get("symbol", "0"))
            if kind == "periodic":
                return Periodic(raw["pattern"])
            if kind == "eventually-periodic":
                return EventuallyPeriodic(raw.get("preamble", ""), raw["pattern"])
            if kind == "increasing-spacing":
                return IncreasingSpacing()
            if kind == "indicator":
                return Indicator(raw["set"])
        except KeyError as e:
            raise SequenceSpecError(f"Sequence spec {kind!r} is missing field {e}")
        raise SequenceSpecError(f"Unknown sequence spec kind {kind!r}")
    raise SequenceSpecError(f"Cannot parse sequence spec from {type(raw).__name__}")


def format_prefixes(specs: Sequence[SequenceSpec], n: int) -> str:
    """Exporta prefixos como texto, uma sequência por linha"""
    return "".join(spec.prefix(n) + "\n" for spec in specs)


def beta_block(p: int, r: int) -> str:
    """(0^{p-1} 1)^r 0, comprimento r*p + 1"""
    if p < 2 or r < 1:
        raise SequenceSpecError(f"beta_block requires p >= 2 and r >= 1, got p={p}, r={r}")
    return ("0" * (p - 1) + "1") * r + "0"


# ---------------------------------------------------------------------------
# Hamming distances
# ---------------------------------------------------------------------------

def hamming_rel(a: str, b: str) -> Fraction:
    """
    Distância de Hamming relativa exata

    Raises:
        SequenceSpecError: comprimentos diferentes ou entrada vazia
    """
    if len(a) != len(b):
        raise SequenceSpecError(f"Length mismatch: {len(a)} vs {len(b)}")
    if not a:
        raise SequenceSpecError("Hamming distance of empty sequences is undefined")
    return Fraction(sum(x != y for x, y in zip(a, b)), len(a))


@dataclass(frozen=True)
class NotComputable:
    reason: str = "no closed form for this pair"

    def __repr__(self) -> str:
        return f"NotComputable({self.reason!r})"


AsymptoticDistance = Union[Fraction, NotComputable]


def _periodic_disagreement(a: SequenceSpec, b: SequenceSpec) -> Fraction:
    pre_a, pat_a = a.periodic_form()
    pre_b, pat_b = b.periodic_form()
    start = max(len(pre_a), len(pre_b))
    period = lcm(len(pat_a), len(pat_b))
    differing = sum(
        a.symbol(i) != b.symbol(i) for i in range(start + 1, start + period + 1)
    )
    return Fraction(differing, period)


def _sparse_disagreement(periodic: SequenceSpec) -> Fraction:
    # o esparso é "0" fora de um conjunto de densidade zero
    _, pattern = periodic.periodic_form()
    return Fraction(sum(ch != "0" for ch in pattern), len(pattern))


def dH_asymptotic(a: SequenceSpec, b: SequenceSpec) -> AsymptoticDistance:
    """
    liminf da distância de Hamming relativa entre prefixos, quando há forma fechada

    Returns:
        Fraction exata, ou NotComputable
    """
    if a == b:
        return Fraction(0)
    if a.is_eventually_periodic and b.is_eventually_periodic:
        return _periodic_disagreement(a, b)
    if a.is_eventually_periodic and b.is_sparse:
        return _sparse_disagreement(a)
    if a.is_sparse and b.is_eventually_periodic:
        return _sparse_disagreement(b)
    if a.is_sparse and b.is_sparse:
        return Fraction(0)
    return NotComputable(f"{a.kind} vs {b.kind}")


def differ_finitely(a: SequenceSpec, b: SequenceSpec) -> bool:
    """True se as sequências eventualmente periódicas coincidem a partir de algum ponto"""
    if not (a.is_eventually_periodic and b.is_eventually_periodic):
        raise SequenceSpecError("Finite-difference check needs eventually periodic specs")
    return _periodic_disagreement(a, b) == 0


def last_difference(a: SequenceSpec, b: SequenceSpec) -> int:
    """Última posição em que duas sequências com diferenças finitas divergem (0 se nenhuma)"""
    pre_a, pat_a = a.periodic_form()
    pre_b, pat_b = b.periodic_form()
    horizon = max(len(pre_a), len(pre_b)) + lcm(len(pat_a), len(pat_b))
    last = 0
    for i in range(1, horizon + 1):
        if a.symbol(i) != b.symbol(i):
            last = i
    return last


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

class PerturbationRule(str, Enum):
    FLIP_BINARY = "flip-binary"
    UNIFORM_DIFFERENT = "uniform-different-symbol"


@dataclass(frozen=True)
class PerturbationPlan:
    positions: Tuple[int, ...] = ()
    rule: PerturbationRule = PerturbationRule.FLIP_BINARY
    protect_last: bool = True

    @property
    def count(self) -> int:
        return len(self.positions)


def perturbation_count(gamma: float, length: int) -> int:
    """max(1, floor(gamma * (length - 1))) usando o valor decimal exato de gamma"""
    return max(1, floor(Fraction(str(gamma)) * (length - 1)))


def exact_count(gamma: float, length: int) -> int:
    """floor(gamma * (length - 1)), sem piso de 1 (gamma = 0 gera 0)"""
    return floor(Fraction(str(gamma)) * (length - 1))


def _default_rule(alphabet: Alphabet) -> PerturbationRule:
    return PerturbationRule.FLIP_BINARY if alphabet.size == 2 else PerturbationRule.UNIFORM_DIFFERENT


def _replacement(symbol: str, rule: PerturbationRule, alphabet: Alphabet, gen: np.random.Generator) -> str:
    if rule == PerturbationRule.FLIP_BINARY:
        if alphabet.size != 2:
            raise AlphabetError("flip-binary needs a two-symbol alphabet")
        return alphabet.tokens[1 - alphabet.index(symbol)]
    others = [t for t in alphabet.tokens if t != symbol]
    if not others:
        raise AlphabetError("Cannot replace a symbol in a one-symbol alphabet")
    return others[int(gen.integers(len(others)))]


def perturb_at(
    sequence: str,
    positions: Iterable[int],
    rng: RngStream,
    rule: Optional[PerturbationRule] = None,
    alphabet: Alphabet = BINARY,
    protect_last: bool = True,
) -> Tuple[str, PerturbationPlan]:
    """
    Substitui os símbolos nas posições (1-based) dadas

    Raises:
        SequenceSpecError: posição fora dos limites ou repetida
    """
    rule = PerturbationRule(rule) if rule is not None else _default_rule(alphabet)
    ordered = sorted(positions)
    upper = len(sequence) - 1 if protect_last else len(sequence)
    if len(set(ordered)) != len(ordered):
        raise SequenceSpecError("Perturbation positions must be distinct")
    if ordered and (ordered[0] < 1 or ordered[-1] > upper):
        raise SequenceSpecError(f"Perturbation positions must lie in 1..{upper}")
    gen = rng.generator()
    chars = list(sequence)
    for position in ordered:
        chars[position - 1] = _replacement(chars[position - 1], rule, alphabet, gen)
    return "".join(chars), PerturbationPlan(tuple(ordered), rule, protect_last)


def perturb(
    sequence: str,
    count: int,
    rng: RngStream,
    rule: Optional[PerturbationRule] = None,
    alphabet: Alphabet = BINARY,
) -> Tuple[str, PerturbationPlan]:
    """
    Perturba exatamente `count` posições distintas entre 1..len-1 (última protegida)

    Raises:
        SequenceSpecError: count fora de 0..len-1
    """
    if count < 0 or count > max(len(sequence) - 1, 0):
        raise SequenceSpecError(
            f"Cannot perturb {count} positions of a length-{len(sequence)} sequence with the last one protected"
        )
    if count == 0:
        rule = PerturbationRule(rule) if rule is not None else _default_rule(alphabet)
        return sequence, PerturbationPlan((), rule, True)
    gen = rng.fork(0).generator()
    chosen = gen.choice(len(sequence) - 1, size=count, replace=False) + 1
    return perturb_at(sequence, chosen.tolist(), rng.fork(1), rule, alphabet)


# ---------------------------------------------------------------------------
# Beta-Binomial positions
# ---------------------------------------------------------------------------

def _check_betabinom(n: int, u: float, v: float) -> None:
    if n < 0:
        raise PreconditionError(f"Beta-Binomial needs n >= 0, got {n}")
    if u <= 0 or v <= 0:
        raise PreconditionError(f"Beta-Binomial shapes must be positive, got u={u}, v={v}")


def betabinom_pmf_table(n: int, u: float, v: float) -> np.ndarray:
    """pmf(k | n, u, v) para k = 0..n via log-gamma"""
    _check_betabinom(n, u, v)
    k = np.arange(n + 1, dtype=np.float64)
    log_choose = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    return np.exp(log_choose + betaln(k + u, n - k + v) - betaln(u, v))


def betabinom_pmf(k: int, n: int, u: float, v: float) -> float:
    """
    BetaBinomial(k | n, u, v) = C(n,k) B(k+u, n-k+v) / B(u,v)

    Raises:
        PreconditionError: parâmetros fora do domínio
    """
    _check_betabinom(n, u, v)
    if not 0 <= k <= n:
        raise PreconditionError(f"k must lie in 0..{n}, got {k}")
    return float(betabinom_pmf_table(n, u, v)[k])


MAX_POSITION_DRAWS = 10_000_000


def sample_positions_betabinomial(
    count: int, n: int, u: float, v: float, rng: RngStream
) -> Tuple[int, ...]:
    """
    Sorteia `count` posições distintas em 1..n pela Beta-Binomial (inversa da CDF)

    Posição = k + 1 com k ~ BetaBinomial(n-1, u, v); repetidas são rejeitadas.
    """
    if count < 0 or count > n:
        raise PreconditionError(f"Cannot draw {count} distinct positions out of {n}")
    _check_betabinom(n, u, v)
    if count == n:
        return tuple(range(1, n + 1))
    cdf = np.cumsum(betabinom_pmf_table(n - 1, u, v))
    gen = rng.generator()
    chosen: Dict[int, None] = {}
    draws = 0
    while len(chosen) < count:
        batch = gen.random(max(16, 2 * (count - len(chosen))))
        draws += batch.size
        ks = np.minimum(np.searchsorted(cdf, batch, side="right"), n - 1)
        for k in ks.tolist():
            chosen.setdefault(k + 1, None)
            if len(chosen) == count:
                break
        if draws > MAX_POSITION_DRAWS:
            raise PreconditionError(
                f"Beta-Binomial({u}, {v}) cannot supply {count} distinct positions out of {n}"
            )
    return tuple(sorted(chosen))
