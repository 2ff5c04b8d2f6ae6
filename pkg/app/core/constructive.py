"""
Hand-built compact transformers that eventually learn target sequences,
plus the finite-horizon learnability verifier.
"""
from dataclasses import dataclass, field
from math import tanh
from typing import Dict, List, Optional, Sequence
import logging

import torch

from app.config import get_settings
from app.core.attention import (
    AttentionLayer,
    ConstantOne,
    DotProductExp,
    LagCompare,
    LinearValue,
    Residual,
)
from app.core.encodings import ConstantZero, TableBounded, TableEmbedding
from app.core.exceptions import ModelConfigError, PreconditionError
from app.core.numeric import DTYPE
from app.core.sequences import (
    BINARY,
    Alphabet,
    Periodic,
    SequenceSpec,
    dH_asymptotic,
    differ_finitely,
    last_difference,
)
from app.core.transformer import AffineLookup, FamilySelect, TransformerModel

logger = logging.getLogger(__name__)

LEARNED = "learned"
REFUTED = "refuted"


# ---------------------------------------------------------------------------
# Single learner
# ---------------------------------------------------------------------------

def single_learner_margin(eta: float, alphabet_size: int) -> float:
    return (1.0 - eta) - eta / (alphabet_size - 1)


def build_single_learner(target: SequenceSpec, eta: Optional[float] = None,
                         alphabet: Alphabet = BINARY) -> TransformerModel:
    """
    Modelo de 1 camada que guarda alpha_{i+1} no embedding da posição i

    O embedding tem dois blocos one-hot de tamanho |Sigma|: o token lido e o
    próximo símbolo do alvo. O readout põe 1 - eta no símbolo guardado e
    eta / (|Sigma| - 1) nos demais; a saída não depende do conteúdo do prompt.

    Raises:
        ModelConfigError: alvo não eventualmente periódico, eta fora de (0, 1/2)
    """
    eta = get_settings().DEFAULT_ETA if eta is None else eta
    form = target.periodic_form()
    if form is None:
        raise ModelConfigError(f"Single learner needs an eventually periodic target, got {target.kind}")
    if not 0 < eta < 0.5:
        raise ModelConfigError(f"Leak eta must lie in (0, 1/2), got {eta}")
    size = alphabet.size
    if size < 2:
        raise ModelConfigError("Single learner needs at least two symbols")
    for symbol in target.symbols():
        alphabet.index(symbol)
    if single_learner_margin(eta, size) <= 0:
        raise ModelConfigError(f"eta={eta} leaves no positive margin over {size} symbols")

    preamble, pattern = form
    a, c = len(preamble), len(pattern)
    dim = 2 * size

    def stored(i: int) -> torch.Tensor:
        row = torch.zeros(dim, dtype=DTYPE)
        row[size + alphabet.index(target.symbol(i + 1))] = 1.0
        return row

    token_table = torch.zeros(size, dim, dtype=DTYPE)
    token_table[:, :size] = torch.eye(size, dtype=DTYPE)
    preamble_rows = torch.stack([stored(i) for i in range(1, a + 1)]) if a else torch.zeros(0, dim, dtype=DTYPE)
    cycle_rows = torch.stack([stored(a + 1 + r) for r in range(c)])
    embedding = TableEmbedding(token_table, preamble_rows, cycle_rows, declared_bound=1.0)

    layer = AttentionLayer(ConstantZero(), ConstantOne(), LinearValue(dim), Residual())

    readout = AffineLookup(dim, size)
    with torch.no_grad():
        readout.bias.fill_(eta / (size - 1))
        readout.weight[:, size:] = torch.eye(size, dtype=DTYPE) * single_learner_margin(eta, size)

    logger.info(f"Built single learner for {target.to_json()} (eta={eta}, margin={single_learner_margin(eta, size)})")
    return TransformerModel(alphabet, embedding, [layer], readout)


# ---------------------------------------------------------------------------
# Family learner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FamilyLayout:
    """Coordenadas do estado do family learner"""

    size: int
    periods: tuple
    max_lag: int

    @property
    def position_start(self) -> int:
        return self.size

    def position_slot(self, k: int) -> int:
        """Slot one-hot de min(i, L+1) = k, k em 1..L+1"""
        return self.size + k - 1

    @property
    def candidate_start(self) -> int:
        return self.size + self.max_lag + 1

    def back(self, t: int) -> int:
        return self.candidate_start + t * (2 * self.size + 2)

    def next(self, t: int) -> int:
        return self.back(t) + self.size

    def mismatch(self, t: int) -> int:
        return self.next(t) + self.size

    def rate(self, t: int) -> int:
        return self.mismatch(t) + 1

    @property
    def dim(self) -> int:
        return self.candidate_start + len(self.periods) * (2 * self.size + 2)


def family_nominal_margin(sharpness: float) -> float:
    """Margem binária quando a seleção concentra num candidato: tanh(beta / 2)"""
    return tanh(sharpness / 2.0)


def _fetch_layer(layout: FamilyLayout, lag: int, slot: int, sharpness: float) -> AttentionLayer:
    pe = TableBounded.one_hot(layout.max_lag + 2)
    weight = DotProductExp(layout.dim, 1, pe.dim)
    value = LinearValue(layout.dim)
    with torch.no_grad():
        weight.pos[lag] = sharpness
        for s in range(layout.size):
            value.weight[slot + s, s] = 1.0
    return AttentionLayer(pe, weight, value, Residual())


def build_family_learner(periods: Sequence[int], sharpness: Optional[float] = None,
                         max_lag: Optional[int] = None, alphabet: Alphabet = BINARY) -> TransformerModel:
    """
    Learner compacto para uma família finita de períodos

    Para cada período P: uma camada busca o token P posições atrás e outra o
    candidato a próximo token (P - 1 atrás); uma camada de comparação marca
    discordâncias (só onde i > P); uma camada uniforme calcula a taxa de
    discordância; o readout escolhe por soft-min com nitidez beta.

    Raises:
        ModelConfigError: períodos inválidos ou L < max(períodos)
    """
    sharpness = get_settings().DEFAULT_SHARPNESS if sharpness is None else float(sharpness)
    periods = tuple(int(p) for p in periods)
    if not periods or len(set(periods)) != len(periods) or min(periods) < 2:
        raise ModelConfigError(f"Periods must be distinct integers >= 2, got {list(periods)}")
    if sharpness <= 0:
        raise ModelConfigError(f"Sharpness must be positive, got {sharpness}")
    max_lag = 4 * max(periods) if max_lag is None else int(max_lag)
    if max_lag < max(periods):
        raise ModelConfigError(f"Max lag {max_lag} is below the largest period {max(periods)}")
    members = [Periodic("0" * (p - 1) + "1") for p in periods]
    for x in range(len(members)):
        for y in range(x + 1, len(members)):
            if dH_asymptotic(members[x], members[y]) == 0:
                raise ModelConfigError(f"Periods {periods[x]} and {periods[y]} are not separated")

    layout = FamilyLayout(alphabet.size, periods, max_lag)
    size, dim = layout.size, layout.dim

    token_table = torch.zeros(size, dim, dtype=DTYPE)
    token_table[:, :size] = torch.eye(size, dtype=DTYPE)
    preamble_rows = torch.zeros(max_lag, dim, dtype=DTYPE)
    for i in range(1, max_lag + 1):
        preamble_rows[i - 1, layout.position_slot(i)] = 1.0
    cycle_rows = torch.zeros(1, dim, dtype=DTYPE)
    cycle_rows[0, layout.position_slot(max_lag + 1)] = 1.0
    embedding = TableEmbedding(token_table, preamble_rows, cycle_rows, declared_bound=1.0)

    layers: List[AttentionLayer] = []
    for t, p in enumerate(periods):
        layers.append(_fetch_layer(layout, p, layout.back(t), sharpness))
        layers.append(_fetch_layer(layout, p - 1, layout.next(t), sharpness))

    entries = [
        (layout.back(t), [layout.position_slot(k) for k in range(p + 1, max_lag + 2)], layout.mismatch(t))
        for t, p in enumerate(periods)
    ]
    layers.append(AttentionLayer(ConstantZero(), ConstantOne(), LinearValue(dim), LagCompare(0, size, entries)))

    average = LinearValue(dim)
    with torch.no_grad():
        for t in range(len(periods)):
            average.weight[layout.rate(t), layout.mismatch(t)] = 1.0
    layers.append(AttentionLayer(ConstantZero(), ConstantOne(), average, Residual()))

    readout = FamilySelect(
        size,
        [layout.next(t) for t in range(len(periods))],
        [layout.rate(t) for t in range(len(periods))],
        sharpness,
        sharpness,
    )
    logger.info(
        f"Built family learner for periods {list(periods)} "
        f"(beta={sharpness}, L={max_lag}, d={dim}, nominal margin={family_nominal_margin(sharpness):.6f})"
    )
    return TransformerModel(alphabet, embedding, layers, readout)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class LearnabilityWitness:
    verdict: str
    epsilon: float
    n0: int
    horizon: int
    first_failing_n: Optional[int] = None
    margins: List[float] = field(default_factory=list)

    @property
    def learned(self) -> bool:
        return self.verdict == LEARNED

    @property
    def min_margin(self) -> Optional[float]:
        return min(self.margins) if self.margins else None

    def to_dict(self) -> Dict:
        return {
            "verdict": self.verdict,
            "epsilon": self.epsilon,
            "n0": self.n0,
            "horizon": self.horizon,
            "first_failing_n": self.first_failing_n,
            "min_margin": self.min_margin,
        }


def true_margin(probs, true_index: int) -> float:
    """P(verdadeiro) - max dos demais"""
    others = [float(p) for k, p in enumerate(probs) if k != true_index]
    return float(probs[true_index]) - max(others)


def verify_eventual_learning(model: TransformerModel, spec: SequenceSpec, epsilon: float,
                             n0: int, horizon: int) -> LearnabilityWitness:
    """
    Verifica para todo n em [n0, N] que T(prefix(n)) dá ao próximo símbolo
    pelo menos epsilon a mais que a qualquer outro (horizonte finito)

    Raises:
        PreconditionError: epsilon <= 0, n0 < 1 ou N < n0
    """
    if epsilon <= 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")
    if n0 < 1 or horizon < n0:
        raise PreconditionError(f"Need 1 <= n0 <= N, got n0={n0}, N={horizon}")
    tolerance = get_settings().VERIFY_TOLERANCE
    sequence = spec.prefix(horizon + 1)
    witness = LearnabilityWitness(LEARNED, epsilon, n0, horizon)
    state = model.start_decode(sequence[:n0])
    for n in range(n0, horizon + 1):
        margin = true_margin(state.probs, model.alphabet.index(sequence[n]))
        witness.margins.append(margin)
        if margin < epsilon - tolerance:
            witness.verdict = REFUTED
            witness.first_failing_n = n
            break
        if n < horizon:
            model.advance(state, sequence[n])
    logger.info(
        f"Verification of {spec.to_json()}: {witness.verdict}"
        + (f" at n={witness.first_failing_n}" if witness.first_failing_n else "")
    )
    return witness


@dataclass
class TailInvarianceReport:
    witness_a: LearnabilityWitness
    witness_b: LearnabilityWitness
    last_difference: int

    @property
    def passed(self) -> bool:
        return self.witness_a.verdict == self.witness_b.verdict

    def to_dict(self) -> Dict:
        return {
            "a": self.witness_a.to_dict(),
            "b": self.witness_b.to_dict(),
            "last_difference": self.last_difference,
            "passed": self.passed,
        }


def tail_invariance_check(model: TransformerModel, spec_a: SequenceSpec, spec_b: SequenceSpec,
                          epsilon: float, n0: int, horizon: int) -> TailInvarianceReport:
    """
    Sequências que diferem em finitas posições: os veredictos devem coincidir

    Raises:
        PreconditionError: specs não eventualmente periódicas ou com infinitas diferenças
    """
    if not (spec_a.is_eventually_periodic and spec_b.is_eventually_periodic):
        raise PreconditionError("Finite-difference check needs eventually periodic specs")
    if not differ_finitely(spec_a, spec_b):
        raise PreconditionError("Specs differ in infinitely many positions")
    report = TailInvarianceReport(
        verify_eventual_learning(model, spec_a, epsilon, n0, horizon),
        verify_eventual_learning(model, spec_b, epsilon, n0, horizon),
        last_difference(spec_a, spec_b),
    )
    if not report.passed:
        logger.warning("Verdicts disagree on a finite-difference pair")
    return report
