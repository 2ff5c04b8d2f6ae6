"""
Experiment protocols: next-token sensitivity, periodic continuation,
continuity modulus, sim-measure, collapse and isolation probes, ssmax
comparison. Each is a deterministic function of (model, parameters, seed).
"""
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from itertools import accumulate
from typing import Dict, List, Optional, Protocol, Sequence, Tuple
import logging

import numpy as np
import torch

from app.config import get_settings
from app.core.constructive import REFUTED, LearnabilityWitness, verify_eventual_learning
from app.core.exceptions import DimensionMismatchError, ModelConfigError, PreconditionError
from app.core.numeric import Dist, RngStream, argmax_with_margin, linf_distance
from app.core.sequences import (
    Alphabet,
    Constant,
    Periodic,
    PerturbationRule,
    SequenceSpec,
    beta_block,
    exact_count,
    perturb,
    perturb_at,
    perturbation_count,
    sample_positions_betabinomial,
)
from app.core.transformer import TransformerModel, decode_with_trace, strip_ssmax

logger = logging.getLogger(__name__)

NTS_INSTRUCTION = "Complete the sequence with 0s and 1s:"
PERIODIC_INSTRUCTION = "Complete the following periodic sequence with 0s and 1s:"

DEFAULT_GAMMAS = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_SHAPES = ((1, 8), (1, 3), (0.5, 0.5), (1, 1), (2, 2), (8, 8), (3, 1), (8, 1))
DEFAULT_REPS = (1, 4, 10)
DEFAULT_STEPS = 505
DEFAULT_SAMPLES = 100
DEFAULT_LENGTH = 190


# ---------------------------------------------------------------------------
# Model interface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    token: str
    dist: Dist


class NextTokenModel(Protocol):
    """prompt -> Dist sobre `alphabet`; modelos de texto recebem instruções"""

    alphabet: Alphabet
    uses_instructions: bool

    def predict(self, prompts: Sequence[str]) -> List[Prediction]:
        ...

    def generate(self, prompt: str, steps: int) -> Tuple[str, List[Dist]]:
        ...


class LocalModel:
    """Adaptador de TransformerModel: avaliação em lote, agrupada por comprimento"""

    uses_instructions = False

    def __init__(self, model: TransformerModel, chunk_elements: Optional[int] = None):
        self.model = model
        self.alphabet = model.alphabet
        self.chunk_elements = chunk_elements or get_settings().EVAL_CHUNK_ELEMENTS

    def predict(self, prompts: Sequence[str]) -> List[Prediction]:
        results: List[Optional[Prediction]] = [None] * len(prompts)
        by_length: Dict[int, List[int]] = defaultdict(list)
        for index, prompt in enumerate(prompts):
            by_length[len(prompt)].append(index)
        for length, indices in sorted(by_length.items()):
            chunk = max(1, self.chunk_elements // (length * length))
            for start in range(0, len(indices), chunk):
                part = indices[start:start + chunk]
                probs = self.model.last_probs(self.model.token_ids([prompts[i] for i in part]))
                for index, row in zip(part, probs):
                    dist = Dist(row)
                    results[index] = Prediction(self.alphabet.tokens[argmax_with_margin(dist)[0]], dist)
        return results

    def generate(self, prompt: str, steps: int) -> Tuple[str, List[Dist]]:
        return decode_with_trace(self.model, prompt, steps)


def as_next_token_model(model) -> NextTokenModel:
    """TransformerModel ou EndpointConfig -> NextTokenModel; outros passam direto"""
    if isinstance(model, TransformerModel):
        return LocalModel(model)
    from app.models.schemas import EndpointConfig

    if isinstance(model, EndpointConfig):
        from app.models.remote_client import RemoteNextTokenModel

        return RemoteNextTokenModel(model)
    return model


def with_instruction(model: NextTokenModel, instruction: str, payload: str) -> str:
    return f"{instruction} {payload}" if model.uses_instructions else payload


# ---------------------------------------------------------------------------
# Next-token sensitivity
# ---------------------------------------------------------------------------

NTS_COLUMNS = ("gamma", "length", "count", "samples", "nts", "seed")


@dataclass
class NTSResult:
    gamma: float
    length: int
    count: int
    samples: int
    nts: int
    seed: int
    base_token: str
    tokens: List[str] = field(default_factory=list)

    def to_row(self) -> Dict:
        return {c: getattr(self, c) for c in NTS_COLUMNS}


def _check_gamma(gamma: float) -> None:
    if not 0 < gamma <= 0.5:
        raise PreconditionError(f"gamma must lie in (0, 1/2], got {gamma}")


def nts_zero(model, gammas: Sequence[float] = DEFAULT_GAMMAS, samples: int = DEFAULT_SAMPLES,
             length: int = DEFAULT_LENGTH, seed: int = 0) -> List[NTSResult]:
    """
    NTS_gamma: quantas de `samples` perturbações de 0^length mudam o token guloso

    Cada amostra perturba max(1, floor(gamma (length - 1))) posições, nunca a última.
    """
    for gamma in gammas:
        _check_gamma(gamma)
    if length < 2:
        raise PreconditionError(f"length must be >= 2, got {length}")
    model = as_next_token_model(model)
    rng = RngStream(seed)
    base = "0" * length
    base_token = model.predict([with_instruction(model, NTS_INSTRUCTION, base)])[0].token
    results = []
    for g, gamma in enumerate(gammas):
        count = perturbation_count(gamma, length)
        prompts = [
            with_instruction(model, NTS_INSTRUCTION, perturb(base, count, rng.fork(g, s), PerturbationRule.FLIP_BINARY)[0])
            for s in range(samples)
        ]
        tokens = [p.token for p in model.predict(prompts)]
        nts = sum(token != base_token for token in tokens)
        results.append(NTSResult(gamma, length, count, samples, nts, seed, base_token, tokens))
        logger.info(f"NTS gamma={gamma}: {nts}/{samples} (count={count})")
    return results


POSITIONAL_COLUMNS = ("u", "v", "gamma", "length", "count", "samples", "nts", "seed")


@dataclass
class PositionalNTSResult:
    u: float
    v: float
    gamma: float
    length: int
    count: int
    samples: int
    nts: int
    seed: int
    positions: List[Tuple[int, ...]] = field(default_factory=list)

    def to_row(self) -> Dict:
        return {c: getattr(self, c) for c in POSITIONAL_COLUMNS}


def nts_positional(model, shapes: Sequence[Tuple[float, float]] = DEFAULT_SHAPES, gamma: float = 0.05,
                   samples: int = DEFAULT_SAMPLES, length: int = DEFAULT_LENGTH,
                   seed: int = 0) -> List[PositionalNTSResult]:
    """NTS com posições sorteadas pela Beta-Binomial sobre 1..length-1"""
    _check_gamma(gamma)
    if length < 2:
        raise PreconditionError(f"length must be >= 2, got {length}")
    for u, v in shapes:
        if u <= 0 or v <= 0:
            raise PreconditionError(f"Beta-Binomial shapes must be positive, got ({u}, {v})")
    model = as_next_token_model(model)
    rng = RngStream(seed)
    base = "0" * length
    base_token = model.predict([with_instruction(model, NTS_INSTRUCTION, base)])[0].token
    count = perturbation_count(gamma, length)
    results = []
    for k, (u, v) in enumerate(shapes):
        plans = [sample_positions_betabinomial(count, length - 1, u, v, rng.fork(k, s)) for s in range(samples)]
        prompts = [
            with_instruction(model, NTS_INSTRUCTION,
                             perturb_at(base, positions, rng.fork(k, s, 1), PerturbationRule.FLIP_BINARY)[0])
            for s, positions in enumerate(plans)
        ]
        nts = sum(p.token != base_token for p in model.predict(prompts))
        results.append(PositionalNTSResult(u, v, gamma, length, count, samples, nts, seed, plans))
        logger.info(f"Positional NTS u={u} v={v}: {nts}/{samples}")
    return results


# ---------------------------------------------------------------------------
# Periodic continuation
# ---------------------------------------------------------------------------

PERIODIC_COLUMNS = ("p", "r", "steps", "success", "certainty", "first_mismatch", "generated")


@dataclass
class PeriodicResult:
    p: int
    r: int
    steps: int
    success: bool
    certainty: float
    first_mismatch: Optional[int]
    generated: str

    def to_row(self) -> Dict:
        return {c: getattr(self, c) for c in PERIODIC_COLUMNS}


def periodic_continuation(p: int, r: int, steps: int) -> str:
    prompt_length = r * p + 1
    return Periodic("0" * (p - 1) + "1").prefix(prompt_length + steps)[prompt_length:]


def periodic_eval_one(model, p: int, r: int, steps: int = DEFAULT_STEPS) -> PeriodicResult:
    if p < 2 or r < 1:
        raise PreconditionError(f"Need p >= 2 and r >= 1, got p={p}, r={r}")
    if steps < 0:
        raise PreconditionError(f"steps must be >= 0, got {steps}")
    model = as_next_token_model(model)
    payload = beta_block(p, r)
    prompt = with_instruction(model, PERIODIC_INSTRUCTION, payload)
    generated, dists = model.generate(prompt, steps)
    expected = periodic_continuation(p, r, steps)
    mismatches = [i for i, (a, b) in enumerate(zip(generated, expected)) if a != b]
    first_mismatch = mismatches[0] if mismatches else None
    if first_mismatch is None and len(generated) != len(expected):
        first_mismatch = min(len(generated), len(expected))
    index = min(p - 2, steps)
    if index < len(dists):
        dist = dists[index]
    else:
        dist = model.predict([prompt + generated[:index]])[0].dist
    certainty = argmax_with_margin(dist)[1]
    return PeriodicResult(p, r, steps, first_mismatch is None, certainty, first_mismatch, generated)


def periodic_eval(model, periods: Sequence[int] = tuple(range(2, 41)), reps: Sequence[int] = DEFAULT_REPS,
                  steps: int = DEFAULT_STEPS, seed: int = 0) -> List[PeriodicResult]:
    """
    Gera `steps` tokens após beta_block(p, r); sucesso = continuação periódica exata

    Decodificação gulosa; `seed` só entra no manifesto.
    """
    model = as_next_token_model(model)
    results = []
    for p in periods:
        for r in reps:
            result = periodic_eval_one(model, p, r, steps)
            logger.info(f"Periodic p={p} r={r}: {'success' if result.success else 'failure'} "
                        f"certainty={result.certainty:.6f}")
            results.append(result)
    return results


@dataclass
class CriticalPeriodResult:
    critical: Optional[int]
    results: List[PeriodicResult]


def critical_period(model, r: int = 10, p_max: int = 40, steps: int = DEFAULT_STEPS, seed: int = 0,
                    stop_at_first: bool = False) -> CriticalPeriodResult:
    """Menor p em 2..p_max sem sucesso (None se todos passam)"""
    if p_max < 2:
        raise PreconditionError(f"p_max must be >= 2, got {p_max}")
    model = as_next_token_model(model)
    critical = None
    results = []
    for p in range(2, p_max + 1):
        result = periodic_eval_one(model, p, r, steps)
        results.append(result)
        if not result.success and critical is None:
            critical = p
            logger.info(f"Critical period found: p={p}")
            if stop_at_first:
                break
    return CriticalPeriodResult(critical, results)


# ---------------------------------------------------------------------------
# Continuity
# ---------------------------------------------------------------------------

MODULUS_COLUMNS = ("n", "gamma", "count", "d_h", "samples", "d_exact", "d_max", "seed")


@dataclass
class ModulusCell:
    n: int
    gamma: float
    count: int
    d_h: float
    samples: int
    d_exact: float
    d_max: float
    seed: int

    def to_row(self) -> Dict:
        return asdict(self)


def _nested_prompts(base: str, counts: Sequence[int], samples: int, rng: RngStream) -> List[List[str]]:
    """prompts[g][s]: as posições de contagens menores são subconjuntos das maiores"""
    n = len(base)
    grid = [[base] * samples for _ in counts]
    for s in range(samples):
        order = rng.fork(s).generator().permutation(n - 1) + 1
        for g, count in enumerate(counts):
            if count:
                grid[g][s] = perturb_at(base, order[:count].tolist(), rng.fork(s, 1),
                                        PerturbationRule.FLIP_BINARY)[0]
    return grid


def _distances(model: NextTokenModel, base: str, prompts: Sequence[str], base_dist: Dist) -> List[float]:
    pending = [i for i, p in enumerate(prompts) if p != base]
    distances = [0.0] * len(prompts)
    if pending:
        for i, prediction in zip(pending, model.predict([prompts[i] for i in pending])):
            distances[i] = linf_distance(prediction.dist.probs, base_dist.probs)
    return distances


def continuity_modulus(model, gammas: Sequence[float] = (1 / 64, 1 / 16, 1 / 4),
                       ns: Sequence[int] = (64, 256, 1024), samples: int = 20, seed: int = 0,
                       base_spec: Optional[SequenceSpec] = None) -> List[ModulusCell]:
    """
    D(gamma, n) = max ||T(alpha) - T(beta)|| sobre pares com o mesmo último token

    beta perturba floor(gamma (n - 1)) posições de alpha; d_exact é o máximo
    nessa distância, d_max o máximo acumulado sobre gamma' <= gamma.
    """
    for gamma in gammas:
        if not 0 <= gamma <= 1:
            raise PreconditionError(f"gamma must lie in [0, 1], got {gamma}")
    model = as_next_token_model(model)
    base_spec = base_spec or Constant("0")
    rng = RngStream(seed)
    ordered = sorted(gammas)
    cells = []
    for ni, n in enumerate(ns):
        if n < 2:
            raise PreconditionError(f"n must be >= 2, got {n}")
        base = base_spec.prefix(n)
        base_dist = model.predict([base])[0].dist
        counts = [exact_count(gamma, n) for gamma in ordered]
        grid = _nested_prompts(base, counts, samples, rng.fork(ni))
        exact = [max(_distances(model, base, row, base_dist), default=0.0) for row in grid]
        running = list(accumulate(exact, max))
        for gamma, count, d_exact, d_max in zip(ordered, counts, exact, running):
            cells.append(ModulusCell(n, gamma, count, count / n, samples, d_exact, d_max, seed))
            logger.info(f"Modulus n={n} gamma={gamma}: D={d_max:.3e}")
    return cells


SCATTER_COLUMNS = ("count", "sample", "d_h", "distance", "within_delta", "seed")


@dataclass
class ScatterPoint:
    count: int
    sample: int
    d_h: float
    distance: float
    within_delta: bool
    seed: int

    def to_row(self) -> Dict:
        return asdict(self)


def continuity_scatter(model, counts: Sequence[int] = (1, 2, 5, 10, 20, 30, 40, 49), samples: int = 10,
                       length: int = 100, delta: float = 0.1, seed: int = 0) -> List[ScatterPoint]:
    """Pares (d_H, ||T(alpha) - T(beta)||) para a base 0^length"""
    model = as_next_token_model(model)
    rng = RngStream(seed)
    base = "0" * length
    base_dist = model.predict([base])[0].dist
    points = []
    for ci, count in enumerate(counts):
        prompts = [perturb(base, count, rng.fork(ci, s), PerturbationRule.FLIP_BINARY)[0] for s in range(samples)]
        for s, distance in enumerate(_distances(model, base, prompts, base_dist)):
            d_h = count / length
            points.append(ScatterPoint(count, s, d_h, distance, d_h <= delta, seed))
    return points


@dataclass
class SimMeasure:
    value: float
    distances: List[float]


def sim_measure(xs, x_hats) -> SimMeasure:
    """
    Menor delta com ||x_i - x^_i|| <= delta em pelo menos (1 - delta) n posições

    delta* = min_k max(d_(k), (n - k) / n), d ordenadas, d_(0) = 0.
    """
    if len(xs) != len(x_hats):
        raise DimensionMismatchError(f"Length mismatch: {len(xs)} vs {len(x_hats)}")
    n = len(xs)
    if n < 1:
        raise DimensionMismatchError("sim-measure needs n >= 1")
    distances = [linf_distance(a, b) for a, b in zip(xs, x_hats)]
    ordered = [0.0] + sorted(distances)
    value = min(max(ordered[k], (n - k) / n) for k in range(n + 1))
    return SimMeasure(value, distances)


# ---------------------------------------------------------------------------
# Collapse and isolation
# ---------------------------------------------------------------------------

COLLAPSE_COLUMNS = ("gamma", "n", "count", "samples", "agreement", "seed")


@dataclass
class CollapseRow:
    gamma: float
    n: int
    count: int
    samples: int
    agreement: float
    seed: int

    def to_row(self) -> Dict:
        return asdict(self)


def collapse_probe(model, spec: SequenceSpec, gammas: Sequence[float] = DEFAULT_GAMMAS, samples: int = 100,
                   n: int = 190, seed: int = 0, epsilon: float = 0.1, n0: int = 1) -> List[CollapseRow]:
    """
    Fração de prompts perturbados cujo token guloso é o próximo símbolo de `spec`

    Modelos locais passam antes por verify_eventual_learning(spec, epsilon, n0, n);
    remotos só pela predição do prefixo sem perturbação.
    """
    local = model.model if isinstance(model, LocalModel) else model
    model = as_next_token_model(model)
    payload = spec.prefix(n)
    truth = spec.symbol(n + 1)
    if isinstance(local, TransformerModel):
        witness = verify_eventual_learning(local, spec, epsilon, n0, n)
        if not witness.learned:
            logger.warning(f"Model does not learn the target with margin {epsilon} on [{n0}, {n}] "
                           f"(first failure at n={witness.first_failing_n}); agreement is not a collapse")
    elif model.predict([payload])[0].token != truth:
        logger.warning(f"Model does not predict {truth!r} after the unperturbed prefix; agreement is not a collapse")
    ordered = sorted(gammas)
    counts = [exact_count(gamma, n) for gamma in ordered]
    grid = _nested_prompts(payload, counts, samples, RngStream(seed))
    rows = []
    for gamma, count, prompts in zip(ordered, counts, grid):
        agree = sum(p.token == truth for p in model.predict(prompts))
        rows.append(CollapseRow(gamma, n, count, samples, agree / samples, seed))
    return rows


ISOLATION_COLUMNS = ("k", "verdict", "first_failing_n", "first_one_n", "horizon")


@dataclass
class IsolationRow:
    k: int
    verdict: str
    first_failing_n: Optional[int]
    first_one_n: int
    horizon: int

    def to_row(self) -> Dict:
        return asdict(self)


@dataclass
class IsolationReport:
    baseline: LearnabilityWitness
    rows: List[IsolationRow]

    @property
    def all_refuted(self) -> bool:
        return all(row.verdict == REFUTED for row in self.rows)


def isolation_demo(model: TransformerModel, ks: Sequence[int] = (2, 4, 8, 16, 32), horizon: int = 256,
                   epsilon: float = 0.1, n0: int = 1) -> IsolationReport:
    """
    Um modelo que aprende 0^omega não aprende (0^{k-1} 1)^omega: verifica cada k

    first_one_n = k - 1 é o prefixo após o qual o primeiro 1 é devido.
    """
    baseline = verify_eventual_learning(model, Constant("0"), epsilon, n0, horizon)
    if not baseline.learned:
        logger.warning("Model does not learn the all-zero sequence; isolation demo runs without its premise")
    rows = []
    for k in ks:
        if k < 2:
            raise PreconditionError(f"k must be >= 2, got {k}")
        witness = verify_eventual_learning(model, Periodic("0" * (k - 1) + "1"), epsilon, n0, horizon)
        rows.append(IsolationRow(k, witness.verdict, witness.first_failing_n, k - 1, horizon))
    return IsolationReport(baseline, rows)


# ---------------------------------------------------------------------------
# ssmax comparison
# ---------------------------------------------------------------------------

SSMAX_COLUMNS = ("gamma", "nts_base", "nts_scaled", "difference", "samples", "seed")


@dataclass
class SSMaxRow:
    gamma: float
    nts_base: int
    nts_scaled: int
    difference: int
    samples: int
    seed: int

    def to_row(self) -> Dict:
        return asdict(self)


def same_except_weight_kind(a: TransformerModel, b: TransformerModel) -> bool:
    plain_a, plain_b = strip_ssmax(a), strip_ssmax(b)
    if plain_a.config() != plain_b.config():
        return False
    state_a, state_b = plain_a.state_dict(), plain_b.state_dict()
    return state_a.keys() == state_b.keys() and all(torch.equal(state_a[k], state_b[k]) for k in state_a)


def ssmax_compare(base: TransformerModel, scaled: TransformerModel, gammas: Sequence[float] = DEFAULT_GAMMAS[1:],
                  samples: int = DEFAULT_SAMPLES, length: int = DEFAULT_LENGTH,
                  seed: int = 0) -> Tuple[List[SSMaxRow], float]:
    """
    NTS por gamma para um par de modelos que só diferem no tipo de peso

    Returns:
        (linhas, diferença média nts_scaled - nts_base)

    Raises:
        ModelConfigError: modelos diferem além do tipo de peso
    """
    if not same_except_weight_kind(base, scaled):
        raise ModelConfigError("ssmax comparison needs models identical except for the weight kind")
    first = nts_zero(base, gammas, samples, length, seed)
    second = nts_zero(scaled, gammas, samples, length, seed)
    rows = [
        SSMaxRow(a.gamma, a.nts, b.nts, b.nts - a.nts, samples, seed)
        for a, b in zip(first, second)
    ]
    mean = float(np.mean([row.difference for row in rows])) if rows else 0.0
    logger.info(f"ssmax mean NTS difference: {mean}")
    return rows, mean
