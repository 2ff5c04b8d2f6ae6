"""
Next-token training of the standard compact instantiation, with exact
autograd gradients and a central finite-difference check.
"""
from dataclasses import dataclass, field
from math import cos, pi
from typing import Callable, Dict, List, Sequence, Tuple
import logging

import numpy as np
import torch

from app import __version__
from app.core.exceptions import NonFiniteError, PreconditionError, TrainingDivergedError
from app.core.numeric import RngStream
from app.core.sequences import Alphabet, SequenceSpec, parse_sequence_spec
from app.core.transformer import TransformerModel, build_standard_model, initialize_parameters
from app.models.schemas import RunManifest
from app.utils.results import config_hash, utc_now

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_ERROR_FLOOR = 1e-4


@dataclass
class Batch:
    """inputs[b][j] -> targets[b][j] = inputs[b][j+1] da janela original"""

    inputs: torch.Tensor
    targets: torch.Tensor

    @classmethod
    def from_windows(cls, windows: Sequence[str], alphabet: Alphabet) -> "Batch":
        lengths = {len(w) for w in windows}
        if len(lengths) != 1 or min(lengths) < 2:
            raise PreconditionError("Windows must share a length >= 2")
        ids = torch.tensor([alphabet.encode(w) for w in windows], dtype=torch.long)
        return cls(ids[:, :-1], ids[:, 1:])

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class GradientRecord:
    loss: float
    grads: Dict[str, np.ndarray]
    clamp_hits: int = 0

    def norm(self) -> float:
        return float(np.sqrt(sum(float((g ** 2).sum()) for g in self.grads.values())))


def loss_tensor(model: TransformerModel, batch: Batch) -> torch.Tensor:
    log_probs = model(batch.inputs)
    picked = log_probs.gather(-1, batch.targets[..., None])[..., 0]
    return -picked.mean()


def loss_next_token(model: TransformerModel, batch: Batch) -> float:
    """Entropia cruzada média sobre todas as posições e exemplos"""
    with torch.no_grad():
        return float(loss_tensor(model, batch))


def grad(model: TransformerModel, batch: Batch) -> GradientRecord:
    """
    Derivadas reverse-mode da loss para cada parâmetro

    Scores fora do clamp têm subgradiente 0; o número deles é reportado.
    """
    names, params = zip(*model.named_parameters())
    loss = loss_tensor(model, batch)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    record = GradientRecord(
        float(loss.detach()),
        {
            name: (g.detach().numpy().copy() if g is not None else np.zeros(tuple(p.shape)))
            for name, p, g in zip(names, params, grads)
        },
        model.clamp_hits(batch.inputs),
    )
    for name, g in record.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for {name}")
    if record.clamp_hits:
        logger.warning(f"Score clamp active on {record.clamp_hits} entries; gradient uses subgradient 0 there")
    return record


@dataclass
class FiniteDifferenceReport:
    max_relative_error: float
    checked: List[Tuple[str, int, float, float]] = field(default_factory=list)


def finite_difference_check(model: TransformerModel, batch: Batch, rng: RngStream, samples: int = 200,
                            step: float = FD_STEP) -> FiniteDifferenceReport:
    """
    Compara o gradiente analítico com diferenças centrais em entradas sorteadas

    Erro relativo = |analítico - numérico| / max(|analítico|, |numérico|, 1e-4).
    """
    record = grad(model, batch)
    params = dict(model.named_parameters())
    names = sorted(name for name, p in params.items() if p.numel() > 0)
    gen = rng.generator()
    report = FiniteDifferenceReport(0.0)
    for _ in range(samples):
        name = names[int(gen.integers(len(names)))]
        param = params[name]
        flat = int(gen.integers(param.numel()))
        with torch.no_grad():
            view = param.view(-1)
            original = float(view[flat])
            view[flat] = original + step
            upper = loss_next_token(model, batch)
            view[flat] = original - step
            lower = loss_next_token(model, batch)
            view[flat] = original
        numeric = (upper - lower) / (2 * step)
        analytic = float(record.grads[name].reshape(-1)[flat])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FD_ERROR_FLOOR)
        report.checked.append((name, flat, analytic, numeric))
        report.max_relative_error = max(report.max_relative_error, error)
    return report


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def mixture_specs(config) -> Tuple[List[SequenceSpec], np.ndarray]:
    specs = [parse_sequence_spec(entry.spec) for entry in config.mixture]
    weights = np.array([entry.weight for entry in config.mixture], dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise PreconditionError("Mixture weights must be nonnegative with a positive sum")
    return specs, weights / weights.sum()


def sample_batch(config, specs: Sequence[SequenceSpec], weights: np.ndarray, rng: RngStream,
                 alphabet: Alphabet) -> Batch:
    """Janelas de comprimento context + 1 em offsets aleatórios da mistura"""
    gen = rng.generator()
    windows = []
    for _ in range(config.batch_size):
        spec = specs[int(gen.choice(len(specs), p=weights))]
        offset = int(gen.integers(0, config.window_offset_max + 1))
        windows.append(spec.prefix(offset + config.context + 1)[offset:])
    return Batch.from_windows(windows, alphabet)


def _schedule(config) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if config.warmup and step < config.warmup:
            return (step + 1) / config.warmup
        if config.schedule == "cosine" and config.steps > config.warmup:
            progress = (step - config.warmup) / (config.steps - config.warmup)
            return 0.5 * (1.0 + cos(pi * progress))
        return 1.0

    return factor


@dataclass
class TrainResult:
    model: TransformerModel
    losses: List[float]
    manifest: Dict


def build_trainable(config) -> TransformerModel:
    alphabet = Alphabet(tuple(config.alphabet))
    model = build_standard_model(
        alphabet, config.d, config.k, config.pe_kind, config.weight_kind, "residual-mlp",
        config.hidden, config.layer_norm,
    )
    initialize_parameters(model, RngStream(config.seed, (0,)))
    return model


def train(config, command_line: Sequence[str] = ()) -> TrainResult:
    """
    Gradiente descendente em minibatches, reprodutível a partir da seed

    Raises:
        TrainingDivergedError: loss NaN/inf
    """
    started = utc_now()
    model = build_trainable(config)
    specs, weights = mixture_specs(config)
    params = [p for p in model.parameters()]
    if config.optimizer == "sgd":
        optimizer = torch.optim.SGD(params, lr=config.lr)
    else:
        optimizer = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _schedule(config))
    data_rng = RngStream(config.seed, (1,))
    losses: List[float] = []

    logger.info(f"Training d={config.d} k={config.k} pe={config.pe_kind} for {config.steps} steps (seed={config.seed})")
    for step in range(config.steps):
        batch = sample_batch(config, specs, weights, data_rng.fork(step), model.alphabet)
        loss = loss_tensor(model, batch)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        losses.append(value)
        if config.log_every and (step + 1) % config.log_every == 0:
            hits = model.clamp_hits(batch.inputs)
            logger.info(f"step {step + 1}/{config.steps} loss={value:.6f}")
            if hits:
                logger.warning(f"Score clamp hit {hits} times at step {step + 1}")

    manifest = RunManifest(
        command_line=list(command_line),
        experiment="train",
        config_hash=config_hash(config.model_dump(mode="json")),
        seed=config.seed,
        code_version=__version__,
        started_at=started,
        finished_at=utc_now(),
        summary={"steps": config.steps, "final_loss": losses[-1] if losses else None},
    )
    return TrainResult(model, losses, manifest.model_dump(mode="json"))
