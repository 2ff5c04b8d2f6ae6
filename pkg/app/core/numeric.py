"""
Numeric kernel: l-infinity distance, stable softmax, distributions over an
alphabet and splittable seeded random streams.
"""
from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple, Union
import logging

import numpy as np
import torch
from scipy.special import softmax as _stable_softmax

from app.core.exceptions import DimensionMismatchError, InvalidDistributionError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DIST_TOLERANCE = 1e-9

ArrayLike = Union[Sequence[float], np.ndarray, torch.Tensor]


def as_vector(values: ArrayLike) -> np.ndarray:
    """
    Converte entrada em vetor float64 1-D

    Args:
        values: lista, ndarray ou tensor

    Returns:
        np.ndarray: cópia float64
    """
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    vector = np.array(values, dtype=np.float64).reshape(-1)
    if vector.size == 0:
        raise DimensionMismatchError("Vector must have dimension >= 1")
    return vector


def linf_distance(u: ArrayLike, v: ArrayLike) -> float:
    """
    Distância l-infinito: max_i |u_i - v_i|

    Raises:
        DimensionMismatchError: se as dimensões forem diferentes
    """
    a, b = as_vector(u), as_vector(v)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.max(np.abs(a - b)))


class Dist:
    """
    Probability vector over an alphabet (indexed by token index).

    Entries are clipped to [0, 1] after validation; the array is read-only.
    """

    __slots__ = ("probs",)

    def __init__(self, probs: ArrayLike):
        arr = as_vector(probs)
        if not np.all(np.isfinite(arr)):
            raise InvalidDistributionError("Distribution has non-finite entries")
        if np.any(arr < -DIST_TOLERANCE):
            raise InvalidDistributionError(f"Negative probability: {arr.min()}")
        total = float(arr.sum())
        if abs(total - 1.0) > DIST_TOLERANCE:
            raise InvalidDistributionError(f"Probabilities sum to {total!r}, expected 1")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        self.probs = arr

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __getitem__(self, index: int) -> float:
        return float(self.probs[index])

    def __iter__(self) -> Iterator[float]:
        return iter(self.probs.tolist())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dist):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __repr__(self) -> str:
        return f"Dist({self.probs.tolist()})"

    def distance(self, other: "Dist") -> float:
        return linf_distance(self.probs, other.probs)


def softmax(logits: ArrayLike) -> Dist:
    """Softmax com subtração do máximo (estável para |logit| grande)"""
    return Dist(_stable_softmax(as_vector(logits)))


def argmax_with_margin(dist: Union[Dist, ArrayLike]) -> Tuple[int, float]:
    """
    Índice do maior valor e margem top1 - top2

    Empates resolvidos pelo menor índice de token.

    Returns:
        Tuple[int, float]: (índice, margem)
    """
    probs = dist.probs if isinstance(dist, Dist) else as_vector(dist)
    top = int(np.argmax(probs))
    if probs.shape[0] == 1:
        return top, float(probs[0])
    rest = np.delete(probs, top)
    return top, float(probs[top] - rest.max())


@dataclass(frozen=True)
class RngStream:
    """
    Seeded random stream. `fork` derives independent child streams, so
    per-sample draws do not depend on evaluation order.
    """

    seed: int
    stream: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")

    def fork(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(sequence))

    def uniform(self, size: int) -> np.ndarray:
        return self.generator().random(size)
