# Générateur pseudo-aléatoire déterministe à sous-flux indépendants
import logging
from typing import Sequence, Tuple, Union

import numpy as np
import torch

from .errors import ParameterError

logger = logging.getLogger(__name__)

Shape = Union[int, Sequence[int]]

_SEED_MASK = (1 << 64) - 1


class SeededRng:
    """Générateur Philox-4x64-10 identifié par (seed, stream_id, chemin de sous-flux).

    Deux instances construites avec les mêmes identifiants produisent les mêmes
    séquences, quelle que soit la plateforme. Une instance n'est pas partageable
    entre threads : chaque worker reçoit son propre sous-flux via `substream`.
    """

    algorithm_id = "philox4x64-10"

    def __init__(self, seed: int, stream_id: int = 0, path: Tuple[int, ...] = ()):
        self.seed = int(seed) & _SEED_MASK
        self.stream_id = int(stream_id) & _SEED_MASK
        self.path = tuple(int(k) & _SEED_MASK for k in path)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, *self.path))
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"

    def substream(self, key: int) -> "SeededRng":
        """Sous-flux indépendant, indexé par un entier (pas, chunk, image...)"""
        return SeededRng(self.seed, self.stream_id, self.path + (key,))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def normal(self, shape: Shape, mean: float = 0.0, std: float = 1.0) -> torch.Tensor:
        draws = self._generator.standard_normal(size=shape)
        return torch.from_numpy(mean + std * draws).to(torch.float64)

    def uniform(self, low: float, high: float, shape: Shape = ()) -> torch.Tensor:
        return torch.from_numpy(np.asarray(self._generator.uniform(low, high, size=shape), dtype=np.float64))

    def poisson(self, rate: torch.Tensor) -> torch.Tensor:
        counts = self._generator.poisson(rate.detach().cpu().numpy())
        return torch.from_numpy(counts.astype(np.float64))

    def integers(self, low: int, high: int, shape: Shape = ()) -> np.ndarray:
        return self._generator.integers(low, high, size=shape)

    def uniform_scalar(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self._generator.uniform(low, high))

    def coin(self, p: float = 0.5) -> bool:
        return bool(self._generator.random() < p)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)


def gaussian_samples(rng: SeededRng, shape: Shape, mean: float = 0.0, std: float = 1.0) -> torch.Tensor:
    """Échantillons i.i.d. N(mean, std²) en double précision"""
    if std < 0:
        raise ParameterError(f"Écart-type négatif: {std}")
    return rng.normal(shape, mean=mean, std=std)
