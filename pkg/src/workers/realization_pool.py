# Pool d'exécution des réalisations de Monte-Carlo par blocs
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import torch

from ..config.settings import settings
from ..core.errors import ParameterError
from ..core.rng import SeededRng

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Job d'un bloc : (indice du bloc, nombre de réalisations, sous-flux dédié) -> résultat
ChunkJob = Callable[[int, int, SeededRng], T]


def chunk_sizes(total: int, chunk_size: int) -> List[int]:
    if total < 0:
        raise ParameterError(f"Nombre de réalisations négatif: {total}")
    full, rest = divmod(total, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def pairwise_sum(values: Sequence[torch.Tensor]) -> torch.Tensor:
    """Somme par arbre binaire dans l'ordre des blocs (indépendante du nombre de threads)"""
    if not values:
        raise ParameterError("Somme d'une liste vide")
    items = list(values)
    while len(items) > 1:
        merged = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


class RealizationPool:
    """Répartit N réalisations en blocs ; le bloc k consomme toujours le sous-flux k"""

    def __init__(self, threads: Optional[int] = None, chunk_size: Optional[int] = None):
        self.threads = threads or settings.threads or 1
        self.chunk_size = chunk_size or settings.mc_chunk_size
        if self.threads < 1 or self.chunk_size < 1:
            raise ParameterError(f"threads={self.threads} et chunk_size={self.chunk_size} doivent être ≥ 1")

    def map_chunks(self, job: ChunkJob, total: int, rng: SeededRng) -> List[T]:
        sizes = chunk_sizes(total, self.chunk_size)
        logger.debug(f"{total} réalisations en {len(sizes)} blocs sur {self.threads} thread(s)")
        if self.threads == 1 or len(sizes) <= 1:
            return [job(k, size, rng.substream(k)) for k, size in enumerate(sizes)]

        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            futures = [executor.submit(job, k, size, rng.substream(k)) for k, size in enumerate(sizes)]
            return [future.result() for future in futures]
