# Fonctions de coût d'entraînement (moyennes par pixel)
import logging
from typing import Optional, Sequence, Union

import torch

from ..core.errors import ContractError, ParameterError
from ..core.tensors import TensorImage, check_same_shape
from ..noise_model.sampler import CorruptedBatch, CorruptedSample
from .operators import DeblurOperator
from .perturbation import Denoiser, PerturbationBatch, plc_penalty_batch

logger = logging.getLogger(__name__)

BatchLike = Union[CorruptedBatch, Sequence[CorruptedSample]]


def _as_batch(batch: BatchLike) -> CorruptedBatch:
    if isinstance(batch, CorruptedBatch):
        if len(batch) == 0:
            raise ParameterError("Lot vide")
        return batch
    return CorruptedBatch.stack(list(batch))


def empirical_loss(model: Denoiser, batch: BatchLike) -> torch.Tensor:
    """Moyenne de (R(ŷ) − (y − z/α))² sur le lot et les pixels"""
    batch = _as_batch(batch)
    return torch.mean((model(batch.y_hat) - batch.target) ** 2)


def supervised_loss(model: Denoiser, batch: BatchLike) -> torch.Tensor:
    """Référence supervisée : moyenne de (R(y) − x)²"""
    batch = _as_batch(batch)
    if batch.x is None:
        raise ContractError("La perte supervisée requiert les images propres")
    return torch.mean((model(batch.y) - batch.x) ** 2)


def total_denoise_loss(
    model: Denoiser,
    batch: BatchLike,
    gamma: float,
    perturbations: Optional[PerturbationBatch] = None,
) -> torch.Tensor:
    """Perte empirique + γ · moyenne des pénalités de linéarité partielle"""
    if gamma < 0:
        raise ParameterError(f"gamma doit être ≥ 0, reçu {gamma}")
    loss = empirical_loss(model, batch)
    if gamma == 0:
        return loss
    if perturbations is None:
        raise ContractError("gamma > 0 requiert des paires de perturbation")
    return loss + gamma * torch.mean(plc_penalty_batch(model, perturbations))


def deblur_loss(model: Denoiser, operator: DeblurOperator, batch: BatchLike) -> torch.Tensor:
    """Moyenne de (A·R(ŷ) − (y − z/α))²"""
    batch = _as_batch(batch)
    return torch.mean((operator(model(batch.y_hat)) - batch.target) ** 2)


def proxy_loss(
    model: Denoiser,
    y: TensorImage,
    proxy_operator: DeblurOperator,
    proxy_noise: TensorImage,
    x_prox: Optional[TensorImage] = None,
) -> torch.Tensor:
    """‖R(A_prox·x_prox + n_prox) − x_prox‖²/m avec x_prox = R(y) détaché.

    Fournir `x_prox` fige la pseudo-vérité terrain (oracle de gradient).
    """
    if x_prox is None:
        with torch.no_grad():
            x_prox = model(y)
    x_prox = x_prox.detach()
    check_same_shape(x_prox, proxy_noise, "x_prox et n_prox")
    y_prox = proxy_operator(x_prox) + proxy_noise
    return torch.mean((model(y_prox) - x_prox) ** 2)
