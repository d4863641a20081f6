# Métriques de qualité : PSNR et SSIM
import logging
import math
from typing import Callable, List, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field
from skimage.metrics import structural_similarity

from ..core.errors import ParameterError
from ..core.tensors import TensorImage, check_same_shape

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11


def psnr(a: TensorImage, b: TensorImage, peak: float = 1.0) -> float:
    """10·log10(peak²/MSE) ; +inf si les images sont identiques"""
    check_same_shape(a, b, "le PSNR")
    mse = float(torch.mean((a.detach().to(torch.float64) - b.detach().to(torch.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def _as_plane(image: TensorImage) -> np.ndarray:
    data = image.detach().to(torch.float64)
    if data.dim() == 3:
        if data.shape[0] != 1:
            raise ParameterError(f"SSIM monocanal uniquement, reçu {data.shape[0]} canaux")
        data = data[0]
    if data.dim() != 2:
        raise ParameterError(f"Forme invalide pour le SSIM: {tuple(image.shape)}")
    return data.numpy()


def ssim(a: TensorImage, b: TensorImage) -> float:
    """SSIM standard : fenêtre gaussienne 11×11 (σ = 1.5), K1 = 0.01, K2 = 0.03, dynamique 1"""
    check_same_shape(a, b, "le SSIM")
    plane_a, plane_b = _as_plane(a), _as_plane(b)
    if min(plane_a.shape) < SSIM_WINDOW:
        raise ParameterError(f"Image {plane_a.shape} trop petite pour une fenêtre {SSIM_WINDOW}x{SSIM_WINDOW}")
    return float(
        structural_similarity(
            plane_a, plane_b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


class MetricsReport(BaseModel):
    """PSNR et SSIM moyens sur un jeu d'images, détail par image"""

    psnr_db: float
    ssim: float = Field(ge=-1.0, le=1.0)
    per_image: List[List[float]] = Field(default_factory=list)


def evaluate(
    restore: Callable[[TensorImage], TensorImage],
    observed: Sequence[TensorImage],
    clean: Sequence[TensorImage],
) -> MetricsReport:
    """Évalue `restore` (sorties non bornées) sur des paires (observation, image propre)"""
    if len(observed) != len(clean) or not observed:
        raise ParameterError(f"{len(observed)} observations pour {len(clean)} images propres")
    rows = []
    with torch.no_grad():
        for y, x in zip(observed, clean):
            output = restore(y)
            rows.append([psnr(output, x), ssim(output, x)])
    values = np.asarray(rows)
    return MetricsReport(psnr_db=float(values[:, 0].mean()), ssim=float(values[:, 1].mean()), per_image=rows)
