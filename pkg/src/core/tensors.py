# Utilitaires sur les images tensorielles (float64, forme (C, H, W) ou (N, C, H, W))
import math
from typing import Sequence, Union

import numpy as np
import torch

from .errors import ParameterError

TensorImage = torch.Tensor

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float], float]


def as_image(data: ArrayLike, shape: Sequence[int] = None) -> TensorImage:
    """Conversion en tenseur float64 contigu, avec remise en forme optionnelle"""
    if isinstance(data, torch.Tensor):
        tensor = data.detach().to(torch.float64).clone()
    else:
        tensor = torch.as_tensor(np.asarray(data, dtype=np.float64)).clone()
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if tensor.numel() != math.prod(shape):
            raise ParameterError(f"{tensor.numel()} valeurs pour la forme {shape}")
        tensor = tensor.reshape(shape)
    return tensor.contiguous()


def check_finite(tensor: TensorImage, name: str = "tenseur") -> TensorImage:
    if not bool(torch.isfinite(tensor).all()):
        raise ParameterError(f"{name} contient des valeurs non finies")
    return tensor


def check_same_shape(a: TensorImage, b: TensorImage, what: str = "images") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ParameterError(f"Formes incompatibles pour {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def as_batch(tensor: TensorImage) -> TensorImage:
    """(C, H, W) → (1, C, H, W) ; (N, C, H, W) inchangé"""
    if tensor.dim() == 3:
        return tensor.unsqueeze(0)
    if tensor.dim() == 4:
        return tensor
    raise ParameterError(f"Image attendue en (C,H,W) ou (N,C,H,W), reçu {tuple(tensor.shape)}")


def pixel_count(tensor: TensorImage) -> int:
    """Nombre de pixels m d'une image (C·H·W), hors dimension de lot"""
    return int(math.prod(tensor.shape[-3:])) if tensor.dim() >= 3 else int(tensor.numel())


def inner(a: TensorImage, b: TensorImage) -> float:
    """Produit scalaire ⟨a, b⟩ à arrondi unique (somme exacte des produits)"""
    check_same_shape(a, b, "le produit scalaire")
    products = (a.detach() * b.detach()).reshape(-1).tolist()
    return math.fsum(products)


def per_pixel_mse(a: TensorImage, b: TensorImage) -> float:
    check_same_shape(a, b, "l'erreur quadratique")
    return float(torch.mean((a - b) ** 2))
