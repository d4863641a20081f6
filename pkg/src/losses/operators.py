# Opérateurs de flou A (convolution 2-D à bords nuls) et noyaux de mouvement aléatoires
import logging
import math
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from ..core.errors import ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage

logger = logging.getLogger(__name__)


class DeblurOperator:
    """Convolution vraie (noyau retourné) avec bords nuls ; la forme est conservée.

    Le centre d'un noyau kh×kw est (kh//2, kw//2), y compris pour les tailles paires.
    """

    def __init__(self, kernel: Union[TensorImage, np.ndarray]):
        kernel = torch.as_tensor(kernel, dtype=torch.float64).detach().clone()
        if kernel.dim() != 2 or kernel.numel() == 0:
            raise ParameterError(f"Noyau 2-D attendu, reçu forme {tuple(kernel.shape)}")
        if not bool(torch.isfinite(kernel).all()):
            raise ParameterError("Noyau non fini")
        self.kernel = kernel

    @classmethod
    def identity(cls, size: int = 1) -> "DeblurOperator":
        kernel = torch.zeros(size, size, dtype=torch.float64)
        kernel[size // 2, size // 2] = 1.0
        return cls(kernel)

    @classmethod
    def box(cls, size: int = 3) -> "DeblurOperator":
        return cls(torch.full((size, size), 1.0 / (size * size), dtype=torch.float64))

    @property
    def shape(self):
        return tuple(self.kernel.shape)

    def is_symmetric(self, horizontal: bool = True, vertical: bool = True) -> bool:
        """Vrai si le noyau est invariant par les retournements demandés"""
        kernel = self.kernel
        if horizontal and not torch.equal(kernel, torch.flip(kernel, dims=(1,))):
            return False
        if vertical and not torch.equal(kernel, torch.flip(kernel, dims=(0,))):
            return False
        return True

    def __call__(self, x: TensorImage) -> TensorImage:
        single = x.dim() == 3
        batch = x.unsqueeze(0) if single else x
        if batch.dim() != 4:
            raise ParameterError(f"Image (C,H,W) ou (N,C,H,W) attendue, reçu {tuple(x.shape)}")
        kh, kw = self.shape
        height, width = batch.shape[-2:]
        if kh > height or kw > width:
            raise ParameterError(f"Noyau {kh}x{kw} plus grand que l'image {height}x{width}")

        channels = batch.shape[1]
        # Corrélation avec le noyau retourné = convolution
        weight = torch.flip(self.kernel, dims=(0, 1)).to(batch.dtype)
        weight = weight.expand(channels, 1, kh, kw)
        cy, cx = kh // 2, kw // 2
        padded = F.pad(batch, (kw - 1 - cx, cx, kh - 1 - cy, cy))
        out = F.conv2d(padded, weight, groups=channels)
        return out[0] if single else out


def random_motion_kernel(rng: SeededRng, size: int = 9, length: int = 12, turn_std: float = 0.6) -> DeblurOperator:
    """Noyau de bougé : marche aléatoire à pas unitaires, direction lentement variable,
    rastérisée bilinéairement sur une grille size×size puis normalisée à somme 1."""
    if size < 1 or length < 1:
        raise ParameterError(f"Taille ({size}) et longueur ({length}) doivent être ≥ 1")

    grid = np.zeros((size, size), dtype=np.float64)
    centre = (size - 1) / 2.0
    position = np.array([centre, centre])
    angle = float(rng.uniform_scalar(0.0, 2.0 * math.pi))
    turns = rng.normal((length,), std=turn_std).numpy()

    def splat(point: np.ndarray) -> None:
        py, px = np.clip(point, 0.0, size - 1)
        y0, x0 = int(math.floor(py)), int(math.floor(px))
        fy, fx = py - y0, px - x0
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                yy, xx = min(y0 + dy, size - 1), min(x0 + dx, size - 1)
                grid[yy, xx] += wy * wx

    splat(position)
    for turn in turns:
        angle += float(turn)
        position = np.clip(position + np.array([math.sin(angle), math.cos(angle)]), 0.0, size - 1)
        splat(position)

    return DeblurOperator(grid / grid.sum())
