# Petit réseau convolutif débruiteur (DnCNN sans normalisation de lot)
import copy
import logging
import math
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from ..core.errors import ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage

logger = logging.getLogger(__name__)


class ModelArchitecture(BaseModel):
    """Hyperparamètres d'architecture, sérialisés dans le manifeste de checkpoint"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = Field(default=5, ge=2)
    width: int = Field(default=16, ge=1)
    kernel_size: int = Field(default=3, ge=1)
    channels: int = Field(default=1, ge=1)
    residual_skip: bool = True
    rectifier: bool = True

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size doit être impair (padding symétrique)")
        return value


class DenoiserModel(nn.Module):
    """Débruiteur R_θ : convolutions 'same' + ReLU, dernière couche linéaire.

    Avec `residual_skip`, la sortie vaut x − réseau(x). La dernière couche est
    initialisée à zéro : un modèle résiduel non entraîné est l'identité.
    """

    def __init__(self, architecture: Optional[ModelArchitecture] = None, rng: Optional[SeededRng] = None):
        super().__init__()
        self.architecture = architecture or ModelArchitecture()
        arch = self.architecture

        layers = []
        for index in range(arch.depth):
            in_channels = arch.channels if index == 0 else arch.width
            out_channels = arch.channels if index == arch.depth - 1 else arch.width
            layers.append(
                nn.Conv2d(in_channels, out_channels, arch.kernel_size,
                          padding=arch.kernel_size // 2, dtype=torch.float64)
            )
        self.layers = nn.ModuleList(layers)
        self.initialize(rng)

        logger.debug(f"Modèle initialisé: {arch.model_dump()} ({self.parameter_count()} paramètres)")

    def initialize(self, rng: Optional[SeededRng]) -> None:
        """Poids He-normaux tirés du flux `rng`, biais nuls, dernière couche nulle"""
        with torch.no_grad():
            for index, layer in enumerate(self.layers):
                layer.bias.zero_()
                is_last = index == len(self.layers) - 1
                if rng is None or is_last:
                    layer.weight.zero_()
                    continue
                fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                layer.weight.copy_(rng.substream(index).normal(tuple(layer.weight.shape), std=std))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def is_affine(self) -> bool:
        """Vrai si le modèle est affine en son entrée (aucune ReLU active)"""
        return not self.architecture.rectifier

    def network(self, x: TensorImage) -> TensorImage:
        out = x
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            out = F.conv2d(out, layer.weight, layer.bias, padding=layer.padding)
            if index < last and self.architecture.rectifier:
                out = torch.relu(out)
        return out

    def forward(self, x: TensorImage) -> TensorImage:
        single = x.dim() == 3
        batch = x.unsqueeze(0) if single else x
        if batch.dim() != 4:
            raise ParameterError(f"Entrée (C,H,W) ou (N,C,H,W) attendue, reçu {tuple(x.shape)}")
        if batch.shape[1] != self.architecture.channels:
            raise ParameterError(
                f"{batch.shape[1]} canaux en entrée, le modèle en attend {self.architecture.channels}"
            )
        k = self.architecture.kernel_size
        if batch.shape[2] < k or batch.shape[3] < k:
            raise ParameterError(f"Image {tuple(batch.shape[2:])} plus petite que le noyau {k}x{k}")

        out = self.network(batch)
        if self.architecture.residual_skip:
            out = batch - out
        return out[0] if single else out

    def snapshot(self) -> Dict[str, torch.Tensor]:
        """Copie détachée des paramètres (dernier état valide, lecture concurrente)"""
        return {name: p.detach().clone() for name, p in self.named_parameters()}

    def restore(self, state: Dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                p.copy_(state[name])

    def clone(self) -> "DenoiserModel":
        """Copie indépendante pour l'évaluation concurrente"""
        return copy.deepcopy(self)
