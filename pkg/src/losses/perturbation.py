# Paires de perturbations creuses pour la contrainte de linéarité partielle
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch

from ..core.errors import ContractError, ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage, check_same_shape
from ..noise_model.sampler import NoiseSpec, NoiseSpecs, sample_auxiliary, spec_at

logger = logging.getLogger(__name__)

GRID_CELL = 5
MIN_SPACING = 4
BETA_RANGE = (1.0, 1.5)
RANGE_MARGIN = 0.2
M_SIGMA_FACTOR = 0.1

Denoiser = Callable[[TensorImage], TensorImage]


@dataclass
class PerturbationPair:
    """q1 = ŷ − β1·q et q2 = ŷ + β2·q, avec τ1·q1 + τ2·q2 = anchor.

    `anchor` est recalculé à partir de la paire bornée par la même expression ;
    il coïncide avec ŷ à quelques ulps près et c'est en ce point que la
    pénalité évalue R.
    """
    q1: TensorImage
    q2: TensorImage
    tau1: float
    mask_M: TensorImage
    q: TensorImage
    beta1: float
    beta2: float
    anchor: TensorImage

    @property
    def tau2(self) -> float:
        return 1.0 - self.tau1

    @property
    def perturbed_count(self) -> int:
        return int(torch.count_nonzero(self.q))


def sparse_sites(shape: Tuple[int, int], rng: SeededRng) -> np.ndarray:
    """Sites (ligne, colonne) sur une grille 5×5 à décalage global et gigue {0,1}.

    Deux sites voisins sont à distance de Tchebychev ≥ 4 ; le nombre de sites
    est ensuite ramené à ⌈H·W/25⌉ par tirage sans remise.
    """
    height, width = shape
    gy, gx = (int(v) for v in rng.integers(0, GRID_CELL - 1, (2,)))
    rows = np.arange(gy, height, GRID_CELL)
    cols = np.arange(gx, width, GRID_CELL)
    if rows.size == 0 or cols.size == 0:
        return np.zeros((0, 2), dtype=np.int64)

    cy, cx = np.meshgrid(rows, cols, indexing="ij")
    jitter = rng.integers(0, 2, (2,) + cy.shape)
    sites = np.stack([cy + jitter[0], cx + jitter[1]], axis=-1).reshape(-1, 2)
    sites = sites[(sites[:, 0] < height) & (sites[:, 1] < width)]

    cap = math.ceil(height * width / GRID_CELL ** 2)
    if len(sites) > cap:
        keep = np.sort(rng.permutation(len(sites))[:cap])
        sites = sites[keep]
    return sites


def build_perturbation(
    y_hat: TensorImage,
    rng: SeededRng,
    sigma_max: float,
    value_bounds: Optional[Tuple[float, float]] = None,
    *,
    spec: Optional[NoiseSpec] = None,
    reference: Optional[TensorImage] = None,
) -> PerturbationPair:
    """Construit une paire (q1, q2) autour de ŷ (C, H, W).

    q suit la loi de z (celle de `spec`, évaluée sur `reference`, par défaut ŷ ;
    à défaut de `spec`, N(0, sigma_max²)), restreinte aux sites creux. q1 et q2
    sont bornés à [1.2a − 0.2b, 1.2b − 0.2a] en réduisant q.
    """
    if sigma_max <= 0:
        raise ParameterError(f"sigma_max doit être > 0, reçu {sigma_max}")
    if y_hat.dim() != 3:
        raise ParameterError(f"ŷ attendu en (C,H,W), reçu {tuple(y_hat.shape)}")
    y_hat = y_hat.detach()

    a, b = value_bounds if value_bounds is not None else (float(y_hat.min()), float(y_hat.max()))
    if a > b:
        raise ParameterError(f"Bornes inversées: a={a} > b={b}")
    low = (1.0 + RANGE_MARGIN) * a - RANGE_MARGIN * b
    high = (1.0 + RANGE_MARGIN) * b - RANGE_MARGIN * a

    beta1 = rng.uniform_scalar(*BETA_RANGE)
    beta2 = rng.uniform_scalar(*BETA_RANGE)
    tau1 = beta2 / (beta1 + beta2)
    tau2 = 1.0 - tau1

    # Paquet de sites commun aux canaux
    support = torch.zeros_like(y_hat, dtype=torch.bool)
    if a < b:
        sites = sparse_sites(tuple(y_hat.shape[-2:]), rng)
        if len(sites):
            rows = torch.from_numpy(sites[:, 0].astype(np.int64))
            cols = torch.from_numpy(sites[:, 1].astype(np.int64))
            support[:, rows, cols] = True
    if reference is None:
        reference = y_hat
    else:
        check_same_shape(reference, y_hat, "référence et ŷ")
    if spec is None:
        draws = sigma_max * rng.normal(tuple(y_hat.shape))
    else:
        draws = sample_auxiliary(spec, reference.detach(), rng)
    q = torch.where(support, draws, torch.zeros_like(draws))

    # Borne de |q| pour que q1 et q2 restent dans [low, high]
    room_low = torch.clamp(y_hat - low, min=0.0)
    room_high = torch.clamp(high - y_hat, min=0.0)
    upper = torch.minimum(room_low / beta1, room_high / beta2)
    lower = -torch.minimum(room_high / beta1, room_low / beta2)
    q = torch.minimum(torch.maximum(q, lower), upper)

    q1 = torch.clamp(y_hat - beta1 * q, low, high)
    q2 = torch.clamp(y_hat + beta2 * q, low, high)
    q = (q2 - q1) / (beta1 + beta2)
    anchor = tau1 * q1 + tau2 * q2

    active = q != 0
    mask = torch.where(active, 1.0 / (torch.abs(q1 - q2) + M_SIGMA_FACTOR * sigma_max), torch.zeros_like(q))
    return PerturbationPair(
        q1=q1, q2=q2, tau1=tau1, mask_M=mask, q=q, beta1=beta1, beta2=beta2, anchor=anchor,
    )


@dataclass
class PerturbationBatch:
    """Paires empilées (N, C, H, W) pour l'évaluation vectorisée de la pénalité"""
    q1: TensorImage
    q2: TensorImage
    anchor: TensorImage
    mask_M: TensorImage
    tau1: torch.Tensor
    counts: torch.Tensor

    @classmethod
    def stack(cls, pairs: Sequence[PerturbationPair]) -> "PerturbationBatch":
        if not pairs:
            raise ParameterError("Aucune paire de perturbation")
        return cls(
            q1=torch.stack([p.q1 for p in pairs]),
            q2=torch.stack([p.q2 for p in pairs]),
            anchor=torch.stack([p.anchor for p in pairs]),
            mask_M=torch.stack([p.mask_M for p in pairs]),
            tau1=torch.tensor([p.tau1 for p in pairs], dtype=torch.float64),
            counts=torch.tensor([p.perturbed_count for p in pairs], dtype=torch.float64),
        )


def build_perturbation_batch(
    y_hat: TensorImage,
    rng: SeededRng,
    spec: NoiseSpecs,
    reference: Optional[TensorImage] = None,
) -> PerturbationBatch:
    """Une paire par échantillon du lot, chacune sur son propre sous-flux.

    σ de la matrice M : la racine de la plus grande variance du bruit sur le lot.
    `spec` peut être une loi par échantillon (cartes de variance recadrées).
    """
    reference = y_hat if reference is None else reference
    size = y_hat.shape[0]
    if isinstance(spec, NoiseSpec):
        sigma_max = spec.sigma_max(reference.detach())
    else:
        sigma_max = max(spec_at(spec, i).sigma_max(reference[i].detach()) for i in range(size))
    if sigma_max <= 0:
        raise ParameterError("Variance de bruit nulle : la pénalité de linéarité est indéfinie")
    pairs = [
        build_perturbation(y_hat[i], rng.substream(i), sigma_max, spec=spec_at(spec, i), reference=reference[i])
        for i in range(size)
    ]
    return PerturbationBatch.stack(pairs)


def plc_penalty(denoiser: Denoiser, pair: PerturbationPair, y_hat: Optional[TensorImage] = None) -> torch.Tensor:
    """‖M·(R(ŷ) − τ1·R(q1) − τ2·R(q2))‖² divisé par le nombre de pixels perturbés"""
    if y_hat is not None:
        check_same_shape(y_hat, pair.anchor, "ŷ et la paire")
        if not torch.allclose(y_hat.detach(), pair.anchor, rtol=0.0, atol=1e-9 * max(1.0, float(y_hat.abs().max()))):
            raise ContractError("La paire de perturbation n'a pas été construite pour ce ŷ")
    count = pair.perturbed_count
    if count == 0:
        return torch.zeros((), dtype=torch.float64)
    stacked = torch.stack([pair.anchor, pair.q1, pair.q2])
    out = denoiser(stacked)
    gap = out[0] - pair.tau1 * out[1] - pair.tau2 * out[2]
    return torch.sum((pair.mask_M * gap) ** 2) / count


def plc_penalty_batch(denoiser: Denoiser, perturbations: PerturbationBatch) -> torch.Tensor:
    """Pénalités par échantillon (N,) ; 0 pour les échantillons sans pixel perturbé"""
    size = perturbations.anchor.shape[0]
    out = denoiser(torch.cat([perturbations.anchor, perturbations.q1, perturbations.q2]))
    r_anchor, r_q1, r_q2 = out[:size], out[size:2 * size], out[2 * size:]
    tau1 = perturbations.tau1.reshape(-1, 1, 1, 1)
    gap = r_anchor - tau1 * r_q1 - (1.0 - tau1) * r_q2
    sums = torch.sum((perturbations.mask_M * gap) ** 2, dim=(1, 2, 3))
    counts = perturbations.counts
    return torch.where(counts > 0, sums / torch.clamp(counts, min=1.0), torch.zeros_like(sums))
