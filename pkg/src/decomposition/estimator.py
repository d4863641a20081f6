# Estimation de Monte-Carlo de la décomposition R(ŷ) = g(x) + L·n̂ + e
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel
from scipy import linalg, stats

from ..config.settings import settings
from ..core.errors import ContractError, ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage, pixel_count
from ..noise_model.sampler import NoiseSpec, make_sample
from ..trainer.metrics import psnr
from ..workers.realization_pool import RealizationPool, pairwise_sum

logger = logging.getLogger(__name__)

Denoiser = Callable[[TensorImage], TensorImage]

FIT_MODES = ("full", "diagonal")


@dataclass
class MonteCarloEstimate:
    """Moyenne empirique, carte d'erreur standard et nombre de tirages"""
    mean: TensorImage
    std_error: TensorImage
    count: int


@dataclass
class Realizations:
    """Sorties R(ŷ_k) et bruits totaux n̂_k aplatis (N, m), pour un x fixé"""
    image_shape: Tuple[int, ...]
    outputs: np.ndarray
    n_hat: np.ndarray
    auxiliary_variance: np.ndarray

    @property
    def count(self) -> int:
        return int(self.outputs.shape[0])

    @property
    def pixels(self) -> int:
        return int(self.outputs.shape[1])


@dataclass
class Decomposition:
    """Triplet estimé (g(x), L, e) et statistiques résumées"""
    g_of_x: TensorImage
    L: np.ndarray
    mode: str
    eps2_per_pixel: float
    eps2_std_error: float
    zlz: float
    sample_count: int
    g_std_error: TensorImage
    residual_samples: Optional[np.ndarray] = None

    def apply_L(self, n_hat: np.ndarray) -> np.ndarray:
        """L·n̂ pour des bruits aplatis (N, m)"""
        return _apply_L(self.L, self.mode, n_hat)

    def to_report(self) -> "DecompositionReport":
        return DecompositionReport(
            mode=self.mode,
            eps2_per_pixel=self.eps2_per_pixel,
            eps2_std_error=self.eps2_std_error,
            zlz=self.zlz,
            sample_count=self.sample_count,
            g_std_error_max=float(self.g_std_error.max()),
            pixels=int(self.g_of_x.numel()),
        )


class DecompositionReport(BaseModel):
    mode: str
    eps2_per_pixel: float
    eps2_std_error: float
    zlz: float
    sample_count: int
    g_std_error_max: float
    pixels: int


@dataclass
class LinearityScatter:
    """Couples ([L·n̂]_i, [R(ŷ) − g(x)]_i) au pixel i, un par réalisation"""
    pixel_index: int
    pairs: np.ndarray

    @property
    def pearson(self) -> float:
        left, right = self.pairs[:, 0], self.pairs[:, 1]
        if np.ptp(left) == 0 or np.ptp(right) == 0:
            return float("nan")
        return float(stats.pearsonr(left, right)[0])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, self.pairs, delimiter=",", header="Ln_hat_i,R_minus_g_i", comments="", fmt="%.10e")
        return path


def _apply_L(L: np.ndarray, mode: str, n_hat: np.ndarray) -> np.ndarray:
    if mode == "diagonal":
        return n_hat * L
    return n_hat @ L.T


def draw_realizations(
    denoiser: Denoiser,
    x: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    pool: Optional[RealizationPool] = None,
) -> Realizations:
    """N tirages indépendants de (n, z) autour de x, évalués par blocs"""
    if N < 1:
        raise ContractError(f"Au moins une réalisation requise, reçu N={N}")
    pool = pool or RealizationPool()

    def job(_: int, count: int, chunk_rng: SeededRng):
        clean = x.unsqueeze(0).expand(count, *x.shape).clone()
        sample = make_sample(clean, spec, alpha, chunk_rng)
        with torch.no_grad():
            output = denoiser(sample.y_hat)
        n_hat = sample.n + alpha * sample.z
        aux = spec.auxiliary_variance(sample.y).sum(dim=0)
        return output.reshape(count, -1).numpy(), n_hat.reshape(count, -1).numpy(), aux

    chunks = pool.map_chunks(job, N, rng)
    aux_total = pairwise_sum([c[2] for c in chunks])
    return Realizations(
        image_shape=tuple(x.shape),
        outputs=np.concatenate([c[0] for c in chunks]),
        n_hat=np.concatenate([c[1] for c in chunks]),
        auxiliary_variance=(aux_total / N).reshape(-1).numpy(),
    )


def estimate_g(
    denoiser: Denoiser,
    x: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    pool: Optional[RealizationPool] = None,
) -> MonteCarloEstimate:
    """g(x) = E[R(ŷ) | x] par moyenne empirique, avec carte d'erreur standard"""
    if N < 100:
        logger.warning(f"⚠️ estimate_g avec seulement N={N} réalisations")
    pool = pool or RealizationPool()

    def job(_: int, count: int, chunk_rng: SeededRng):
        clean = x.unsqueeze(0).expand(count, *x.shape).clone()
        sample = make_sample(clean, spec, alpha, chunk_rng)
        with torch.no_grad():
            output = denoiser(sample.y_hat)
        return output.sum(dim=0), (output ** 2).sum(dim=0)

    chunks = pool.map_chunks(job, N, rng)
    mean = pairwise_sum([c[0] for c in chunks]) / N
    if N > 1:
        second = pairwise_sum([c[1] for c in chunks]) / N
        variance = torch.clamp(second - mean ** 2, min=0.0) * N / (N - 1)
        std_error = torch.sqrt(variance / N)
    else:
        std_error = torch.full_like(mean, math.inf)
    return MonteCarloEstimate(mean=mean, std_error=std_error, count=N)


def _check_mode(mode: str, m: int, N: int) -> None:
    if mode not in FIT_MODES:
        raise ParameterError(f"Mode d'ajustement inconnu: {mode}")
    if mode == "full":
        if m > settings.full_fit_max_pixels:
            raise ContractError(
                f"Ajustement complet limité à {settings.full_fit_max_pixels} pixels (m={m}) : utiliser mode='diagonal'"
            )
        if N < 2 * m:
            raise ContractError(f"Ajustement complet sous-déterminé (N={N} < 2m={2 * m}) : utiliser mode='diagonal'")


def _regress(residual: np.ndarray, n_hat: np.ndarray, mode: str, ridge: float) -> np.ndarray:
    """Moindres carrés de `residual` sur n̂ (équations normales régularisées)"""
    N = residual.shape[0]
    if mode == "diagonal":
        return np.sum(residual * n_hat, axis=0) / (np.sum(n_hat * n_hat, axis=0) + ridge * N)

    gram = n_hat.T @ n_hat / N
    cross = residual.T @ n_hat / N
    gram[np.diag_indices_from(gram)] += ridge
    try:
        return linalg.solve(gram, cross.T, assume_a="pos").T
    except linalg.LinAlgError:
        logger.warning("⚠️ Matrice de Gram non définie positive, résolution générale")
        return linalg.solve(gram, cross.T).T


def fit_L(
    denoiser: Denoiser,
    x: TensorImage,
    g_of_x: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    mode: str = "diagonal",
    ridge: Optional[float] = None,
    pool: Optional[RealizationPool] = None,
) -> np.ndarray:
    """L minimisant la variance de R(ŷ) − g(x) − L·n̂ sur N nouvelles réalisations"""
    m = pixel_count(x)
    _check_mode(mode, m, N)
    ridge = settings.ridge if ridge is None else ridge
    draws = draw_realizations(denoiser, x, spec, alpha, N, rng, pool)
    residual = draws.outputs - g_of_x.reshape(1, -1).numpy()
    return _regress(residual, draws.n_hat, mode, ridge)


def decompose(realizations: Realizations, mode: str = "diagonal", ridge: Optional[float] = None) -> Decomposition:
    """Ajustement conjoint (g, L) sur un jeu de réalisations stocké.

    g est l'ordonnée à l'origine des moindres carrés, si bien que les résidus e
    sont de moyenne empirique nulle et que R(ŷ) = g + L·n̂ + e sur chaque tirage.
    """
    ridge = settings.ridge if ridge is None else ridge
    N, m = realizations.count, realizations.pixels
    _check_mode(mode, m, N)
    outputs, n_hat = realizations.outputs, realizations.n_hat

    out_mean = outputs.mean(axis=0)
    n_mean = n_hat.mean(axis=0)
    L = _regress(outputs - out_mean, n_hat - n_mean, mode, ridge)
    g = out_mean - _apply_L(L, mode, n_mean[None, :])[0]

    residual = outputs - g[None, :] - _apply_L(L, mode, n_hat)
    per_sample = np.mean(residual ** 2, axis=1)
    eps2 = float(per_sample.mean())
    eps2_se = float(per_sample.std(ddof=1) / math.sqrt(N)) if N > 1 else math.inf

    diagonal = L if mode == "diagonal" else np.diag(L)
    zlz = float(np.sum(diagonal * realizations.auxiliary_variance))

    g_se = outputs.std(axis=0, ddof=1) / math.sqrt(N) if N > 1 else np.full(m, math.inf)
    shape = realizations.image_shape
    return Decomposition(
        g_of_x=torch.from_numpy(g.reshape(shape).copy()),
        L=L,
        mode=mode,
        eps2_per_pixel=eps2,
        eps2_std_error=eps2_se,
        zlz=zlz,
        sample_count=N,
        g_std_error=torch.from_numpy(np.asarray(g_se).reshape(shape).copy()),
        residual_samples=residual,
    )


def residual_stats(
    denoiser: Denoiser,
    x: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    mode: str = "diagonal",
    ridge: Optional[float] = None,
    pool: Optional[RealizationPool] = None,
) -> Decomposition:
    """g, L et ε²/m estimés sur un même jeu de N réalisations"""
    _check_mode(mode, pixel_count(x), N)
    draws = draw_realizations(denoiser, x, spec, alpha, N, rng, pool)
    decomposition = decompose(draws, mode, ridge)
    logger.info(
        f"Décomposition ({mode}, N={N}): ε²/m={decomposition.eps2_per_pixel:.3e} "
        f"± {decomposition.eps2_std_error:.1e}, ⟨z,Lz⟩={decomposition.zlz:.4e}"
    )
    return decomposition


def residual_variance(realizations: Realizations, g: TensorImage, L: np.ndarray, mode: str) -> float:
    """Variance résiduelle par pixel de R(ŷ) − g − L'·n̂ pour un opérateur L' quelconque"""
    residual = realizations.outputs - g.reshape(1, -1).numpy() - _apply_L(L, mode, realizations.n_hat)
    return float(np.mean(residual ** 2))


def zLz_statistic(
    denoiser: Denoiser,
    x_const: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    mode: str = "diagonal",
    pool: Optional[RealizationPool] = None,
) -> float:
    """E⟨z, Lz⟩ = tr(L·Cov(z)) pour le L ajusté sur une image constante"""
    flat = x_const.reshape(-1)
    if flat.numel() == 0 or not bool(torch.all(flat == flat[0])):
        raise ContractError("zLz_statistic requiert une image constante")
    return residual_stats(denoiser, x_const, spec, alpha, N, rng, mode=mode, pool=pool).zlz


def default_mode(x: TensorImage, N: int) -> str:
    m = pixel_count(x)
    return "full" if m <= settings.full_fit_max_pixels and N >= 2 * m else "diagonal"


def scatter_from(decomposition: Decomposition, realizations_n_hat: np.ndarray, pixel: int) -> LinearityScatter:
    """Nuage au pixel `pixel` à partir d'une décomposition et des n̂ ayant servi à l'ajuster"""
    linear = decomposition.apply_L(realizations_n_hat)[:, pixel]
    centred = linear + decomposition.residual_samples[:, pixel]
    return LinearityScatter(pixel_index=pixel, pairs=np.stack([linear, centred], axis=1))


def export_scatter(
    denoiser: Denoiser,
    x: TensorImage,
    pixel: int,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    mode: Optional[str] = None,
    csv_path: Optional[Union[str, Path]] = None,
    pool: Optional[RealizationPool] = None,
) -> Tuple[LinearityScatter, Decomposition]:
    """Nuage ([L·n̂]_i, [R(ŷ) − g(x)]_i) ; écrit en CSV si `csv_path` est fourni"""
    m = pixel_count(x)
    if not 0 <= pixel < m:
        raise ParameterError(f"Pixel {pixel} hors de l'image ({m} pixels)")
    mode = mode or default_mode(x, N)
    draws = draw_realizations(denoiser, x, spec, alpha, N, rng, pool)
    decomposition = decompose(draws, mode)
    scatter = scatter_from(decomposition, draws.n_hat, pixel)
    if csv_path is not None:
        scatter.to_csv(csv_path)
        logger.info(f"Nuage de linéarité écrit: {csv_path} (corrélation {scatter.pearson:.4f})")
    return scatter, decomposition


def modified_denoiser_psnr(
    denoiser: Denoiser,
    x: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    mode: str = "diagonal",
    pool: Optional[RealizationPool] = None,
) -> Tuple[float, float]:
    """PSNR moyens de R(ŷ) et du débruiteur purement partiellement linéaire g + L·n̂"""
    draws = draw_realizations(denoiser, x, spec, alpha, N, rng, pool)
    decomposition = decompose(draws, mode)
    surrogate = decomposition.g_of_x.reshape(1, -1).numpy() + decomposition.apply_L(draws.n_hat)

    clean = x.reshape(-1)
    psnr_denoiser: List[float] = []
    psnr_surrogate: List[float] = []
    for k in range(N):
        psnr_denoiser.append(psnr(torch.from_numpy(draws.outputs[k]), clean))
        psnr_surrogate.append(psnr(torch.from_numpy(surrogate[k]), clean))
    return float(np.mean(psnr_denoiser)), float(np.mean(psnr_surrogate))
