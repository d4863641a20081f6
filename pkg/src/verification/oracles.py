# Oracles exacts ou par quadrature : LMMSE, débruiteurs linéaires, rectifieur, patchs constants
import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import integrate, linalg, special

from ..core.errors import ContractError, DomainError, ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage, pixel_count
from ..noise_model.sampler import NoiseSpec

logger = logging.getLogger(__name__)

Denoiser = Callable[[TensorImage], TensorImage]


class LinearDenoiser:
    """Débruiteur affine R(v) = W·v + b sur des images (C, H, W) aplaties"""

    def __init__(self, matrix: TensorImage, offset: Optional[TensorImage] = None, shape: Optional[Sequence[int]] = None):
        self.matrix = torch.as_tensor(matrix, dtype=torch.float64)
        m = self.matrix.shape[0]
        if self.matrix.dim() != 2 or self.matrix.shape[1] != m:
            raise ParameterError(f"Matrice carrée attendue, reçu {tuple(self.matrix.shape)}")
        self.offset = torch.zeros(m, dtype=torch.float64) if offset is None else torch.as_tensor(offset, dtype=torch.float64).reshape(m)
        self.shape = tuple(shape) if shape is not None else (1, 1, m)

    @classmethod
    def random(cls, shape: Sequence[int], rng: SeededRng, gain: float = 1.0, offset_std: float = 0.0) -> "LinearDenoiser":
        m = int(np.prod(shape))
        matrix = rng.normal((m, m), std=gain / math.sqrt(m))
        offset = rng.normal((m,), std=offset_std) if offset_std > 0 else None
        return cls(matrix, offset, shape)

    @classmethod
    def scalar(cls, gain: float, shape: Sequence[int] = (1, 1, 1)) -> "LinearDenoiser":
        m = int(np.prod(shape))
        return cls(gain * torch.eye(m, dtype=torch.float64), None, shape)

    def __call__(self, v: TensorImage) -> TensorImage:
        flat = v.reshape(-1, self.matrix.shape[0]).to(torch.float64)
        out = flat @ self.matrix.T + self.offset
        return out.reshape(v.shape)


def check_linearity_samples(
    denoiser: Denoiser,
    shape: Sequence[int],
    rng: SeededRng,
    trials: int = 3,
    rtol: float = 1e-9,
) -> bool:
    """R(a·x1 + b·x2) = a·R(x1) + b·R(x2) + (1 − a − b)·R(0) sur des tirages aléatoires"""
    zero = torch.zeros((1, *shape), dtype=torch.float64)
    with torch.no_grad():
        base = denoiser(zero)
        for k in range(trials):
            draw = rng.substream(k)
            x1, x2 = draw.normal((1, *shape)), draw.normal((1, *shape))
            a, b = draw.uniform_scalar(-2.0, 2.0), draw.uniform_scalar(-2.0, 2.0)
            lhs = denoiser(a * x1 + b * x2)
            rhs = a * denoiser(x1) + b * denoiser(x2) + (1.0 - a - b) * base
            scale = max(1.0, float(rhs.abs().max()))
            if float((lhs - rhs).abs().max()) > rtol * scale:
                return False
    return True


def linear_diagonal(denoiser: Denoiser, shape: Sequence[int], chunk: int = 256) -> np.ndarray:
    """Diagonale de la partie linéaire W d'un débruiteur affine : W_jj = [R(e_j) − R(0)]_j"""
    m = int(np.prod(shape))
    diagonal = np.empty(m)
    with torch.no_grad():
        base = denoiser(torch.zeros((1, *shape), dtype=torch.float64)).reshape(-1)
        for start in range(0, m, chunk):
            stop = min(start + chunk, m)
            basis = torch.zeros((stop - start, m), dtype=torch.float64)
            basis[torch.arange(stop - start), torch.arange(start, stop)] = 1.0
            out = denoiser(basis.reshape(-1, *shape)).reshape(stop - start, m) - base
            diagonal[start:stop] = out[torch.arange(stop - start), torch.arange(start, stop)].numpy()
    return diagonal


def lmmse_oracle(prior_mean: TensorImage, prior_cov: TensorImage, noise_cov: TensorImage) -> LinearDenoiser:
    """R(y) = μ + Cx·(Cx + Cn)⁻¹·(y − μ) ; somme singulière → inverse régularisée"""
    mean = torch.as_tensor(prior_mean, dtype=torch.float64).reshape(-1)
    cx = np.asarray(torch.as_tensor(prior_cov, dtype=torch.float64))
    cn = np.asarray(torch.as_tensor(noise_cov, dtype=torch.float64))
    m = mean.numel()
    for name, cov in (("prior_cov", cx), ("noise_cov", cn)):
        if cov.shape != (m, m):
            raise ParameterError(f"{name} de forme {cov.shape}, ({m}, {m}) attendue")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ParameterError(f"{name} n'est pas symétrique")

    total = cx + cn
    try:
        factor = linalg.cho_factor(total)
        gain = linalg.cho_solve(factor, cx).T
    except linalg.LinAlgError:
        ridge = 1e-10 * max(np.trace(total) / m, 1.0)
        logger.warning(f"⚠️ Cx + Cn singulière : inverse régularisée (ridge {ridge:.1e})")
        gain = linalg.solve(total + ridge * np.eye(m), cx, assume_a="sym").T

    gain_t = torch.from_numpy(np.ascontiguousarray(gain))
    return LinearDenoiser(gain_t, mean - gain_t @ mean, (1, 1, m))


@dataclass
class RectifierOracle:
    """Décomposition de max(0, u), u ~ N(0, s²), par quadrature 1-D"""
    g: float
    L: float
    eps2: float
    variance: float


def rectifier_residual_oracle(s: float) -> RectifierOracle:
    """g = E max(0,u), L = E[max(0,u)·u]/s², ε² = E(max(0,u) − g − L·u)²"""
    if s <= 0:
        raise ParameterError(f"Écart-type strictement positif requis, reçu {s}")
    pdf = lambda u: math.exp(-0.5 * (u / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
    upper = 12.0 * s
    g = integrate.quad(lambda u: u * pdf(u), 0.0, upper)[0]
    L = integrate.quad(lambda u: u * u * pdf(u), 0.0, upper)[0] / s ** 2
    positive = integrate.quad(lambda u: (u - g - L * u) ** 2 * pdf(u), 0.0, upper)[0]
    negative = integrate.quad(lambda u: (g + L * u) ** 2 * pdf(u), -upper, 0.0)[0]
    second = integrate.quad(lambda u: u * u * pdf(u), 0.0, upper)[0]
    return RectifierOracle(g=g, L=L, eps2=positive + negative, variance=second - g * g)


@dataclass
class ScalarGainPair:
    """Quasi-minimiseurs R_t(v) = t·v de l'EQM et de J sur une grille, écarts δ exacts"""
    t_mse: float
    t_j: float
    delta_mse: float
    delta_j: float
    grid_step: float

    @property
    def denoiser_a(self) -> LinearDenoiser:
        return LinearDenoiser.scalar(self.t_mse)

    @property
    def denoiser_b(self) -> LinearDenoiser:
        return LinearDenoiser.scalar(self.t_j)


def _scalar_objectives(x: float, sigma_n: float, sigma_z: float, alpha: float):
    """EQM(t) et J(t) exacts pour R_t(v) = t·v sur un pixel, bruits gaussiens"""
    mse = lambda t: (t - 1.0) ** 2 * x * x + t * t * (sigma_n ** 2 + alpha ** 2 * sigma_z ** 2)
    j = lambda t: (t - 1.0) ** 2 * (x * x + sigma_n ** 2) + (t * alpha + 1.0 / alpha) ** 2 * sigma_z ** 2
    return mse, j


def scalar_gain_family(
    x_value: float,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    grid: Optional[np.ndarray] = None,
) -> ScalarGainPair:
    """Recherche sur grille des minimiseurs empiriques de l'EQM et de J (échantillons
    indépendants), puis écarts de sous-optimalité calculés sur les objectifs exacts."""
    if spec.kind != "gaussian":
        raise ParameterError("La famille de gains scalaires requiert un bruit gaussien")
    grid = np.linspace(0.0, 1.0, 2001) if grid is None else np.asarray(grid, dtype=np.float64)
    sigma_z = spec.sigma * math.sqrt(spec.aux_scale)

    def empirical(stream: SeededRng, use_target: bool) -> float:
        n = spec.sigma * stream.normal((N,)).numpy()
        z = sigma_z * stream.normal((N,)).numpy()
        y = x_value + n
        y_hat = y + alpha * z
        reference = y - z / alpha if use_target else np.full(N, x_value)
        # Σ(t·ŷ − r)² = t²Σŷ² − 2tΣŷr + Σr²
        a, b, c = np.sum(y_hat ** 2), np.sum(y_hat * reference), np.sum(reference ** 2)
        values = grid ** 2 * a - 2.0 * grid * b + c
        return float(grid[int(np.argmin(values))])

    t_mse = empirical(rng.substream(0), use_target=False)
    t_j = empirical(rng.substream(1), use_target=True)

    mse, j = _scalar_objectives(x_value, spec.sigma, sigma_z, alpha)
    t_mse_star = x_value ** 2 / (x_value ** 2 + spec.sigma ** 2 + alpha ** 2 * sigma_z ** 2)
    t_j_star = (x_value ** 2 + spec.sigma ** 2 - sigma_z ** 2) / (x_value ** 2 + spec.sigma ** 2 + alpha ** 2 * sigma_z ** 2)
    step = float(np.min(np.diff(grid))) if len(grid) > 1 else 0.0
    return ScalarGainPair(
        t_mse=t_mse,
        t_j=t_j,
        delta_mse=float(mse(t_mse) - mse(t_mse_star)),
        delta_j=float(j(t_j) - j(t_j_star)),
        grid_step=step,
    )


class ConstantPatchOracle:
    """Moyenne a posteriori R₀ pour des patchs constants x ~ U[0, λ_max] sous bruit de Poisson.

    Avec le total de comptage S = Σᵢ scale·ŷᵢ sur m pixels, la vraisemblance est
    proportionnelle à x^S·exp(−m·scale·x). `scale = 1` correspond à ŷᵢ ~ Pois(xᵢ),
    `scale = λ` à λ·ŷ ~ Pois(λ·x).
    """

    def __init__(self, lam_max: float, patch: Tuple[int, int] = (21, 21), scale: float = 1.0):
        if lam_max <= 0 or scale <= 0:
            raise ParameterError(f"λ_max ({lam_max}) et scale ({scale}) doivent être > 0")
        self.lam_max = float(lam_max)
        self.patch = tuple(patch)
        self.scale = float(scale)
        self.pixels = int(np.prod(self.patch))
        self._cached = lru_cache(maxsize=4096)(self._posterior_mean)

    def posterior_mean(self, S: float) -> float:
        if S < 0:
            raise DomainError(f"Total de comptage négatif: {S}")
        return self._cached(float(S))

    def _posterior_mean(self, S: float) -> float:
        return constant_patch_posterior(S, self.lam_max, self.pixels, self.scale)

    def __call__(self, y_hat: TensorImage) -> TensorImage:
        single = y_hat.dim() == 3
        batch = y_hat.unsqueeze(0) if single else y_hat
        totals = torch.round(self.scale * batch.reshape(batch.shape[0], -1).sum(dim=1) * 1e6) / 1e6
        means = torch.tensor([self.posterior_mean(float(S)) for S in totals], dtype=torch.float64)
        out = means.reshape(-1, 1, 1, 1).expand_as(batch).clone()
        return out[0] if single else out


def constant_patch_posterior(S: float, lam_max: float, pixels: int, scale: float = 1.0) -> float:
    """E[x | S] par quadrature adaptative en échelle logarithmique sur [0, λ_max]"""
    if S < 0:
        raise DomainError(f"Total de comptage négatif: {S}")
    rate = pixels * scale
    mode = min(S / rate, lam_max)
    log_peak = special.xlogy(S, mode) - rate * mode if mode > 0 else 0.0

    def weight(x: float, power: float) -> float:
        return math.exp(special.xlogy(S + power, x) - rate * x - log_peak) if x > 0 or S + power == 0 else 0.0

    width = math.sqrt(S + 1.0) / rate
    points = sorted({p for p in (mode, mode - 8 * width, mode + 8 * width) if 0.0 < p < lam_max})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        numerator = integrate.quad(weight, 0.0, lam_max, args=(1.0,), points=points or None, limit=200)[0]
        denominator = integrate.quad(weight, 0.0, lam_max, args=(0.0,), points=points or None, limit=200)[0]
    if denominator <= 0:
        raise ContractError(f"Intégrale a posteriori nulle pour S={S}")
    mean = numerator / denominator

    # Contrôle croisé : (S+1)/rate · P(S+2, rate·λ_max) / P(S+1, rate·λ_max)
    lower = special.gammainc(S + 1.0, rate * lam_max)
    if lower > 1e-12:
        closed = (S + 1.0) / rate * special.gammainc(S + 2.0, rate * lam_max) / lower
        if abs(closed - mean) > 1e-6 * max(1.0, abs(closed)):
            logger.debug(f"Écart quadrature/forme fermée pour S={S}: {mean} vs {closed}")
    return float(min(max(mean, 0.0), lam_max))


def diagonal_trace(L: np.ndarray, mode: str) -> np.ndarray:
    return L if mode == "diagonal" else np.diag(L)


def covariance_summary(spec: NoiseSpec, x: TensorImage) -> Dict[str, float]:
    """Variances moyennes par pixel de n et de z en x (pour les rapports)"""
    m = pixel_count(x)
    return {
        "noise_variance": float(spec.noise_variance(x).sum()) / m,
        "auxiliary_variance": float(spec.auxiliary_variance(x).sum()) / m,
    }
