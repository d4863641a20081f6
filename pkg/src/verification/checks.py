# Vérifications de Monte-Carlo des identités et bornes théoriques
import logging
import math
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field

from ..config.settings import settings
from ..core.errors import ContractError, ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage, pixel_count
from ..decomposition.estimator import decompose, default_mode, draw_realizations, residual_stats
from ..noise_model.sampler import NoiseSpec, make_sample
from ..workers.realization_pool import RealizationPool
from .oracles import linear_diagonal, check_linearity_samples

logger = logging.getLogger(__name__)

Denoiser = Callable[[TensorImage], TensorImage]
ImageSampler = Callable[[SeededRng], TensorImage]


class PropCheckReport(BaseModel):
    """Résultat d'une vérification : statistique, tolérance et composantes.

    `passed` vaut |statistic| ≤ tolerance pour une égalité, statistic ≤ tolerance
    pour une borne ; `skipped` marque une vérification sans objet.
    """

    name: str
    kind: str = Field(pattern="^(equality|bound)$")
    statistic: float
    tolerance: float
    standard_error: float
    tolerance_se: float
    sample_count: int
    passed: bool
    skipped: bool = False
    components: Dict[str, float] = Field(default_factory=dict)
    message: str = ""


def make_report(
    name: str,
    kind: str,
    statistic: float,
    standard_error: float,
    sample_count: int,
    bound: float = 0.0,
    components: Optional[Dict[str, float]] = None,
    tolerance_se: Optional[float] = None,
    message: str = "",
) -> PropCheckReport:
    """Tolérance = bound + k·SE ; égalité si kind == 'equality' (bound = 0)"""
    k = settings.tolerance_se if tolerance_se is None else tolerance_se
    tolerance = bound + k * standard_error
    passed = abs(statistic) <= tolerance if kind == "equality" else statistic <= tolerance
    report = PropCheckReport(
        name=name,
        kind=kind,
        statistic=statistic,
        tolerance=tolerance,
        standard_error=standard_error,
        tolerance_se=k,
        sample_count=sample_count,
        passed=bool(passed),
        components=components or {},
        message=message,
    )
    icon = "✅" if report.passed else "❌"
    logger.info(f"{icon} {name}: {statistic:.4e} (tolérance {tolerance:.4e}, N={sample_count})")
    return report


def skipped_report(name: str, kind: str, message: str, components: Optional[Dict[str, float]] = None) -> PropCheckReport:
    logger.warning(f"⚠️ {name} ignorée: {message}")
    return PropCheckReport(
        name=name, kind=kind, statistic=math.nan, tolerance=math.nan, standard_error=math.nan,
        tolerance_se=settings.tolerance_se, sample_count=0, passed=True, skipped=True,
        components=components or {}, message=message,
    )


def fixed_image(x: TensorImage) -> ImageSampler:
    return lambda _rng: x


def uniform_images(shape, low: float = 0.0, high: float = 1.0) -> ImageSampler:
    return lambda rng: rng.uniform(low, high, tuple(shape))


def _mean_se(values: np.ndarray):
    N = len(values)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(N)) if N > 1 else math.inf
    return mean, se


def _paired_terms(
    denoiser: Denoiser,
    x_sampler: ImageSampler,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    pool: Optional[RealizationPool],
    linear_part: Optional[Denoiser] = None,
) -> Dict[str, np.ndarray]:
    """Termes par échantillon (moyennes par pixel) : J, EQM, c, et compensation du bruit"""
    if N < 2:
        raise ContractError(f"Au moins deux réalisations requises, reçu N={N}")
    pool = pool or RealizationPool()

    def job(_: int, count: int, chunk_rng: SeededRng):
        clean = torch.stack([x_sampler(chunk_rng.substream(i)) for i in range(count)])
        sample = make_sample(clean, spec, alpha, chunk_rng)
        with torch.no_grad():
            output = denoiser(sample.y_hat)
        residual = sample.n - sample.z / alpha
        terms = {
            "J": torch.mean((output - sample.target) ** 2, dim=(1, 2, 3)),
            "MSE": torch.mean((output - clean) ** 2, dim=(1, 2, 3)),
            "c": torch.mean(residual ** 2, dim=(1, 2, 3)),
            "n2": torch.mean(sample.n ** 2, dim=(1, 2, 3)),
            "z2": torch.mean(sample.z ** 2, dim=(1, 2, 3)),
        }
        if linear_part is not None:
            with torch.no_grad():
                compensated = linear_part(sample.n) + alpha * linear_part(sample.z)
            terms["compensation"] = torch.mean(compensated * residual, dim=(1, 2, 3))
        return {key: value.numpy() for key, value in terms.items()}

    chunks = pool.map_chunks(job, N, rng)
    return {key: np.concatenate([c[key] for c in chunks]) for key in chunks[0]}


def _require_linear(denoiser: Denoiser, shape, rng: SeededRng, name: str) -> None:
    if not check_linearity_samples(denoiser, shape, rng):
        raise ContractError(f"{name} requiert un débruiteur affine")


def check_prop1(
    denoiser: Denoiser,
    x_sampler: ImageSampler,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    *,
    pool: Optional[RealizationPool] = None,
    tolerance_se: Optional[float] = None,
) -> PropCheckReport:
    """E[J] = E[EQM] + E‖n − z/α‖² pour un débruiteur affine et un z apparié"""
    shape = tuple(x_sampler(rng.substream(0)).shape)
    _require_linear(denoiser, shape, rng.substream(1), "check_prop1")
    terms = _paired_terms(denoiser, x_sampler, spec, alpha, N, rng.substream(2), pool)
    gap = terms["J"] - terms["MSE"] - terms["c"]
    mean, se = _mean_se(gap)
    return make_report(
        "prop1", "equality", mean, se, N,
        components={
            "J_hat": float(terms["J"].mean()),
            "MSE_hat": float(terms["MSE"].mean()),
            "c_hat": float(terms["c"].mean()),
        },
        tolerance_se=tolerance_se,
    )


def check_env_extra_term(
    denoiser: Denoiser,
    x: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    *,
    pool: Optional[RealizationPool] = None,
    tolerance_se: Optional[float] = None,
) -> PropCheckReport:
    """Écart E[J − EQM − c] = 2β·tr(W·Cov(n))/m quand Cov(z) = (1 + β)·Cov(n).

    Les composantes donnent aussi 2β·tr(W·Cov(z))/m, qui vaut (1 + β) fois
    l'écart attendu.
    """
    shape = tuple(x.shape)
    _require_linear(denoiser, shape, rng.substream(1), "check_env_extra_term")
    beta = spec.aux_scale - 1.0
    diagonal = linear_diagonal(denoiser, shape)
    trace = float(np.sum(diagonal * spec.noise_variance(x).reshape(-1).numpy()))
    expected = 2.0 * beta * trace / pixel_count(x)
    trace_z = float(np.sum(diagonal * spec.auxiliary_variance(x).reshape(-1).numpy()))

    terms = _paired_terms(denoiser, fixed_image(x), spec, alpha, N, rng.substream(2), pool)
    gap = terms["J"] - terms["MSE"] - terms["c"]
    mean, se = _mean_se(gap)
    return make_report(
        "remark2_extra_term", "equality", mean - expected, se, N,
        components={
            "observed": mean,
            "expected": expected,
            "beta": beta,
            "trace_W_cov_n": trace,
            "trace_W_cov_z": trace_z,
            # Forme en Cov(z), égale à (1 + β)·expected
            "two_beta_trace_W_cov_z": 2.0 * beta * trace_z / pixel_count(x),
        },
        tolerance_se=tolerance_se,
    )


def check_noise_compensation(
    denoiser: Denoiser,
    x_sampler: ImageSampler,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    *,
    pool: Optional[RealizationPool] = None,
    tolerance_se: Optional[float] = None,
) -> PropCheckReport:
    """E⟨W·n + α·W·z, n − z/α⟩ = 0 pour la partie linéaire W d'un débruiteur affine"""
    shape = tuple(x_sampler(rng.substream(0)).shape)
    _require_linear(denoiser, shape, rng.substream(1), "check_noise_compensation")
    with torch.no_grad():
        base = denoiser(torch.zeros((1, *shape), dtype=torch.float64))
    linear_part = lambda v: denoiser(v) - base
    terms = _paired_terms(denoiser, x_sampler, spec, alpha, N, rng.substream(2), pool, linear_part=linear_part)
    mean, se = _mean_se(terms["compensation"])
    return make_report("noise_compensation", "equality", mean, se, N, tolerance_se=tolerance_se)


def _lipschitz_estimate(residuals: np.ndarray, n_hat: np.ndarray, pairs: int = 512) -> float:
    """max ‖e_k − e_l‖ / ‖n̂_k − n̂_l‖ sur des couples consécutifs"""
    count = min(pairs, residuals.shape[0] - 1)
    if count < 1:
        return math.nan
    numerator = np.linalg.norm(residuals[1:count + 1] - residuals[:count], axis=1)
    denominator = np.linalg.norm(n_hat[1:count + 1] - n_hat[:count], axis=1)
    valid = denominator > 0
    return float(np.max(numerator[valid] / denominator[valid])) if valid.any() else math.nan


def check_prop2_bound(
    denoiser: Denoiser,
    x_sampler: ImageSampler,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    *,
    images: int = 1,
    fit_samples: Optional[int] = None,
    mode: Optional[str] = None,
    pool: Optional[RealizationPool] = None,
    tolerance_se: Optional[float] = None,
) -> PropCheckReport:
    """|E[J − EQM − c]| ≤ 2·ε·√E‖n − z/α‖² (moyennes par pixel) pour un R quelconque.

    ε² est mesuré par la décomposition sur `images` images tirées de `x_sampler`.
    La borne de Lipschitz 2ε√E‖n‖² + 2K̂·E‖z‖² figure dans les composantes, à titre
    indicatif.
    """
    terms = _paired_terms(denoiser, x_sampler, spec, alpha, N, rng.substream(0), pool)
    gap = terms["J"] - terms["MSE"] - terms["c"]
    mean, se = _mean_se(gap)

    fit_samples = fit_samples or N
    eps2_values: List[float] = []
    lipschitz: List[float] = []
    for k in range(images):
        x = x_sampler(rng.substream(1).substream(k))
        fit_mode = mode or default_mode(x, fit_samples)
        draws = draw_realizations(denoiser, x, spec, alpha, fit_samples, rng.substream(2).substream(k), pool)
        decomposition = decompose(draws, fit_mode)
        eps2_values.append(decomposition.eps2_per_pixel)
        lipschitz.append(_lipschitz_estimate(decomposition.residual_samples, draws.n_hat))

    eps = math.sqrt(max(float(np.mean(eps2_values)), 0.0))
    c_hat = float(terms["c"].mean())
    bound = 2.0 * eps * math.sqrt(c_hat)
    k_hat = float(np.nanmax(lipschitz)) if lipschitz and not all(math.isnan(v) for v in lipschitz) else math.nan
    lipschitz_bound = 2.0 * eps * math.sqrt(float(terms["n2"].mean())) + 2.0 * k_hat * float(terms["z2"].mean())
    return make_report(
        "prop2", "bound", abs(mean), se, N, bound=bound,
        components={
            "err": abs(mean),
            "eps2_per_pixel": eps * eps,
            "c_hat": c_hat,
            "bound": bound,
            "lipschitz_K": k_hat,
            "lipschitz_bound": lipschitz_bound,
        },
        tolerance_se=tolerance_se,
    )


def check_corollary_delta(
    denoiser_a: Denoiser,
    denoiser_b: Denoiser,
    x_fixed: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    *,
    delta_a: float,
    delta_b: float,
    mode: Optional[str] = None,
    pool: Optional[RealizationPool] = None,
    tolerance_se: Optional[float] = None,
) -> PropCheckReport:
    """E‖A(ŷ) − B(ŷ)‖²/m ≤ (ε² + 2√δ)/(1 − √δ) pour deux quasi-minimiseurs.

    A est δ_A-sous-optimal pour l'EQM, B δ_B-sous-optimal pour J ; δ = max(δ_A, δ_B).
    Sans objet quand δ ≥ 1.
    """
    if delta_a < 0 or delta_b < 0:
        raise ParameterError(f"Écarts de sous-optimalité négatifs: {delta_a}, {delta_b}")
    delta = max(delta_a, delta_b)
    if delta >= 1.0:
        return skipped_report("corollary", "bound", f"δ = {delta:.3f} ≥ 1 : borne sans objet", {"delta": delta})

    pool = pool or RealizationPool()

    def job(_: int, count: int, chunk_rng: SeededRng):
        clean = x_fixed.unsqueeze(0).expand(count, *x_fixed.shape).clone()
        sample = make_sample(clean, spec, alpha, chunk_rng)
        with torch.no_grad():
            gap = denoiser_a(sample.y_hat) - denoiser_b(sample.y_hat)
        residual = sample.n - sample.z / alpha
        return torch.mean(gap ** 2, dim=(1, 2, 3)).numpy(), torch.mean(residual ** 2, dim=(1, 2, 3)).numpy()

    chunks = pool.map_chunks(job, N, rng.substream(0))
    lhs, se = _mean_se(np.concatenate([c[0] for c in chunks]))
    c_hat = float(np.concatenate([c[1] for c in chunks]).mean())

    fit_mode = mode or default_mode(x_fixed, N)
    eps2 = max(
        residual_stats(denoiser_a, x_fixed, spec, alpha, N, rng.substream(1), mode=fit_mode, pool=pool).eps2_per_pixel,
        residual_stats(denoiser_b, x_fixed, spec, alpha, N, rng.substream(2), mode=fit_mode, pool=pool).eps2_per_pixel,
    )
    root = math.sqrt(delta)
    bound = (eps2 + 2.0 * root) / (1.0 - root)
    prop4_bound = 2.0 * math.sqrt(eps2) / (1.0 - root) * math.sqrt(c_hat) + root / (1.0 - root)
    return make_report(
        "corollary", "bound", lhs, se, N, bound=bound,
        components={"delta": delta, "eps2_per_pixel": eps2, "bound": bound, "prop4_bound": prop4_bound, "c_hat": c_hat},
        tolerance_se=tolerance_se,
    )


def check_convexity(
    denoiser_a: Denoiser,
    denoiser_b: Denoiser,
    weight: float,
    x: TensorImage,
    spec: NoiseSpec,
    alpha: float,
    N: int,
    rng: SeededRng,
    *,
    mode: Optional[str] = None,
    pool: Optional[RealizationPool] = None,
    tolerance_se: Optional[float] = None,
) -> PropCheckReport:
    """ε² de λ·A + (1 − λ)·B au plus égal au max des ε² de A et B (mêmes tirages)"""
    if not 0.0 <= weight <= 1.0:
        raise ParameterError(f"Poids de combinaison hors de [0, 1]: {weight}")
    fit_mode = mode or default_mode(x, N)
    combined = lambda v: weight * denoiser_a(v) + (1.0 - weight) * denoiser_b(v)
    stats = [
        residual_stats(den, x, spec, alpha, N, rng, mode=fit_mode, pool=pool)
        for den in (denoiser_a, denoiser_b, combined)
    ]
    worst = max(stats[0].eps2_per_pixel, stats[1].eps2_per_pixel)
    return make_report(
        "convexity", "bound", stats[2].eps2_per_pixel, stats[2].eps2_std_error, N, bound=worst,
        components={
            "eps2_a": stats[0].eps2_per_pixel,
            "eps2_b": stats[1].eps2_per_pixel,
            "eps2_combined": stats[2].eps2_per_pixel,
            "weight": weight,
        },
        tolerance_se=tolerance_se,
    )
