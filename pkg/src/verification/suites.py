# Suites de vérification exécutables depuis la ligne de commande
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field

from ..core.errors import ParameterError
from ..core.rng import SeededRng
from ..decomposition.estimator import decompose, draw_realizations
from ..diffcore.autodiff import check_gradients
from ..diffcore.model import DenoiserModel, ModelArchitecture
from ..losses.objectives import deblur_loss, empirical_loss, proxy_loss, total_denoise_loss
from ..losses.operators import DeblurOperator, random_motion_kernel
from ..losses.perturbation import build_perturbation_batch
from ..noise_model.sampler import CorruptedBatch, NoiseSpec, make_sample
from ..workers.realization_pool import RealizationPool
from .checks import (
    PropCheckReport,
    check_convexity,
    check_corollary_delta,
    check_env_extra_term,
    check_noise_compensation,
    check_prop1,
    check_prop2_bound,
    fixed_image,
    make_report,
)
from .oracles import ConstantPatchOracle, LinearDenoiser, rectifier_residual_oracle, scalar_gain_family

logger = logging.getLogger(__name__)

EXAMPLE1_LAMBDAS = (1.0, 2.0, 4.0)
EXAMPLE1_PATCH = (21, 21)
RECTIFIER_RELATIVE_TOLERANCE = 0.05


class SuiteReport(BaseModel):
    suite: str
    seed: int
    samples: Optional[int] = None
    passed: bool
    reports: List[PropCheckReport] = Field(default_factory=list)


def rectifier(v: torch.Tensor) -> torch.Tensor:
    return torch.clamp(v, min=0.0)


def soft_shrink(v: torch.Tensor, threshold: float = 0.05) -> torch.Tensor:
    return torch.sign(v) * torch.clamp(v.abs() - threshold, min=0.0)


# Exemple des patchs constants sous bruit de Poisson

def example1_partial_linearity(
    lam: float,
    N: int,
    rng: SeededRng,
    *,
    scaled: bool = False,
    patch: Sequence[int] = EXAMPLE1_PATCH,
    csv_dir: Optional[Path] = None,
    pool: Optional[RealizationPool] = None,
) -> PropCheckReport:
    """Décomposition complète de la moyenne a posteriori R₀ autour de x = 0.5·λ_max.

    Par défaut ŷᵢ ~ Pois(xᵢ) avec x ~ U[0, λ] ; `scaled` passe à λ·ŷ ~ Pois(λ·x)
    avec x ~ U[0, 1]. ε² doit rester au moins dix fois sous Var(R₀(ŷ)).
    """
    if lam <= 0:
        raise ParameterError(f"λ doit être > 0, reçu {lam}")
    if scaled:
        oracle = ConstantPatchOracle(lam_max=1.0, patch=tuple(patch), scale=lam)
        spec = NoiseSpec.poisson(lam, aux_scale=0.0)
    else:
        oracle = ConstantPatchOracle(lam_max=lam, patch=tuple(patch), scale=1.0)
        spec = NoiseSpec.poisson(1.0, aux_scale=0.0)
    x = torch.full((1, *patch), 0.5 * oracle.lam_max, dtype=torch.float64)

    draws = draw_realizations(oracle, x, spec, 1.0, N, rng, pool)
    decomposition = decompose(draws, "full")
    var_r0 = float(draws.outputs.var(axis=0, ddof=1).mean())
    eps2 = decomposition.eps2_per_pixel

    pixel = draws.pixels // 2
    surrogate = decomposition.g_of_x.reshape(-1).numpy()[pixel] + decomposition.apply_L(draws.n_hat)[:, pixel]
    if csv_dir is not None:
        path = Path(csv_dir) / f"example1_lambda{lam:g}{'_scaled' if scaled else ''}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        table = np.stack([surrogate, draws.outputs[:, pixel], surrogate], axis=1)
        np.savetxt(path, table, delimiter=",", header="g_plus_Ln,R0,ref_w", comments="", fmt="%.10e")
        logger.info(f"💾 Nuage de l'exemple des patchs constants: {path}")

    return make_report(
        f"example1_lambda{lam:g}", "bound", eps2, decomposition.eps2_std_error, N,
        bound=var_r0 / 10.0,
        components={
            "lambda": lam,
            "eps2_per_pixel": eps2,
            "var_R0": var_r0,
            "ratio": var_r0 / eps2 if eps2 > 0 else math.inf,
            "g_center": float(decomposition.g_of_x.reshape(-1)[pixel]),
        },
    )


# Suites

def _random_linear(shape, rng: SeededRng, gain: float = 0.8) -> LinearDenoiser:
    return LinearDenoiser.random(shape, rng, gain=gain, offset_std=0.05)


def prop1_suite(rng: SeededRng, samples: int, pool: RealizationPool, out_dir: Optional[Path]) -> List[PropCheckReport]:
    """20 débruiteurs linéaires aléatoires 8×8, σ = 0.1, α ∈ {0.25, 1}"""
    shape = (1, 8, 8)
    spec = NoiseSpec.gaussian(0.1)
    reports = []
    for k in range(20):
        denoiser = _random_linear(shape, rng.substream(k).substream(0))
        x = rng.substream(k).substream(1).uniform(0.0, 1.0, shape)
        for j, alpha in enumerate((0.25, 1.0)):
            report = check_prop1(denoiser, fixed_image(x), spec, alpha, samples, rng.substream(k).substream(2 + j), pool=pool)
            reports.append(report.model_copy(update={"name": f"prop1_linear{k}_alpha{alpha:g}"}))
    return reports


def prop2_suite(rng: SeededRng, samples: int, pool: RealizationPool, out_dir: Optional[Path]) -> List[PropCheckReport]:
    """Débruiteurs non linéaires : rectifieur en x = 0 (Err nul) et seuillage doux"""
    spec = NoiseSpec.gaussian(0.1)
    alpha = 0.5
    reports = [
        check_prop2_bound(rectifier, fixed_image(torch.zeros((1, 4, 4), dtype=torch.float64)), spec, alpha,
                          samples, rng.substream(0), pool=pool).model_copy(update={"name": "prop2_rectifier"}),
        check_prop2_bound(soft_shrink, fixed_image(torch.full((1, 4, 4), 0.2, dtype=torch.float64)), spec, alpha,
                          samples, rng.substream(1), pool=pool).model_copy(update={"name": "prop2_soft_shrink"}),
    ]

    # ε² du rectifieur sur un pixel contre la quadrature
    s = spec.sigma * math.sqrt(1.0 + alpha ** 2)
    oracle = rectifier_residual_oracle(s)
    single = torch.zeros((1, 1, 1), dtype=torch.float64)
    draws = draw_realizations(rectifier, single, spec, alpha, samples, rng.substream(2), pool)
    fitted = decompose(draws, "full")
    reports.append(make_report(
        "rectifier_oracle", "equality", fitted.eps2_per_pixel - oracle.eps2, fitted.eps2_std_error, samples,
        components={
            "eps2_estimate": fitted.eps2_per_pixel,
            "eps2_oracle": oracle.eps2,
            "g_estimate": float(fitted.g_of_x.reshape(-1)[0]),
            "g_oracle": oracle.g,
            "L_estimate": float(np.asarray(fitted.L).reshape(-1)[0]),
            "L_oracle": oracle.L,
        },
    ))
    relative = (fitted.eps2_per_pixel - oracle.eps2) / oracle.eps2
    reports.append(make_report(
        "rectifier_oracle_relative", "equality", relative, 0.0, samples, bound=RECTIFIER_RELATIVE_TOLERANCE,
        tolerance_se=0.0, components={"relative_error": relative},
    ))
    return reports


def corollary_suite(rng: SeededRng, samples: int, pool: RealizationPool, out_dir: Optional[Path]) -> List[PropCheckReport]:
    """Gains scalaires quasi-optimaux pour l'EQM et pour J sur un pixel"""
    spec = NoiseSpec.gaussian(0.1)
    alpha = 0.5
    x_value = 0.5
    pair = scalar_gain_family(x_value, spec, alpha, samples, rng.substream(0))
    x = torch.full((1, 1, 1), x_value, dtype=torch.float64)
    report = check_corollary_delta(
        pair.denoiser_a, pair.denoiser_b, x, spec, alpha, samples, rng.substream(1),
        delta_a=pair.delta_mse, delta_b=pair.delta_j, pool=pool,
    )
    components = dict(report.components, t_mse=pair.t_mse, t_j=pair.t_j)
    return [report.model_copy(update={"components": components})]


def example1_suite(rng: SeededRng, samples: int, pool: RealizationPool, out_dir: Optional[Path]) -> List[PropCheckReport]:
    N = max(samples, 2 * int(np.prod(EXAMPLE1_PATCH)))
    return [
        example1_partial_linearity(lam, N, rng.substream(k), csv_dir=out_dir, pool=pool)
        for k, lam in enumerate(EXAMPLE1_LAMBDAS)
    ]


def _randomized_model(rng: SeededRng) -> DenoiserModel:
    """Petit modèle dont toutes les couches, dernière comprise, sont aléatoires"""
    model = DenoiserModel(ModelArchitecture(depth=3, width=4), rng.substream(0))
    with torch.no_grad():
        last = model.layers[-1]
        last.weight.copy_(0.3 * rng.substream(1).normal(tuple(last.weight.shape)))
        last.bias.copy_(0.1 * rng.substream(2).normal(tuple(last.bias.shape)))
    return model


def gradients_suite(rng: SeededRng, samples: int, pool: RealizationPool, out_dir: Optional[Path]) -> List[PropCheckReport]:
    """Différences finies sur chaque perte, images 8×8, cinq graines"""
    spec = NoiseSpec.gaussian(0.1)
    reports = []
    for seed in range(5):
        stream = rng.substream(seed)
        model = _randomized_model(stream.substream(0))
        clean = stream.substream(1).uniform(0.0, 1.0, (2, 1, 8, 8))
        sample = make_sample(clean, spec, 0.5, stream.substream(2))
        batch = CorruptedBatch(
            y=sample.y, z=sample.z, alpha=torch.full((2,), 0.5, dtype=torch.float64),
            y_hat=sample.y_hat, target=sample.target, x=clean,
        )
        perturbations = build_perturbation_batch(batch.y_hat, stream.substream(3), spec, reference=batch.y)
        blur = DeblurOperator.box(3)
        kernel = random_motion_kernel(stream.substream(4), size=5, length=6)
        noise = 0.1 * stream.substream(5).normal((2, 1, 8, 8))
        with torch.no_grad():
            x_prox = model(batch.y)

        losses: Dict[str, Callable[[], torch.Tensor]] = {
            "empirical": lambda: empirical_loss(model, batch),
            "plc_total": lambda: total_denoise_loss(model, batch, 4.0, perturbations),
            "deblur": lambda: deblur_loss(model, blur, batch),
            "proxy": lambda: proxy_loss(model, batch.y, kernel, noise, x_prox=x_prox),
        }
        for name, loss_fn in losses.items():
            result = check_gradients(loss_fn, list(model.parameters()))
            reports.append(make_report(
                f"gradients_{name}_seed{seed}", "equality", float(len(result.failures)), 0.0, result.checked,
                components={"max_relative_error": result.max_relative_error, "refined": float(result.refined)},
                message="; ".join(result.failures[:3]),
            ))
    return reports


def remark2_suite(rng: SeededRng, samples: int, pool: RealizationPool, out_dir: Optional[Path]) -> List[PropCheckReport]:
    """Terme supplémentaire quand Var(z) = (1 + β)·Var(n), compensation du bruit apparié"""
    shape = (1, 8, 8)
    denoiser = _random_linear(shape, rng.substream(0), gain=0.5)
    x = rng.substream(1).uniform(0.0, 1.0, shape)
    reports = []
    for k, beta in enumerate((-0.2, 0.0, 0.2)):
        spec = NoiseSpec.gaussian(0.1, aux_scale=1.0 + beta)
        report = check_env_extra_term(denoiser, x, spec, 0.5, samples, rng.substream(2 + k), pool=pool)
        reports.append(report.model_copy(update={"name": f"remark2_beta{beta:g}"}))
    reports.append(check_noise_compensation(
        denoiser, fixed_image(x), NoiseSpec.gaussian(0.1), 0.5, samples, rng.substream(9), pool=pool,
    ))
    return reports


def convexity_suite(rng: SeededRng, samples: int, pool: RealizationPool, out_dir: Optional[Path]) -> List[PropCheckReport]:
    x = torch.full((1, 4, 4), 0.05, dtype=torch.float64)
    N = max(samples, 64)
    return [
        check_convexity(rectifier, soft_shrink, weight, x, NoiseSpec.gaussian(0.1), 0.5, N, rng, pool=pool)
        .model_copy(update={"name": f"convexity_w{weight:g}"})
        for weight in (0.3, 0.7)
    ]


SuiteRunner = Callable[[SeededRng, int, RealizationPool, Optional[Path]], List[PropCheckReport]]

SUITES: Dict[str, SuiteRunner] = {
    "prop1": prop1_suite,
    "prop2": prop2_suite,
    "corollary": corollary_suite,
    "example1": example1_suite,
    "gradients": gradients_suite,
    "remark2": remark2_suite,
    "convexity": convexity_suite,
}

DEFAULT_SAMPLES = {
    "prop1": 100_000,
    "prop2": 20_000,
    "corollary": 100_000,
    "example1": 2_000,
    "gradients": 0,
    "remark2": 100_000,
    "convexity": 4_000,
}


def run_suite(
    name: str,
    seed: int,
    *,
    samples: Optional[int] = None,
    out_dir: Optional[Path] = None,
    pool: Optional[RealizationPool] = None,
) -> SuiteReport:
    """Exécute une suite (ou 'all') ; chaque suite tire sur son propre flux"""
    names = list(SUITES) if name == "all" else [name]
    for suite in names:
        if suite not in SUITES:
            raise ParameterError(f"Suite inconnue: {suite} (disponibles: {', '.join(SUITES)}, all)")
    pool = pool or RealizationPool()

    reports: List[PropCheckReport] = []
    for suite in names:
        stream_id = list(SUITES).index(suite)
        count = samples if samples is not None else DEFAULT_SAMPLES[suite]
        logger.info(f"🔧 Suite {suite} (graine {seed}, N={count})")
        reports.extend(SUITES[suite](SeededRng(seed, stream_id=stream_id), count, pool, out_dir))

    passed = all(r.passed for r in reports)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error(f"❌ {len(failed)} vérification(s) en échec: {', '.join(failed)}")
    else:
        logger.info(f"✅ {len(reports)} vérification(s) conformes")
    return SuiteReport(suite=name, seed=seed, samples=samples, passed=passed, reports=reports)
