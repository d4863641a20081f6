# Entraînement en deux étapes : débruitage DPLD, référence supervisée et défloutage
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..core.errors import NonFiniteGradientError, ParameterError, TrainingDivergedError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage
from ..diffcore.autodiff import backward
from ..diffcore.model import DenoiserModel, ModelArchitecture
from ..diffcore.optimizer import AdamOptimizer, AdamState
from ..losses.objectives import deblur_loss, proxy_loss, supervised_loss, total_denoise_loss
from ..losses.operators import DeblurOperator, random_motion_kernel
from ..losses.perturbation import build_perturbation_batch, plc_penalty_batch
from ..noise_model.sampler import (
    CorruptedBatch,
    CorruptedSample,
    NoiseSpec,
    NoiseSpecs,
    make_sample,
    sample_auxiliary,
    sample_auxiliary_batch,
    spec_at,
)
from .data import PatchSize, PatchWindow, sample_windows, usable_images
from .metrics import MetricsReport, evaluate

logger = logging.getLogger(__name__)

TrainMode = Literal["denoise", "deblur", "supervised_baseline"]
HeldOut = Tuple[Sequence[TensorImage], Sequence[TensorImage]]


class TrainConfig(BaseModel):
    """Hyperparamètres d'entraînement (échelle bureau par défaut)"""

    model_config = ConfigDict(extra="forbid")

    mode: TrainMode = "denoise"
    stage1_steps: int = Field(default=2000, ge=0)
    stage2_steps: int = Field(default=2000, ge=0)
    lr_schedule: Optional[List[Tuple[int, float]]] = None
    batch_size: int = Field(default=16, ge=1)
    patch_size: PatchSize = (32, 32)
    alpha_stage1: float = 1.0
    alpha_stage2_range: Tuple[float, float] = (0.1, 0.5)
    gamma: float = Field(default=4.0, ge=0.0)
    gamma_prox: float = Field(default=0.0, ge=0.0)
    proxy_kernel_size: int = Field(default=9, ge=1)
    seed: int = 0
    noise: str = "gaussian:0.09803921568627451"
    architecture: ModelArchitecture = Field(default_factory=ModelArchitecture)
    eval_interval: int = Field(default=200, ge=1)

    @field_validator("noise")
    @classmethod
    def _valid_noise(cls, value: str) -> str:
        NoiseSpec.parse(value)
        return value

    @field_validator("alpha_stage1")
    @classmethod
    def _nonzero_alpha(cls, value: float) -> float:
        if value == 0:
            raise ValueError("alpha_stage1 doit être non nul")
        return value

    @field_validator("alpha_stage2_range")
    @classmethod
    def _valid_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.0 < low <= high:
            raise ValueError(f"Intervalle de alpha invalide: {value}")
        return value

    @field_validator("patch_size")
    @classmethod
    def _valid_patch(cls, value: PatchSize) -> PatchSize:
        if min(value) < 1:
            raise ValueError(f"Taille de patch invalide: {value}")
        return value

    @model_validator(mode="after")
    def _increasing_schedule(self) -> "TrainConfig":
        schedule = self.lr_schedule
        if schedule is not None:
            steps = [s for s, _ in schedule]
            if not schedule or steps[0] != 0:
                raise ValueError("Le calendrier de taux d'apprentissage doit commencer au pas 0")
            if any(b <= a for a, b in zip(steps, steps[1:])):
                raise ValueError(f"Pas du calendrier non strictement croissants: {steps}")
            if any(lr <= 0 for _, lr in schedule):
                raise ValueError("Taux d'apprentissage strictement positifs requis")
        return self

    @property
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec.parse(self.noise)

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def schedule(self) -> List[Tuple[int, float]]:
        """Calendrier explicite, ou 1e-3 → 1e-4 à 60 % de chaque étape.

        Par défaut l'étape 2 repart de 1e-3 au pas stage1_steps (les moments
        d'Adam sont conservés) ; un calendrier explicite sans ce point garde le
        taux décru.
        """
        if self.lr_schedule is not None:
            return list(self.lr_schedule)
        points = {0: 1e-3}
        if self.stage1_steps:
            points[int(0.6 * self.stage1_steps)] = 1e-4
        if self.stage2_steps:
            points[self.stage1_steps] = 1e-3
            points[self.stage1_steps + int(0.6 * self.stage2_steps)] = 1e-4
        return sorted(points.items())

    def lr_at(self, step: int) -> float:
        lr = self.schedule()[0][1]
        for start, value in self.schedule():
            if step >= start:
                lr = value
        return lr

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """2·10⁵ pas par étape, 1e-3 → 1e-4 au pas 6·10⁴ → 5e-5 au pas 1.2·10⁵"""
        values = dict(
            stage1_steps=200_000, stage2_steps=200_000,
            lr_schedule=[(0, 1e-3), (60_000, 1e-4), (120_000, 5e-5)],
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def deblur_defaults(cls, **overrides) -> "TrainConfig":
        """α ∈ [0.1, 0.2] et γ = γ_prox = 1/16 en seconde phase"""
        values = dict(mode="deblur", alpha_stage2_range=(0.1, 0.2), gamma=1.0 / 16, gamma_prox=1.0 / 16)
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainingHistory:
    """Lignes (pas, perte, PSNR, SSIM) ; PSNR et SSIM à NaN sans données de contrôle"""
    rows: List[Tuple[int, float, float, float]] = field(default_factory=list)

    def record(self, step: int, loss: float, metrics: Optional[MetricsReport] = None) -> None:
        psnr_db = metrics.psnr_db if metrics is not None else math.nan
        ssim_value = metrics.ssim if metrics is not None else math.nan
        self.rows.append((step, loss, psnr_db, ssim_value))

    @property
    def last_psnr(self) -> float:
        for row in reversed(self.rows):
            if not math.isnan(row[2]):
                return row[2]
        return math.nan

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table = np.asarray(self.rows, dtype=np.float64).reshape(-1, 4)
        np.savetxt(path, table, delimiter=",", header="step,loss,psnr,ssim", comments="", fmt=["%d", "%.10e", "%.6f", "%.6f"])
        return path


@dataclass
class TrainResult:
    model: DenoiserModel
    history: TrainingHistory
    optimizer_state: AdamState
    config: TrainConfig


StepLoss = Callable[[int, int], torch.Tensor]


def stage_of(config: TrainConfig, step: int) -> int:
    """1 avant la frontière des étapes, 2 ensuite (pas indexés à partir de 0)"""
    return 1 if step < config.stage1_steps else 2


def draw_alphas(config: TrainConfig, stage: int, count: int, rng: SeededRng) -> List[float]:
    if stage == 1:
        return [config.alpha_stage1] * count
    low, high = config.alpha_stage2_range
    return [rng.substream(i).uniform_scalar(low, high) for i in range(count)]


def build_batch(patches: TensorImage, spec: NoiseSpecs, alphas: Sequence[float], rng: SeededRng, clean: bool) -> CorruptedBatch:
    """Patchs observés (z tiré sachant y) ou propres (n puis z tirés), un sous-flux par patch.

    `spec` est une loi commune ou une loi par patch.
    """
    samples = []
    for i, (patch, alpha) in enumerate(zip(patches, alphas)):
        stream = rng.substream(i)
        local = spec_at(spec, i)
        if clean:
            samples.append(make_sample(patch, local, alpha, stream))
        else:
            samples.append(CorruptedSample.from_components(patch, sample_auxiliary(local, patch, stream), alpha))
    return CorruptedBatch.stack(samples)


def patch_specs(spec: NoiseSpec, windows: Sequence[PatchWindow]) -> NoiseSpecs:
    """Carte de variance recadrée et retournée comme chaque patch ; loi commune sinon"""
    if spec.kind != "var_map":
        return spec
    return [spec.localized(window.apply) for window in windows]


def check_variance_map(spec: NoiseSpec, images: Sequence[TensorImage]) -> None:
    if spec.kind != "var_map":
        return
    shape = tuple(spec.var_map.shape[-2:])
    for index, image in enumerate(images):
        if tuple(image.shape[-2:]) != shape:
            raise ParameterError(
                f"Carte de variance {shape} non alignée sur l'image {index} ({tuple(image.shape[-2:])})"
            )


def _run_training(
    config: TrainConfig,
    model: DenoiserModel,
    step_loss: StepLoss,
    held_out: Optional[HeldOut],
    optimizer_state: Optional[AdamState] = None,
) -> TrainResult:
    """Boucle commune : Adam sur le calendrier, évaluation périodique, arrêt sur divergence"""
    params = list(model.parameters())
    names = [name for name, _ in model.named_parameters()]
    optimizer = AdamOptimizer(params, lr=config.lr_at(0), names=names)
    if optimizer_state is not None:
        optimizer.load_state(optimizer_state)
        logger.info(f"🔧 Reprise des moments d'Adam (pas {optimizer_state.step})")
    history = TrainingHistory()
    last_good = model.snapshot()

    def metrics() -> Optional[MetricsReport]:
        if held_out is None:
            return None
        return evaluate(model, held_out[0], held_out[1])

    if config.total_steps == 0:
        logger.info("Aucun pas d'entraînement : modèle initial renvoyé")
        return TrainResult(model, history, optimizer.state(), config)

    logger.info(f"🚀 Entraînement {config.mode}: {config.stage1_steps}+{config.stage2_steps} pas, graine {config.seed}")
    for step in range(config.total_steps):
        stage = stage_of(config, step)
        if step == config.stage1_steps and step > 0:
            logger.info(f"🔧 Étape 2 à partir du pas {step} (moments d'Adam conservés, lr {config.lr_at(step):.0e})")
        optimizer.set_lr(config.lr_at(step))

        loss = step_loss(step, stage)
        value = float(loss.detach())
        if not math.isfinite(value):
            model.restore(last_good)
            logger.error(f"❌ Perte non finie au pas {step}, retour au dernier état valide")
            raise TrainingDivergedError(f"Perte non finie ({value}) au pas {step}", step, last_good)
        try:
            optimizer.step(backward(loss, params))
        except NonFiniteGradientError as e:
            model.restore(last_good)
            logger.error(f"❌ {e}")
            raise TrainingDivergedError(str(e), step, last_good) from e
        last_good = model.snapshot()

        done = step + 1
        if done % config.eval_interval == 0 or done == config.total_steps:
            report = metrics()
            history.record(done, value, report)
            psnr_text = f", PSNR {report.psnr_db:.2f} dB" if report is not None else ""
            logger.info(f"Pas {done}/{config.total_steps} (étape {stage}): perte {value:.5e}{psnr_text}")

    logger.info(f"✅ Entraînement terminé ({config.total_steps} pas)")
    return TrainResult(model, history, optimizer.state(), config)


def _new_model(config: TrainConfig, rng: SeededRng, initial_model: Optional[DenoiserModel] = None) -> DenoiserModel:
    """Modèle neuf, ou copie indépendante de `initial_model` (affinage)"""
    model = DenoiserModel(config.architecture, rng.substream(0))
    if initial_model is not None:
        if initial_model.architecture != config.architecture:
            raise ParameterError(
                f"Architecture du modèle initial {initial_model.architecture.model_dump()} "
                f"différente de la configuration {config.architecture.model_dump()}"
            )
        model.restore(initial_model.snapshot())
    return model


def train_denoiser(
    config: TrainConfig,
    corpus: Sequence[TensorImage],
    rng: Optional[SeededRng] = None,
    held_out: Optional[HeldOut] = None,
    initial_model: Optional[DenoiserModel] = None,
    optimizer_state: Optional[AdamState] = None,
) -> TrainResult:
    """Débruiteur DPLD (corpus bruité seul) ou référence supervisée (corpus propre).

    Étape 1 : α = alpha_stage1, γ = 0. Étape 2 : α ~ U(alpha_stage2_range) par
    échantillon et pénalité de linéarité partielle de poids γ. La référence
    supervisée ne diffère que par l'assemblage de la perte.

    `initial_model` (non modifié) et `optimizer_state` servent à l'affinage
    d'un modèle déjà entraîné.
    """
    if config.mode not in ("denoise", "supervised_baseline"):
        raise ParameterError(f"train_denoiser ne gère pas le mode {config.mode}")
    rng = rng or SeededRng(config.seed)
    spec = config.noise_spec
    images = usable_images(corpus, config.patch_size)
    check_variance_map(spec, images)
    model = _new_model(config, rng, initial_model)
    supervised = config.mode == "supervised_baseline"
    batches = rng.substream(1)

    def step_loss(step: int, stage: int) -> torch.Tensor:
        stream = batches.substream(step)
        patches, windows = sample_windows(images, config.patch_size, config.batch_size, stream.substream(0))
        specs = patch_specs(spec, windows)
        alphas = draw_alphas(config, stage, config.batch_size, stream.substream(1))
        batch = build_batch(patches, specs, alphas, stream.substream(2), clean=supervised)
        if supervised:
            return supervised_loss(model, batch)
        if stage == 1 or config.gamma == 0:
            return total_denoise_loss(model, batch, 0.0)
        perturbations = build_perturbation_batch(batch.y_hat, stream.substream(3), specs, reference=batch.y)
        return total_denoise_loss(model, batch, config.gamma, perturbations)

    return _run_training(config, model, step_loss, held_out, optimizer_state)


def train_deblur(
    config: TrainConfig,
    corpus: Sequence[TensorImage],
    operator: DeblurOperator,
    rng: Optional[SeededRng] = None,
    held_out: Optional[HeldOut] = None,
) -> TrainResult:
    """Défloutage à partir d'observations floues et bruitées y = A·x + n.

    Phase 1 : perte de défloutage seule. Phase 2 : + γ_prox·perte proxy (un noyau
    de mouvement aléatoire par pas, bruit proxy de la loi de z) + γ·pénalité de
    linéarité partielle sur A∘R. À l'inférence, R s'applique directement.
    """
    if config.mode != "deblur":
        raise ParameterError(f"train_deblur requiert mode='deblur', reçu {config.mode}")
    rng = rng or SeededRng(config.seed)
    spec = config.noise_spec
    images = usable_images(corpus, config.patch_size)
    check_variance_map(spec, images)
    model = _new_model(config, rng)
    flips = (operator.is_symmetric(horizontal=True, vertical=False), operator.is_symmetric(horizontal=False, vertical=True))
    if not all(flips):
        logger.info(f"Noyau non symétrique : retournements limités à {flips}")
    batches = rng.substream(1)
    blurred_model = lambda v: operator(model(v))

    def step_loss(step: int, stage: int) -> torch.Tensor:
        stream = batches.substream(step)
        patches, windows = sample_windows(images, config.patch_size, config.batch_size, stream.substream(0), flips)
        specs = patch_specs(spec, windows)
        alphas = draw_alphas(config, stage, config.batch_size, stream.substream(1))
        batch = build_batch(patches, specs, alphas, stream.substream(2), clean=False)
        loss = deblur_loss(model, operator, batch)
        if stage == 1:
            return loss
        if config.gamma_prox > 0:
            kernel = random_motion_kernel(stream.substream(3), size=config.proxy_kernel_size)
            with torch.no_grad():
                x_prox = model(batch.y)
            noise = sample_auxiliary_batch(specs, batch.y, stream.substream(4))
            loss = loss + config.gamma_prox * proxy_loss(model, batch.y, kernel, noise, x_prox=x_prox)
        if config.gamma > 0:
            perturbations = build_perturbation_batch(batch.y_hat, stream.substream(5), specs, reference=batch.y)
            loss = loss + config.gamma * torch.mean(plc_penalty_batch(blurred_model, perturbations))
        return loss

    return _run_training(config, model, step_loss, held_out)
