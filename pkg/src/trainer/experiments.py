# Balayages à échelle bureau : γ, niveau de bruit au test, variance auxiliaire mal estimée
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from scipy import stats

from ..core.errors import ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage
from ..decomposition.estimator import zLz_statistic
from ..diffcore.model import DenoiserModel
from ..noise_model.sampler import NoiseSpec
from .data import corrupt_corpus
from .metrics import evaluate, psnr
from .trainer import HeldOut, TrainConfig, TrainResult, train_denoiser

logger = logging.getLogger(__name__)


class SweepTable(BaseModel):
    """Table de balayage sérialisable (une ligne par valeur du paramètre)"""

    parameter: str
    columns: List[str]
    rows: List[List[float]] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)

    def column(self, name: str) -> List[float]:
        index = self.columns.index(name)
        return [row[index] for row in self.rows]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, np.asarray(self.rows, dtype=np.float64).reshape(-1, len(self.columns)),
                   delimiter=",", header=",".join(self.columns), comments="", fmt="%.10e")
        return path


def gamma_sweep(
    config: TrainConfig,
    corpus: Sequence[TensorImage],
    gammas: Sequence[float],
    rng: SeededRng,
    held_out: HeldOut,
) -> SweepTable:
    """PSNR/SSIM de contrôle pour chaque poids γ de la pénalité (stabilité en γ)"""
    table = SweepTable(parameter="gamma", columns=["gamma", "psnr", "ssim"])
    for k, gamma in enumerate(gammas):
        run = config.model_copy(update={"gamma": float(gamma)})
        result = train_denoiser(run, corpus, rng.substream(k), held_out)
        report = evaluate(result.model, held_out[0], held_out[1])
        table.rows.append([float(gamma), report.psnr_db, report.ssim])
        logger.info(f"γ = {gamma:g}: PSNR {report.psnr_db:.2f} dB, SSIM {report.ssim:.4f}")
    return table


def noise_level_sweep(
    model,
    clean: Sequence[TensorImage],
    levels: Sequence[float],
    rng: SeededRng,
    kind: str = "poisson",
) -> SweepTable:
    """Robustesse à un niveau de bruit de test différent de celui de l'entraînement"""
    if kind not in ("poisson", "gaussian"):
        raise ParameterError(f"Balayage de bruit non pris en charge pour: {kind}")
    column = "lambda" if kind == "poisson" else "sigma"
    table = SweepTable(parameter=column, columns=[column, "psnr_noisy", "psnr_denoised", "ssim_denoised"])
    for k, level in enumerate(levels):
        spec = NoiseSpec.poisson(level) if kind == "poisson" else NoiseSpec.gaussian(level)
        noisy = corrupt_corpus(clean, spec, rng.substream(k))
        report = evaluate(model, noisy, clean)
        baseline = float(np.mean([psnr(y, x) for y, x in zip(noisy, clean)]))
        table.rows.append([float(level), baseline, report.psnr_db, report.ssim])
    return table


def env_sweep(
    config: TrainConfig,
    corpus: Sequence[TensorImage],
    betas: Sequence[float],
    rng: SeededRng,
    held_out: Optional[HeldOut] = None,
    x_const_value: float = 0.5,
    samples: int = 2000,
) -> SweepTable:
    """Entraîne avec Var(z) = (1 + β)·Var(n) et mesure ⟨z, Lz⟩ sur une image constante.

    La décroissance de ⟨z, Lz⟩ avec β est une tendance empirique : un défaut de
    monotonie produit un avertissement, pas une erreur.
    """
    base = config.noise_spec
    ph, pw = config.patch_size
    x_const = torch.full((config.architecture.channels, ph, pw), x_const_value, dtype=torch.float64)
    table = SweepTable(parameter="beta", columns=["beta", "psnr", "zlz"])
    for k, beta in enumerate(betas):
        if 1.0 + beta < 0:
            raise ParameterError(f"β = {beta} donne une variance auxiliaire négative")
        run = config.model_copy(update={"noise": base.with_aux_scale(1.0 + beta).to_text()})
        result = train_denoiser(run, corpus, rng.substream(k).substream(0), held_out)
        psnr_db = evaluate(result.model, held_out[0], held_out[1]).psnr_db if held_out else float("nan")
        # z tiré à la variance d'entraînement (1 + β)·Var(n)
        measured = base.with_aux_scale(1.0 + beta).localized(lambda m: m[..., :ph, :pw])
        zlz = zLz_statistic(result.model, x_const, measured, 1.0, samples, rng.substream(k).substream(1))
        table.rows.append([float(beta), psnr_db, zlz])
        logger.info(f"β = {beta:+g}: ⟨z, Lz⟩ = {zlz:.4e}")

    order = np.argsort(table.column("beta"))
    zlz_sorted = np.asarray(table.column("zlz"))[order]
    if len(zlz_sorted) > 1 and not np.all(np.diff(zlz_sorted) < 0):
        rho = stats.spearmanr(np.asarray(table.column("beta"))[order], zlz_sorted)[0]
        message = f"⟨z, Lz⟩ non strictement décroissant en β (Spearman {rho:.2f})"
        logger.warning(f"⚠️ {message}")
        table.warnings.append(message)
    return table


def fine_tune_fn(
    base: TrainResult,
    corpus: Sequence[TensorImage],
    steps: int = 2000,
    spec_factory: Callable[[float], NoiseSpec] = NoiseSpec.poisson,
) -> Callable[[float, SeededRng], DenoiserModel]:
    """Fonction d'affinage pour refine_lambda.

    Chaque appel (niveau, rng) repart d'une copie du modèle de base et de ses
    moments d'Adam, puis effectue `steps` pas de la perte complète (étape 2)
    avec la loi `spec_factory(niveau)`, au dernier taux du calendrier de base.
    """
    if steps < 1:
        raise ParameterError(f"Budget d'affinage invalide: {steps}")
    config = base.config
    lr = config.lr_at(max(config.total_steps - 1, 0))

    def train(level: float, rng: SeededRng) -> DenoiserModel:
        run = config.model_copy(update={
            "noise": spec_factory(level).to_text(),
            "stage1_steps": 0,
            "stage2_steps": steps,
            "lr_schedule": [(0, lr)],
        })
        logger.info(f"🔧 Affinage {steps} pas, bruit {run.noise}")
        return train_denoiser(run, corpus, rng, initial_model=base.model, optimizer_state=base.optimizer_state).model

    return train
