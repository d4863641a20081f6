# Estimation de la variance du bruit à partir des observations bruitées
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from scipy import ndimage, stats

from ..core.errors import EstimationError, FitError, ParameterError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage
from ..decomposition.estimator import Denoiser, zLz_statistic
from ..noise_model.sampler import NoiseSpec

logger = logging.getLogger(__name__)

SMOOTH_WINDOW = 10
# Fenêtre i−4 … i+5 : ancre au coin supérieur gauche du bloc central 2×2
SMOOTH_ORIGIN = -1
SMOOTH_THRESHOLD = 0.02
# Garde d'arrondi sur f (carrés d'écarts de l'ordre de l'ulp)
ROUNDING_SLACK = 1e-20
LEVELS = 255
FLAT_SLOPE_RATIO = 0.1


def _planes(image: Union[TensorImage, np.ndarray]) -> np.ndarray:
    """(H, W) ou (C, H, W) → tableau (C, H, W) float64"""
    data = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    data = data.astype(np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ParameterError(f"Image (H,W) ou (C,H,W) attendue, reçu {data.shape}")
    return data


def neighbor_diff_map(y: Union[TensorImage, np.ndarray]) -> TensorImage:
    """d_i² = Σ_{j∈N(i)} (y_i − y_j)² / (2|N(i)|) sur les 4-voisins disponibles"""
    planes = _planes(y)
    if planes.shape[1] < 2 or planes.shape[2] < 2:
        raise ParameterError(f"Image trop petite pour les différences de voisins: {planes.shape[1:]}")

    total = np.zeros_like(planes)
    count = np.zeros_like(planes)
    vertical = (planes[:, 1:, :] - planes[:, :-1, :]) ** 2
    horizontal = (planes[:, :, 1:] - planes[:, :, :-1]) ** 2
    total[:, 1:, :] += vertical
    total[:, :-1, :] += vertical
    total[:, :, 1:] += horizontal
    total[:, :, :-1] += horizontal
    count[:, 1:, :] += 1
    count[:, :-1, :] += 1
    count[:, :, 1:] += 1
    count[:, :, :-1] += 1
    return torch.from_numpy(total / (2.0 * count))


def _box_mean(planes: np.ndarray) -> np.ndarray:
    """Moyenne sur fenêtre 10×10, bords nuls, noyau tronqué renormalisé"""
    kernel = np.ones((SMOOTH_WINDOW, SMOOTH_WINDOW))
    weights = ndimage.correlate(np.ones(planes.shape[1:]), kernel, mode="constant", cval=0.0, origin=SMOOTH_ORIGIN)
    out = np.empty_like(planes)
    for c, plane in enumerate(planes):
        out[c] = ndimage.correlate(plane, kernel, mode="constant", cval=0.0, origin=SMOOTH_ORIGIN) / weights
    return out


def smooth_mask(y: Union[TensorImage, np.ndarray]) -> Tuple[TensorImage, TensorImage]:
    """(s, F) : image lissée et masque des régions lisses f_i ≤ 0.02·(s_i − min s)"""
    planes = _planes(y)
    if planes.shape[1] < SMOOTH_WINDOW or planes.shape[2] < SMOOTH_WINDOW:
        raise ParameterError(f"Image plus petite que la fenêtre {SMOOTH_WINDOW}x{SMOOTH_WINDOW}")
    s = _box_mean(planes)
    f = _box_mean((s - planes) ** 2)
    mask = f <= SMOOTH_THRESHOLD * (s - s.min()) + ROUNDING_SLACK
    return torch.from_numpy(s), torch.from_numpy(mask)


@dataclass
class VarianceCurve:
    """Variance V(v) par niveau d'intensité v = k/255 et ajustement linéaire"""
    intensities: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    fit_mu: Optional[float] = None
    fit_lambda: Optional[float] = None
    fit_residuals: Optional[np.ndarray] = None

    @property
    def bins(self) -> List[Tuple[float, float, int]]:
        return [(float(v), float(V), int(n)) for v, V, n in zip(self.intensities, self.variances, self.counts)]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table = np.stack([self.intensities, self.variances, self.counts], axis=1)
        np.savetxt(path, table, delimiter=",", header="v,V,count", comments="", fmt=["%.6f", "%.10e", "%d"])
        return path


class _BinAccumulator:
    """Sommes et effectifs par niveau, cumulés sur plusieurs images"""

    def __init__(self):
        self.sums = np.zeros(LEVELS + 1)
        self.counts = np.zeros(LEVELS + 1, dtype=np.int64)

    def add(self, s: np.ndarray, mask: np.ndarray, d2: np.ndarray) -> None:
        levels = np.rint(s[mask] * LEVELS)
        values = d2[mask]
        keep = (levels >= 0) & (levels <= LEVELS)
        index = levels[keep].astype(np.int64)
        np.add.at(self.sums, index, values[keep])
        np.add.at(self.counts, index, 1)

    def curve(self) -> VarianceCurve:
        populated = self.counts > 0
        if not populated.any():
            raise EstimationError("Aucun pixel lisse exploitable : masque F vide ou hors de [0,1]")
        levels = np.nonzero(populated)[0]
        return VarianceCurve(
            intensities=levels / LEVELS,
            variances=self.sums[populated] / self.counts[populated],
            counts=self.counts[populated],
        )


def binned_variance(
    y: Union[TensorImage, Sequence[TensorImage]],
    s: Optional[Union[TensorImage, Sequence[TensorImage]]] = None,
    F: Optional[Union[TensorImage, Sequence[TensorImage]]] = None,
    d2: Optional[Union[TensorImage, Sequence[TensorImage]]] = None,
) -> VarianceCurve:
    """V(v) = moyenne des d_i² sur {i ∈ F, |s_i − v| < 0.5/255}.

    Accepte une image ou une liste d'images (moyenne pondérée par les effectifs) ;
    s, F et d² sont calculés lorsqu'ils ne sont pas fournis.
    """
    images = list(y) if isinstance(y, (list, tuple)) else [y]
    per_image = [list(v) if isinstance(v, (list, tuple)) else [v] if v is not None else None for v in (s, F, d2)]

    accumulator = _BinAccumulator()
    for k, image in enumerate(images):
        if per_image[0] is None or per_image[1] is None:
            smooth, mask = smooth_mask(image)
        else:
            smooth, mask = per_image[0][k], per_image[1][k]
        diffs = neighbor_diff_map(image) if per_image[2] is None else per_image[2][k]
        mask_np = _planes(mask).astype(bool)
        if not mask_np.any():
            logger.debug(f"Image {k}: masque F vide")
        accumulator.add(_planes(smooth), mask_np, _planes(diffs))

    curve = accumulator.curve()
    logger.info(f"Courbe de variance: {len(curve.counts)} niveaux, {int(curve.counts.sum())} pixels")
    return curve


@dataclass
class LinearFit:
    """V(v) ≈ (v − μ)/λ, ou variance constante lorsque la pente est négligeable"""
    mu: float
    lam: float
    slope: float
    intercept: float
    kind: str
    variance: Optional[float] = None
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "var_map":
            return np.full_like(np.asarray(v, dtype=np.float64), self.variance)
        return np.clip((np.asarray(v) - self.mu) / self.lam, 0.0, None)

    def to_noise_spec(self) -> NoiseSpec:
        if self.kind == "var_map":
            return NoiseSpec.gaussian(math.sqrt(self.variance))
        return NoiseSpec.poisson(self.lam, mu=self.mu)


def fit_linear(curve: VarianceCurve) -> LinearFit:
    """Moindres carrés pondérés par les effectifs sur les niveaux de variance > 0"""
    usable = curve.variances > 0
    v, V, counts = curve.intensities[usable], curve.variances[usable], curve.counts[usable]
    if len(v) < 2:
        raise FitError(f"Au moins 2 niveaux de variance positive requis, {len(v)} disponibles")
    if np.ptp(v) == 0:
        raise FitError("Ajustement dégénéré : toutes les intensités sont égales")

    slope, intercept = np.polyfit(v, V, 1, w=np.sqrt(counts))
    weighted_mean = float(np.average(V, weights=counts))

    if slope * np.ptp(v) < FLAT_SLOPE_RATIO * weighted_mean:
        residuals = V - weighted_mean
        fit = LinearFit(mu=-math.inf, lam=math.inf, slope=float(slope), intercept=float(intercept),
                        kind="var_map", variance=weighted_mean, residuals=residuals)
        logger.info(f"Variance indépendante de l'intensité: σ² ≈ {weighted_mean:.4e}")
    else:
        lam = 1.0 / slope
        mu = -intercept * lam
        residuals = V - (slope * v + intercept)
        fit = LinearFit(mu=float(mu), lam=float(lam), slope=float(slope), intercept=float(intercept),
                        kind="poisson", residuals=residuals)
        logger.info(f"Ajustement linéaire: μ = {mu:.4f}, λ = {lam:.3f}")

    curve.fit_mu, curve.fit_lambda, curve.fit_residuals = fit.mu, fit.lam, fit.residuals
    return fit


@dataclass
class FrameStack:
    """Trames a^(j) d'une même scène à bruits indépendants ; y = Σ_j a^(j)"""
    frames: List[TensorImage]

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ParameterError(f"Au moins 2 trames requises, reçu {len(self.frames)}")
        reference = tuple(self.frames[0].shape)
        for frame in self.frames:
            if tuple(frame.shape) != reference:
                raise ParameterError(f"Trames de formes différentes: {tuple(frame.shape)} vs {reference}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def observed(self) -> TensorImage:
        return torch.stack([f.to(torch.float64) for f in self.frames]).sum(dim=0)


def multiframe_variance(stack: FrameStack) -> TensorImage:
    """V_i = n/(n−1)·Σ_j (a_i^(j) − y_i/n)², estimateur sans biais de Var(y_i)"""
    n = stack.n_frames
    frames = torch.stack([f.to(torch.float64) for f in stack.frames])
    mean = frames.sum(dim=0) / n
    return n / (n - 1) * torch.sum((frames - mean) ** 2, dim=0)


class RefinementReport(BaseModel):
    """Table (λ candidat, E⟨z,Lz⟩) et choix retenu"""

    chosen: float
    table: List[Tuple[float, float]] = Field(default_factory=list)
    all_negative: bool = False
    monotone_trend: Optional[bool] = None
    warnings: List[str] = Field(default_factory=list)


def refine_lambda(
    train_fn: Callable[[float, SeededRng], Denoiser],
    candidate_lambdas: Sequence[float],
    x_const: TensorImage,
    alpha: float,
    rng: SeededRng,
    *,
    spec_factory: Callable[[float], NoiseSpec] = NoiseSpec.poisson,
    samples: int = 2000,
) -> RefinementReport:
    """Affine un modèle par λ candidat et retient le plus petit E⟨z,Lz⟩ positif"""
    if not candidate_lambdas:
        raise ParameterError("Aucun λ candidat")

    table: List[Tuple[float, float]] = []
    for k, lam in enumerate(candidate_lambdas):
        logger.info(f"🔧 Affinage pour λ = {lam}")
        denoiser = train_fn(lam, rng.substream(k))
        statistic = zLz_statistic(denoiser, x_const, spec_factory(lam), alpha, samples, rng.substream(10_000 + k))
        table.append((float(lam), float(statistic)))
        logger.info(f"λ = {lam}: E⟨z,Lz⟩ = {statistic:.4e}")

    warnings: List[str] = []
    positive = [(lam, stat) for lam, stat in table if stat > 0]
    if positive:
        chosen = min(positive, key=lambda row: row[1])[0]
    else:
        chosen = max(table, key=lambda row: row[1])[0]
        message = "Toutes les statistiques sont négatives : variance surestimée pour chaque candidat"
        logger.warning(f"⚠️ {message}")
        warnings.append(message)

    trend = None
    if len(table) >= 3:
        rho = stats.spearmanr([row[0] for row in table], [row[1] for row in table])[0]
        trend = bool(abs(rho) == 1.0)
        if not trend:
            warnings.append(f"Tendance non monotone (Spearman ρ = {rho:.2f})")

    logger.info(f"✅ λ retenu: {chosen}")
    return RefinementReport(chosen=float(chosen), table=table, all_negative=not positive, monotone_trend=trend,
                            warnings=warnings)


def estimate_noise_curve(images: Sequence[TensorImage]) -> Tuple[VarianceCurve, Optional[LinearFit]]:
    """Chaîne complète sur un corpus : masque, différences, courbe, ajustement"""
    curve = binned_variance(list(images))
    try:
        fit = fit_linear(curve)
    except FitError as e:
        logger.warning(f"⚠️ Ajustement impossible: {e}")
        fit = None
    return curve, fit
