# Processus de corruption n, vecteurs auxiliaires z et assemblage de ŷ et de la cible
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Union

import torch

from ..core.errors import DomainError, ParameterError
from ..core.rng import SeededRng
from ..core.tensor_io import read_tensor
from ..core.tensors import TensorImage, check_same_shape

logger = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian", "poisson", "var_map")


@dataclass(frozen=True)
class NoiseSpec:
    """Description du bruit réel n et de la loi du vecteur auxiliaire z.

    z est toujours gaussien, de variance appariée à celle de n multipliée par
    `aux_scale` (= 1 + β pour les expériences de variance mal estimée). Le type
    Poisson accepte un décalage `mu` : Var(n|x) = max(x − mu, 0)/λ.
    """
    kind: str
    sigma: float = 0.0
    lam: Optional[float] = None
    var_map: Optional[torch.Tensor] = field(default=None, compare=False, repr=False)
    var_map_path: Optional[str] = None
    aux_scale: float = 1.0
    mu: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ParameterError(f"Type de bruit inconnu: {self.kind} (attendu: {', '.join(NOISE_KINDS)})")
        if self.kind == "gaussian" and self.sigma < 0:
            raise ParameterError(f"sigma doit être ≥ 0, reçu {self.sigma}")
        if self.kind == "poisson" and (self.lam is None or self.lam <= 0):
            raise ParameterError(f"lambda doit être > 0, reçu {self.lam}")
        if not math.isfinite(self.mu) or (self.mu != 0.0 and self.kind != "poisson"):
            raise ParameterError(f"Décalage mu={self.mu} réservé au type poisson (fini)")
        if self.kind == "var_map":
            if self.var_map is None:
                raise ParameterError("var_map requiert une carte de variance")
            if bool((self.var_map < 0).any()) or not bool(torch.isfinite(self.var_map).all()):
                raise ParameterError("La carte de variance doit être finie et ≥ 0")
        if self.aux_scale < 0:
            raise ParameterError(f"aux_scale doit être ≥ 0, reçu {self.aux_scale}")

    # Constructeurs
    @classmethod
    def gaussian(cls, sigma: float, aux_scale: float = 1.0) -> "NoiseSpec":
        return cls(kind="gaussian", sigma=float(sigma), aux_scale=aux_scale)

    @classmethod
    def poisson(cls, lam: float, aux_scale: float = 1.0, mu: float = 0.0) -> "NoiseSpec":
        return cls(kind="poisson", lam=float(lam), aux_scale=aux_scale, mu=float(mu))

    @classmethod
    def from_var_map(cls, var_map: TensorImage, aux_scale: float = 1.0, path: Optional[str] = None) -> "NoiseSpec":
        return cls(kind="var_map", var_map=var_map.detach().to(torch.float64), var_map_path=path, aux_scale=aux_scale)

    @classmethod
    def parse(cls, text: str) -> "NoiseSpec":
        """Lecture de 'gaussian:0.098', 'poisson:30' ou 'var_map:carte.pldt'.

        Options après virgule : 'aux_scale=1.16' pour tous les types, 'mu=0.02'
        pour poisson.
        """
        head, *options = [part.strip() for part in text.split(",")]
        kind, sep, value = head.partition(":")
        if not sep or not value:
            raise ParameterError(f"Spécification de bruit invalide: '{text}'")
        values = {"aux_scale": 1.0, "mu": 0.0}
        for option in options:
            key, sep, raw = option.partition("=")
            if key not in values or not sep:
                raise ParameterError(f"Option de bruit inconnue: '{option}'")
            values[key] = _parse_float(raw, key)
        aux_scale, mu = values["aux_scale"], values["mu"]
        if kind == "poisson":
            return cls.poisson(_parse_float(value, "lambda"), aux_scale, mu)
        if mu != 0.0:
            raise ParameterError(f"Option mu réservée au type poisson: '{text}'")
        if kind == "gaussian":
            return cls.gaussian(_parse_float(value, "sigma"), aux_scale)
        if kind == "var_map":
            return cls.from_var_map(read_tensor(value), aux_scale, path=value)
        raise ParameterError(f"Type de bruit inconnu: '{kind}'")

    def to_text(self) -> str:
        if self.kind == "gaussian":
            head = f"gaussian:{self.sigma!r}"
        elif self.kind == "poisson":
            head = f"poisson:{self.lam!r}" if self.mu == 0.0 else f"poisson:{self.lam!r},mu={self.mu!r}"
        else:
            head = f"var_map:{self.var_map_path or '<mémoire>'}"
        return head if self.aux_scale == 1.0 else f"{head},aux_scale={self.aux_scale!r}"

    def matched(self) -> "NoiseSpec":
        """Même bruit, variance auxiliaire exactement appariée"""
        return replace(self, aux_scale=1.0)

    def with_aux_scale(self, aux_scale: float) -> "NoiseSpec":
        return replace(self, aux_scale=aux_scale)

    def localized(self, transform: Callable[[TensorImage], TensorImage]) -> "NoiseSpec":
        """Carte de variance passée par `transform` (recadrage et retournements d'un
        patch) ; les autres types sont homogènes et restent inchangés"""
        if self.kind != "var_map":
            return self
        return replace(self, var_map=transform(self.var_map).clone())

    # Moments
    def _map_like(self, x: TensorImage) -> TensorImage:
        try:
            return self.var_map.expand_as(x).to(torch.float64)
        except RuntimeError as e:
            raise ParameterError(
                f"Carte de variance {tuple(self.var_map.shape)} incompatible avec l'image {tuple(x.shape)}"
            ) from e

    def _excess(self, x: TensorImage) -> TensorImage:
        return torch.clamp(x - self.mu, min=0.0)

    def noise_variance(self, x: TensorImage) -> TensorImage:
        """Variance conditionnelle de n sachant x, par pixel"""
        if self.kind == "gaussian":
            return torch.full_like(x, self.sigma ** 2, dtype=torch.float64)
        if self.kind == "poisson":
            return self._excess(x) / self.lam
        return self._map_like(x)

    def auxiliary_variance(self, y: TensorImage) -> TensorImage:
        """Variance de z par pixel (pour Poisson, estimée à partir de l'observation y)"""
        if self.kind == "gaussian":
            return torch.full_like(y, self.aux_scale * self.sigma ** 2, dtype=torch.float64)
        if self.kind == "poisson":
            return self.aux_scale * self._excess(y) / self.lam
        return self.aux_scale * self._map_like(y)

    def sigma_max(self, y: TensorImage) -> float:
        """Racine de la plus grande variance par pixel du bruit (normalisation de M)"""
        if self.kind == "gaussian":
            return self.sigma
        if self.kind == "poisson":
            return float(torch.sqrt(torch.clamp(y.max() - self.mu, min=0.0) / self.lam))
        return float(torch.sqrt(self.var_map.max()))


def _parse_float(raw: str, name: str) -> float:
    try:
        return float(raw)
    except ValueError as e:
        raise ParameterError(f"Valeur invalide pour {name}: '{raw}'") from e


def sample_noise(spec: NoiseSpec, x: TensorImage, rng: SeededRng) -> TensorImage:
    """Tirage de n avec E[n|x] = 0"""
    if spec.kind == "gaussian":
        return spec.sigma * rng.normal(tuple(x.shape))
    if spec.kind == "poisson":
        if bool((x < 0).any()):
            raise DomainError("Bruit de Poisson: intensités négatives dans l'image propre")
        # Comptes sur la partie au-dessus du décalage
        excess = spec._excess(x)
        counts = rng.poisson(spec.lam * excess)
        return counts / spec.lam - excess
    return torch.sqrt(spec.noise_variance(x)) * rng.normal(tuple(x.shape))


def sample_auxiliary(spec: NoiseSpec, y: TensorImage, rng: SeededRng) -> TensorImage:
    """Tirage gaussien de z, centré, de variance appariée (× aux_scale)"""
    return torch.sqrt(spec.auxiliary_variance(y)) * rng.normal(tuple(y.shape))


@dataclass
class CorruptedSample:
    """Observation y, vecteur auxiliaire z, ŷ = y + αz et cible y − z/α"""
    y: TensorImage
    z: TensorImage
    alpha: float
    y_hat: TensorImage
    target: TensorImage
    x: Optional[TensorImage] = None
    n: Optional[TensorImage] = None

    @classmethod
    def from_components(
        cls,
        y: TensorImage,
        z: TensorImage,
        alpha: float,
        x: Optional[TensorImage] = None,
        n: Optional[TensorImage] = None,
    ) -> "CorruptedSample":
        if alpha == 0:
            raise ParameterError("alpha doit être non nul")
        check_same_shape(y, z, "y et z")
        return cls(y=y, z=z, alpha=float(alpha), y_hat=y + alpha * z, target=y - z / alpha, x=x, n=n)


def make_sample(x: TensorImage, spec: NoiseSpec, alpha: float, rng: SeededRng) -> CorruptedSample:
    """y = x + n puis z tiré sachant y"""
    if alpha == 0:
        raise ParameterError("alpha doit être non nul")
    n = sample_noise(spec, x, rng)
    y = x + n
    z = sample_auxiliary(spec, y, rng)
    return CorruptedSample.from_components(y, z, alpha, x=x, n=n)


def observe(y: TensorImage, spec: NoiseSpec, alpha: float, rng: SeededRng) -> CorruptedSample:
    """Échantillon construit à partir d'une observation bruitée seule (sans x)"""
    return CorruptedSample.from_components(y, sample_auxiliary(spec, y, rng), alpha)


NoiseSpecs = Union[NoiseSpec, Sequence[NoiseSpec]]


def spec_at(specs: NoiseSpecs, index: int) -> NoiseSpec:
    """Loi commune, ou loi propre à l'échantillon `index`"""
    return specs if isinstance(specs, NoiseSpec) else specs[index]


def sample_auxiliary_batch(specs: NoiseSpecs, y: TensorImage, rng: SeededRng) -> TensorImage:
    """z pour un lot (N, C, H, W) ; une loi par échantillon tire sur le sous-flux i"""
    if isinstance(specs, NoiseSpec):
        return sample_auxiliary(specs, y, rng)
    if len(specs) != y.shape[0]:
        raise ParameterError(f"{len(specs)} loi(s) de bruit pour un lot de {y.shape[0]}")
    return torch.stack([sample_auxiliary(spec, y[i], rng.substream(i)) for i, spec in enumerate(specs)])


@dataclass
class CorruptedBatch:
    """Lot empilé (N, C, H, W) ; alpha par échantillon"""
    y: TensorImage
    z: TensorImage
    alpha: torch.Tensor
    y_hat: TensorImage
    target: TensorImage
    x: Optional[TensorImage] = None

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def alpha_view(self) -> torch.Tensor:
        return self.alpha.reshape(-1, 1, 1, 1)

    @classmethod
    def stack(cls, samples: Sequence[CorruptedSample]) -> "CorruptedBatch":
        if not samples:
            raise ParameterError("Lot vide")
        reference = tuple(samples[0].y.shape)
        for sample in samples:
            if tuple(sample.y.shape) != reference:
                raise ParameterError(f"Formes hétérogènes dans le lot: {tuple(sample.y.shape)} vs {reference}")
        clean: List[TensorImage] = [s.x for s in samples if s.x is not None]
        return cls(
            y=torch.stack([s.y for s in samples]),
            z=torch.stack([s.z for s in samples]),
            alpha=torch.tensor([s.alpha for s in samples], dtype=torch.float64),
            y_hat=torch.stack([s.y_hat for s in samples]),
            target=torch.stack([s.target for s in samples]),
            x=torch.stack(clean) if len(clean) == len(samples) else None,
        )


def describe_spec(spec: NoiseSpec) -> dict:
    """Représentation sérialisable pour les rapports"""
    return {"noise": spec.to_text(), "kind": spec.kind, "aux_scale": spec.aux_scale}
