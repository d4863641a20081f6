# Corpus d'images et flux de patchs (recadrage et retournements aléatoires)
import glob
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..core.errors import ParameterError
from ..core.rng import SeededRng
from ..core.tensor_io import read_pgm, read_tensor
from ..core.tensors import TensorImage
from ..losses.operators import DeblurOperator
from ..noise_model.sampler import NoiseSpec, sample_noise

logger = logging.getLogger(__name__)

PatchSize = Tuple[int, int]


def load_image(path: Union[str, Path]) -> TensorImage:
    """Image PGM (P5) ou tenseur PLDT, selon l'extension"""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    tensor = read_tensor(path)
    return tensor.unsqueeze(0) if tensor.dim() == 2 else tensor


def load_corpus(pattern: str) -> List[TensorImage]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise ParameterError(f"Aucune image ne correspond à: {pattern}")
    images = [load_image(p) for p in paths]
    logger.info(f"{len(images)} image(s) chargée(s) depuis {pattern}")
    return images


def synthetic_image(size: int, rng: SeededRng, rectangles: int = 6) -> TensorImage:
    """Rampe aléatoire + rectangles constants, valeurs dans [0, 1]"""
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    angle = rng.uniform_scalar(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * rows + np.sin(angle) * cols
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1.0)
    image = rng.uniform_scalar(0.1, 0.4) + rng.uniform_scalar(0.0, 0.3) * ramp

    for _ in range(rectangles):
        top, left = (int(v) for v in rng.integers(0, size - 2, (2,)))
        height, width = (int(v) for v in rng.integers(3, max(4, size // 2), (2,)))
        image[top:top + height, left:left + width] = rng.uniform_scalar(0.0, 1.0)
    return torch.from_numpy(np.clip(image, 0.0, 1.0)).unsqueeze(0).to(torch.float64)


def synthetic_corpus(count: int, size: int, rng: SeededRng) -> List[TensorImage]:
    """Corpus de `count` images constantes par morceaux + rampe, de taille size×size"""
    if count < 1 or size < 4:
        raise ParameterError(f"Corpus synthétique invalide: count={count}, size={size}")
    return [synthetic_image(size, rng.substream(k)) for k in range(count)]


def corrupt_corpus(
    clean: Sequence[TensorImage],
    spec: NoiseSpec,
    rng: SeededRng,
    operator: Optional[DeblurOperator] = None,
) -> List[TensorImage]:
    """Une observation unique y = A·x + n par image (A = identité par défaut)"""
    noisy = []
    for k, x in enumerate(clean):
        blurred = operator(x) if operator is not None else x
        noisy.append(blurred + sample_noise(spec, blurred, rng.substream(k)))
    return noisy


def flip(patch: TensorImage, horizontal: bool, vertical: bool) -> TensorImage:
    dims = [d for d, active in ((-1, horizontal), (-2, vertical)) if active]
    return torch.flip(patch, dims) if dims else patch


@dataclass(frozen=True)
class PatchWindow:
    """Position et retournements d'un patch, réapplicables à une carte alignée sur l'image"""
    top: int
    left: int
    height: int
    width: int
    horizontal: bool = False
    vertical: bool = False

    def apply(self, image: TensorImage) -> TensorImage:
        crop = image[..., self.top:self.top + self.height, self.left:self.left + self.width]
        return flip(crop, self.horizontal, self.vertical).clone()


def random_window(
    shape: Tuple[int, int],
    patch_size: PatchSize,
    rng: SeededRng,
    flips: Tuple[bool, bool] = (True, True),
) -> PatchWindow:
    """Recadrage uniforme puis retournements indépendants de probabilité 1/2"""
    ph, pw = patch_size
    height, width = shape
    top = int(rng.integers(0, height - ph + 1))
    left = int(rng.integers(0, width - pw + 1))
    horizontal = flips[0] and rng.coin(0.5)
    vertical = flips[1] and rng.coin(0.5)
    return PatchWindow(top, left, ph, pw, bool(horizontal), bool(vertical))


def usable_images(corpus: Sequence[TensorImage], patch_size: PatchSize) -> List[TensorImage]:
    ph, pw = patch_size
    usable = []
    for index, image in enumerate(corpus):
        if image.shape[-2] < ph or image.shape[-1] < pw:
            logger.warning(f"⚠️ Image {index} ({tuple(image.shape[-2:])}) plus petite que le patch {patch_size}, ignorée")
            continue
        usable.append(image)
    if not usable:
        raise ParameterError(f"Aucune image du corpus n'atteint la taille de patch {patch_size}")
    return usable


def window_stream(
    corpus: Sequence[TensorImage],
    patch_size: PatchSize,
    rng: SeededRng,
    flips: Tuple[bool, bool] = (True, True),
) -> Iterator[Tuple[TensorImage, PatchWindow]]:
    """Flux infini de (patch, fenêtre) ; le k-ième ne dépend que du sous-flux k"""
    images = usable_images(corpus, patch_size)
    k = 0
    while True:
        stream = rng.substream(k)
        image = images[int(stream.integers(0, len(images)))]
        window = random_window(tuple(image.shape[-2:]), patch_size, stream, flips)
        yield window.apply(image), window
        k += 1


def patch_stream(
    corpus: Sequence[TensorImage],
    patch_size: PatchSize,
    rng: SeededRng,
    flips: Tuple[bool, bool] = (True, True),
) -> Iterator[TensorImage]:
    for patch, _ in window_stream(corpus, patch_size, rng, flips):
        yield patch


def sample_windows(
    corpus: Sequence[TensorImage],
    patch_size: PatchSize,
    count: int,
    rng: SeededRng,
    flips: Tuple[bool, bool] = (True, True),
) -> Tuple[TensorImage, List[PatchWindow]]:
    """Lot (count, C, h, w) et fenêtres correspondantes"""
    stream = window_stream(corpus, patch_size, rng, flips)
    drawn = [next(stream) for _ in range(count)]
    return torch.stack([patch for patch, _ in drawn]), [window for _, window in drawn]


def sample_patches(
    corpus: Sequence[TensorImage],
    patch_size: PatchSize,
    count: int,
    rng: SeededRng,
    flips: Tuple[bool, bool] = (True, True),
) -> TensorImage:
    return sample_windows(corpus, patch_size, count, rng, flips)[0]


def sliding_patches(image: TensorImage, size: int, step: int) -> TensorImage:
    """Fenêtres size×size se chevauchant, au pas `step` (40 et 10 à pleine échelle)"""
    if size < 1 or step < 1:
        raise ParameterError(f"Taille ({size}) et pas ({step}) doivent être ≥ 1")
    height, width = image.shape[-2:]
    if height < size or width < size:
        return torch.empty((0, image.shape[0], size, size), dtype=image.dtype)
    windows = image.unfold(-2, size, step).unfold(-2, size, step)
    # (C, nh, nw, size, size) -> (nh·nw, C, size, size)
    return windows.permute(1, 2, 0, 3, 4).reshape(-1, image.shape[0], size, size).clone()


def foreground_reweight(
    patches: TensorImage,
    rng: SeededRng,
    fraction: float = 0.8,
    drop: float = 0.8,
) -> TensorImage:
    """Trie les patchs par intensité moyenne et supprime au hasard `drop` des
    `fraction` plus sombres (données dominées par le fond)"""
    if not (0.0 <= fraction <= 1.0 and 0.0 <= drop <= 1.0):
        raise ParameterError(f"fraction ({fraction}) et drop ({drop}) doivent être dans [0, 1]")
    count = patches.shape[0]
    order = torch.argsort(patches.reshape(count, -1).mean(dim=1), stable=True)
    dark = int(round(fraction * count))
    removed = int(round(drop * dark))
    discard = set(order[:dark][torch.from_numpy(rng.permutation(dark)[:removed])].tolist()) if removed else set()
    keep = [i for i in order.tolist() if i not in discard]
    logger.debug(f"Repondération: {removed} patch(s) sombres retirés sur {count}")
    return patches[keep]
