# Configuration d'exécution JSON (validée avant tout calcul)
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..core.errors import ConfigError
from ..core.rng import SeededRng
from ..core.tensors import TensorImage
from ..losses.operators import DeblurOperator
from ..trainer.data import corrupt_corpus, load_corpus, synthetic_corpus
from ..trainer.trainer import TrainConfig

logger = logging.getLogger(__name__)


class CorpusConfig(BaseModel):
    """Corpus synthétique (par défaut) ou motif glob d'images PGM/PLDT"""

    model_config = ConfigDict(extra="forbid")

    images: Optional[str] = None
    observed: bool = True
    count: int = Field(default=200, ge=1)
    size: int = Field(default=32, ge=4)
    held_out: int = Field(default=20, ge=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: TrainConfig = Field(default_factory=TrainConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    kernel: Optional[str] = None
    output: Optional[str] = None


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Configuration illisible: {path} ({e})") from e
    try:
        return RunConfig.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON invalide dans {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"Configuration invalide {path}:\n{e}") from e


def prepare_corpus(
    config: RunConfig,
    operator: Optional[DeblurOperator] = None,
) -> Tuple[List[TensorImage], Optional[Tuple[List[TensorImage], List[TensorImage]]]]:
    """Corpus d'entraînement et couple (observé, propre) de contrôle.

    Un corpus synthétique est corrompu une seule fois par image (une observation
    par image). Les images chargées sont des observations si `observed`, sinon
    des images propres corrompues de la même façon.
    """
    train, corpus = config.train, config.corpus
    rng = SeededRng(train.seed, stream_id=1)
    spec = train.noise_spec

    if corpus.images is not None:
        images = load_corpus(corpus.images)
        if corpus.observed:
            if train.mode == "supervised_baseline":
                raise ConfigError("La référence supervisée requiert des images propres (observed=false)")
            return images, None
        clean = images
    else:
        clean = synthetic_corpus(corpus.count + corpus.held_out, corpus.size, rng.substream(0))

    train_clean, held_clean = clean[:len(clean) - corpus.held_out], clean[len(clean) - corpus.held_out:]
    if not train_clean:
        raise ConfigError("Corpus d'entraînement vide après réservation des images de contrôle")
    held_out = None
    if held_clean:
        held_out = (corrupt_corpus(held_clean, spec, rng.substream(2), operator), list(held_clean))
    if train.mode == "supervised_baseline":
        return list(train_clean), held_out
    return corrupt_corpus(train_clean, spec, rng.substream(1), operator), held_out
