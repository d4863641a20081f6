# Sauvegarde des modèles : un fichier PLDT par paramètre + manifeste JSON
import logging
from pathlib import Path
from typing import List, Tuple, Union

from pydantic import BaseModel, ConfigDict

from ..core.errors import FormatError
from ..core.tensor_io import read_tensor, write_tensor
from .model import DenoiserModel, ModelArchitecture

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class CheckpointManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = 1
    architecture: ModelArchitecture
    step: int
    seed: int
    parameters: List[str]


def save_checkpoint(directory: Union[str, Path], model: DenoiserModel, step: int, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    names = []
    for name, param in model.named_parameters():
        write_tensor(directory / f"{name}.pldt", param)
        names.append(name)

    manifest = CheckpointManifest(architecture=model.architecture, step=step, seed=seed, parameters=names)
    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"💾 Checkpoint écrit: {directory} (pas {step})")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Tuple[DenoiserModel, CheckpointManifest]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"Manifeste absent: {manifest_path}")
    manifest = CheckpointManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))

    model = DenoiserModel(manifest.architecture)
    expected = [name for name, _ in model.named_parameters()]
    if sorted(expected) != sorted(manifest.parameters):
        raise FormatError(f"Paramètres du manifeste incompatibles avec l'architecture: {manifest.parameters}")
    model.restore({name: read_tensor(directory / f"{name}.pldt") for name in expected})

    logger.info(f"Modèle chargé depuis: {directory} (pas {manifest.step}, graine {manifest.seed})")
    return model, manifest
