# Générateur des artefacts d'exécution : rapports JSON, tables CSV, images PGM/PLDT
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from ..config.settings import settings
from ..core.tensor_io import write_pgm, write_tensor
from ..core.tensors import TensorImage

logger = logging.getLogger(__name__)

Payload = Union[BaseModel, Dict[str, Any]]


def _plain(value: Any) -> Any:
    """Conversion en types JSON ; les non-finis deviennent des chaînes explicites"""
    if isinstance(value, BaseModel):
        return _plain(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


class ReportGenerator:
    """Écrit les artefacts d'une exécution dans un répertoire dédié.

    Les rapports embarquent la configuration et la graine, sans horodatage :
    deux exécutions identiques produisent des fichiers identiques octet pour octet.
    """

    def __init__(self, run_directory: Optional[Union[str, Path]] = None):
        self.run_directory = Path(run_directory or settings.output_directory)
        self.run_directory.mkdir(parents=True, exist_ok=True)
        logger.debug(f"Générateur de rapports initialisé: {self.run_directory}")

    def path(self, name: str) -> Path:
        target = self.run_directory / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def write_report(
        self,
        name: str,
        report: Payload,
        config: Optional[Payload] = None,
        seed: Optional[int] = None,
    ) -> Path:
        """Rapport JSON {command, config, seed, report} à clés triées"""
        document = {
            "command": Path(name).stem,
            "config": _plain(config) if config is not None else None,
            "seed": seed,
            "report": _plain(report),
        }
        target = self.path(name)
        target.write_text(json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        logger.info(f"💾 Rapport écrit: {target}")
        return target

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[float]]) -> Path:
        table = np.asarray(list(rows), dtype=np.float64).reshape(-1, len(header))
        target = self.path(name)
        np.savetxt(target, table, delimiter=",", header=",".join(header), comments="", fmt="%.10e")
        logger.info(f"💾 Table écrite: {target} ({table.shape[0]} lignes)")
        return target

    def write_image(self, name: str, image: TensorImage) -> Path:
        """PGM (bornage à [0, 1] à l'export uniquement) ou PLDT selon l'extension"""
        target = self.path(name)
        if target.suffix.lower() == ".pgm":
            write_pgm(target, image)
        else:
            write_tensor(target, image)
        logger.info(f"💾 Image écrite: {target}")
        return target


def summary_text(reports: Sequence[BaseModel]) -> str:
    """Résumé lisible d'une liste de PropCheckReport (une ligne par vérification)"""
    lines = []
    for report in reports:
        status = "IGNORÉE" if getattr(report, "skipped", False) else ("OK" if report.passed else "ÉCHEC")
        components = ", ".join(f"{k}={v:.4g}" for k, v in sorted(report.components.items()))
        lines.append(f"[{status}] {report.name}: {report.statistic:.4e} ≤ {report.tolerance:.4e} ({components})")
    return "\n".join(lines)
