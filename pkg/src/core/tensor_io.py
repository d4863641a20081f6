# Lecture et écriture des images PGM (P5) et des conteneurs de tenseurs PLDT
import logging
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import torch

from .errors import FormatError, ParameterError
from .tensors import TensorImage, check_finite

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PLDT_MAGIC = b"PLDT"
PLDT_VERSION = 1
_WHITESPACE = b" \t\n\r\v\f"


def _pgm_tokens(raw: bytes, count: int) -> Tuple[List[bytes], int]:
    """Extraction des `count` premiers jetons d'en-tête (commentaires # ignorés)"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(raw):
            raise FormatError("En-tête PGM tronqué")
        byte = raw[pos:pos + 1]
        if byte == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise FormatError("Commentaire PGM non terminé")
            pos = end + 1
            continue
        if byte in _WHITESPACE:
            pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1] not in _WHITESPACE and raw[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(raw[start:pos])
    # Un unique caractère blanc sépare l'en-tête des données
    if pos >= len(raw) or raw[pos:pos + 1] not in _WHITESPACE:
        raise FormatError("Séparateur manquant après l'en-tête PGM")
    return tokens, pos + 1


def read_pgm(path: PathLike) -> TensorImage:
    """Lecture d'une image PGM binaire 8 bits ; le pixel k vaut k/255. Forme (1, H, W)."""
    raw = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"Nombre magique PGM invalide: {tokens[0]!r} (P5 attendu)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise FormatError(f"En-tête PGM non numérique: {e}") from e
    if width <= 0 or height <= 0:
        raise FormatError(f"Dimensions PGM invalides: {width}x{height}")
    if maxval != 255:
        raise FormatError(f"maxval={maxval} non supporté (255 attendu)")

    payload = raw[offset:offset + width * height]
    if len(payload) != width * height:
        raise FormatError(f"Données PGM tronquées: {len(payload)} octets sur {width * height}")

    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    logger.debug(f"PGM lu: {path} ({width}x{height})")
    return torch.from_numpy(pixels.astype(np.float64) / 255.0).unsqueeze(0)


def write_pgm(path: PathLike, image: TensorImage) -> Path:
    """Écriture PGM P5 ; les valeurs sont bornées à [0,1] puis multipliées par 255"""
    data = image.detach().to(torch.float64)
    if data.dim() == 3:
        if data.shape[0] != 1:
            raise ParameterError(f"PGM monocanal uniquement, reçu {data.shape[0]} canaux")
        data = data[0]
    if data.dim() != 2:
        raise ParameterError(f"Forme d'image invalide pour PGM: {tuple(image.shape)}")
    pixels = np.rint(np.clip(data.numpy(), 0.0, 1.0) * 255.0).astype(np.uint8)

    height, width = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
    logger.debug(f"PGM écrit: {path}")
    return path


def write_tensor(path: PathLike, tensor: TensorImage) -> Path:
    """Écriture d'un conteneur PLDT (en-tête little-endian, charge utile float32)"""
    data = check_finite(tensor.detach().to(torch.float64), "tenseur PLDT")
    extents = tuple(int(s) for s in data.shape)
    if any(e >= 1 << 32 for e in extents):
        raise ParameterError(f"Dimension trop grande pour PLDT: {extents}")

    header = PLDT_MAGIC + struct.pack("<HH", PLDT_VERSION, len(extents))
    header += struct.pack(f"<{len(extents)}I", *extents)
    payload = data.numpy().astype("<f4").tobytes(order="C")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)
    return path


def read_tensor(path: PathLike) -> TensorImage:
    """Lecture d'un conteneur PLDT en float64"""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"Fichier PLDT tronqué: {path}")
    if raw[:4] != PLDT_MAGIC:
        raise FormatError(f"Nombre magique PLDT invalide: {raw[:4]!r}")
    version, rank = struct.unpack("<HH", raw[4:8])
    if version != PLDT_VERSION:
        raise FormatError(f"Version PLDT non supportée: {version}")

    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise FormatError("Dimensions PLDT tronquées")
    extents = struct.unpack(f"<{rank}I", raw[8:header_end])
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1

    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise FormatError(f"Charge utile PLDT de {len(payload)} octets, {4 * count} attendus")

    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(extents)
    return torch.from_numpy(values.copy())
