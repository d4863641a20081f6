import pytest
import torch

from src.config.settings import settings
from src.core.rng import SeededRng
from src.diffcore.model import DenoiserModel, ModelArchitecture
from src.noise_model.sampler import NoiseSpec
from src.verification.oracles import LinearDenoiser


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def small_image(rng):
    # Image 8×8 à valeurs dans [0.2, 0.8]
    return rng.substream(99).uniform(0.2, 0.8, (1, 8, 8))


@pytest.fixture
def gaussian_spec():
    return NoiseSpec.gaussian(0.1)


@pytest.fixture
def linear_denoiser(rng):
    return LinearDenoiser.random((1, 8, 8), rng.substream(7), gain=0.8, offset_std=0.05)


@pytest.fixture
def tiny_model():
    return DenoiserModel(ModelArchitecture(depth=3, width=4), SeededRng(0))


@pytest.fixture
def run_dirs(tmp_path, monkeypatch):
    # Répertoires de sortie et de journaux isolés par test
    monkeypatch.setattr(settings, "output_directory", str(tmp_path / "runs"))
    monkeypatch.setattr(settings, "log_directory", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "threads", None)
    return tmp_path


@pytest.fixture
def identity():
    return lambda v: v


@pytest.fixture
def dyadic_image():
    # Valeurs k/256 exactes en float32 comme en float64
    values = torch.arange(64, dtype=torch.float64).reshape(1, 8, 8) / 256.0
    return values
