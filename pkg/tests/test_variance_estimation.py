import math

import numpy as np
import pytest
import torch

from src.core.errors import EstimationError, FitError, ParameterError
from src.core.rng import SeededRng
from src.noise_model.sampler import NoiseSpec, sample_noise
from src.variance_estimation.estimator import (
    FrameStack,
    VarianceCurve,
    binned_variance,
    estimate_noise_curve,
    fit_linear,
    multiframe_variance,
    neighbor_diff_map,
    refine_lambda,
    smooth_mask,
)
from src.verification.oracles import LinearDenoiser


def ramp(size=256, low=0.2, high=0.8):
    # Rampe horizontale : régions lisses couvrant [low, high]
    row = torch.linspace(low, high, size, dtype=torch.float64)
    return row.expand(1, size, size).clone()


def test_neighbor_diff_map():
    assert torch.equal(neighbor_diff_map(torch.full((1, 5, 5), 0.3, dtype=torch.float64)), torch.zeros((1, 5, 5), dtype=torch.float64))
    checker = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]], dtype=torch.float64)
    # Deux voisins à distance 1 : d² = 2·1 / (2·2)
    assert torch.allclose(neighbor_diff_map(checker), torch.full((1, 2, 2), 0.5, dtype=torch.float64))


def test_smooth_mask_requires_window():
    with pytest.raises(ParameterError):
        smooth_mask(torch.zeros((1, 9, 30), dtype=torch.float64))


def test_smooth_mask_on_noiseless_ramp():
    s, F = smooth_mask(ramp(64))
    assert s.shape == (1, 64, 64)
    # Sans bruit, seules les régions de bord s'écartent de la rampe
    assert float(F.double().mean()) > 0.5


def test_gaussian_variance_recovered():
    rng = SeededRng(21)
    spec = NoiseSpec.gaussian(0.02)
    images = [ramp() + sample_noise(spec, ramp(), rng.substream(k)) for k in range(3)]
    curve, fit = estimate_noise_curve(images)
    assert fit is not None
    assert fit.kind == "var_map"
    assert abs(fit.variance - 0.02 ** 2) <= 0.1 * 0.02 ** 2
    assert fit.to_noise_spec().kind == "gaussian"


def test_poisson_lambda_recovered():
    rng = SeededRng(22)
    spec = NoiseSpec.poisson(1000.0)
    images = [ramp() + sample_noise(spec, ramp(), rng.substream(k)) for k in range(2)]
    curve, fit = estimate_noise_curve(images)
    assert fit.kind == "poisson"
    assert abs(fit.lam - 1000.0) <= 100.0
    assert abs(fit.mu) < 0.05
    assert np.allclose(fit.predict(np.array([0.5])), (0.5 - fit.mu) / fit.lam)


def test_binned_variance_with_explicit_mask():
    image = ramp(32)
    s, F = smooth_mask(image)
    with pytest.raises(EstimationError):
        binned_variance(image, s=s, F=torch.zeros_like(F))


def test_fit_linear_degenerate():
    curve = VarianceCurve(intensities=np.array([0.5]), variances=np.array([0.01]), counts=np.array([10]))
    with pytest.raises(FitError):
        fit_linear(curve)


def test_fit_linear_exact_line():
    v = np.linspace(0.1, 0.9, 9)
    curve = VarianceCurve(intensities=v, variances=(v - 0.05) / 40.0, counts=np.full(9, 100))
    fit = fit_linear(curve)
    assert fit.kind == "poisson"
    assert math.isclose(fit.lam, 40.0, rel_tol=1e-9)
    assert math.isclose(fit.mu, 0.05, rel_tol=1e-9)
    assert curve.fit_lambda == fit.lam

    # Le décalage μ est conservé dans la loi de bruit
    spec = fit.to_noise_spec()
    assert spec.kind == "poisson"
    assert math.isclose(spec.mu, 0.05, rel_tol=1e-9)
    levels = torch.from_numpy(v).reshape(1, 1, -1)
    assert np.allclose(spec.noise_variance(levels).reshape(-1).numpy(), fit.predict(v))
    assert NoiseSpec.parse(spec.to_text()) == spec


def test_curve_csv(tmp_path):
    curve = VarianceCurve(intensities=np.array([0.1, 0.2]), variances=np.array([1e-3, 2e-3]), counts=np.array([3, 4]))
    lines = curve.to_csv(tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "v,V,count"
    assert len(lines) == 3


def test_multiframe_variance():
    rng = SeededRng(23)
    frames = [0.05 + 0.1 * rng.substream(j).normal((1, 100, 100)) for j in range(10)]
    variance = multiframe_variance(FrameStack(frames))
    # Var(y) = n·σ² pour y = Σ a^(j)
    assert abs(float(variance.mean()) - 0.1) <= 0.002
    assert FrameStack(frames).observed().shape == (1, 100, 100)


def test_frame_stack_validation():
    with pytest.raises(ParameterError):
        FrameStack([torch.zeros((1, 4, 4))])
    with pytest.raises(ParameterError):
        FrameStack([torch.zeros((1, 4, 4)), torch.zeros((1, 4, 5))])


def _train_fn(gains):
    # Débruiteur scalaire dont le signe fixe celui de E⟨z,Lz⟩
    def train(lam, rng):
        return LinearDenoiser.scalar(gains[lam], shape=(1, 4, 4))
    return train


def test_refine_lambda_picks_smallest_positive():
    x_const = torch.full((1, 4, 4), 0.5, dtype=torch.float64)
    report = refine_lambda(_train_fn({10.0: -0.2, 20.0: 0.1, 30.0: 0.3}), [10.0, 20.0, 30.0], x_const, 0.5,
                           SeededRng(24), samples=200)
    assert report.chosen == 20.0
    assert not report.all_negative
    assert [row[0] for row in report.table] == [10.0, 20.0, 30.0]


def test_refine_lambda_all_negative():
    x_const = torch.full((1, 4, 4), 0.5, dtype=torch.float64)
    report = refine_lambda(_train_fn({10.0: -0.2, 20.0: -0.1}), [10.0, 20.0], x_const, 0.5, SeededRng(25), samples=200)
    assert report.all_negative
    assert report.chosen == 20.0
    assert report.warnings


def test_refine_lambda_requires_candidates():
    with pytest.raises(ParameterError):
        refine_lambda(_train_fn({}), [], torch.full((1, 4, 4), 0.5), 0.5, SeededRng(0))
