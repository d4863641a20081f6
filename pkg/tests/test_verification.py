import math

import numpy as np
import pytest
import torch

from src.core.errors import ContractError, DomainError, ParameterError
from src.core.rng import SeededRng
from src.noise_model.sampler import NoiseSpec
from src.verification.checks import (
    check_convexity,
    check_corollary_delta,
    check_env_extra_term,
    check_noise_compensation,
    check_prop1,
    check_prop2_bound,
    fixed_image,
    make_report,
    uniform_images,
)
from src.verification.oracles import (
    ConstantPatchOracle,
    LinearDenoiser,
    constant_patch_posterior,
    linear_diagonal,
    lmmse_oracle,
    check_linearity_samples,
    rectifier_residual_oracle,
    scalar_gain_family,
)
from src.verification.suites import example1_partial_linearity, rectifier, run_suite, soft_shrink


# Oracles

def test_lmmse_scalar_gain():
    oracle = lmmse_oracle(torch.zeros(1), torch.eye(1), torch.eye(1))
    assert math.isclose(float(oracle.matrix[0, 0]), 0.5, rel_tol=1e-12)
    assert float(oracle.offset[0]) == 0.0


def test_lmmse_noiseless_is_identity():
    oracle = lmmse_oracle(torch.zeros(3), torch.eye(3), torch.zeros(3, 3))
    assert torch.allclose(oracle.matrix, torch.eye(3, dtype=torch.float64))


def test_lmmse_singular_sum_warns(caplog):
    oracle = lmmse_oracle(torch.tensor([0.3, 0.4]), torch.zeros(2, 2), torch.zeros(2, 2))
    assert "singulière" in caplog.text
    # Gain nul : R(y) = μ
    assert torch.allclose(oracle(torch.tensor([[[5.0, -5.0]]])), torch.tensor([[[0.3, 0.4]]], dtype=torch.float64))


def test_lmmse_rejects_asymmetric_covariance():
    with pytest.raises(ParameterError):
        lmmse_oracle(torch.zeros(2), torch.tensor([[1.0, 0.5], [0.0, 1.0]]), torch.eye(2))


def test_lmmse_minimizes_exact_mse():
    rng = SeededRng(31)
    A = rng.normal((4, 4)).numpy()
    cx = A @ A.T + 0.1 * np.eye(4)
    cn = 0.05 * np.eye(4)
    oracle = lmmse_oracle(torch.zeros(4), torch.from_numpy(cx), torch.from_numpy(cn))

    def mse(K):
        I = np.eye(4)
        return np.trace((K - I) @ cx @ (K - I).T) + np.trace(K @ cn @ K.T)

    best = mse(oracle.matrix.numpy())
    for k in range(10):
        perturbed = oracle.matrix.numpy() + 0.05 * rng.substream(k).normal((4, 4)).numpy()
        assert best <= mse(perturbed)


def test_rectifier_oracle_closed_form():
    s = 0.3
    oracle = rectifier_residual_oracle(s)
    assert math.isclose(oracle.g, s / math.sqrt(2 * math.pi), rel_tol=1e-8)
    assert math.isclose(oracle.L, 0.5, rel_tol=1e-8)
    assert math.isclose(oracle.eps2, s * s * (0.25 - 1 / (2 * math.pi)), rel_tol=1e-8)
    with pytest.raises(ParameterError):
        rectifier_residual_oracle(0.0)


def test_linearity_samples(linear_denoiser):
    assert check_linearity_samples(linear_denoiser, (1, 8, 8), SeededRng(0))
    assert not check_linearity_samples(torch.relu, (1, 8, 8), SeededRng(0))


def test_linear_diagonal(linear_denoiser):
    diagonal = linear_diagonal(linear_denoiser, (1, 8, 8), chunk=16)
    assert np.allclose(diagonal, np.diag(linear_denoiser.matrix.numpy()), atol=1e-12)


def test_scalar_gain_family():
    spec = NoiseSpec.gaussian(0.1)
    pair = scalar_gain_family(0.5, spec, 0.5, 20_000, SeededRng(32))
    t_star = 0.25 / (0.25 + 0.01 + 0.25 * 0.01)
    assert abs(pair.t_mse - t_star) < 0.01
    assert 0.0 <= pair.delta_mse < 1e-3
    assert 0.0 <= pair.delta_j < 1e-3
    assert math.isclose(pair.grid_step, 0.0005)
    with pytest.raises(ParameterError):
        scalar_gain_family(0.5, NoiseSpec.poisson(10.0), 0.5, 100, SeededRng(0))


def test_constant_patch_posterior_concentrates():
    mean = constant_patch_posterior(882.0, lam_max=4.0, pixels=441)
    assert abs(mean - 883.0 / 441.0) <= 0.02 * 2.0
    # Aucun comptage : masse près de 0
    assert constant_patch_posterior(0.0, lam_max=4.0, pixels=441) < 5.0 / 441.0


def test_constant_patch_posterior_monotone_and_bounded():
    values = [constant_patch_posterior(float(S), lam_max=1.0, pixels=441, scale=1.0) for S in range(0, 500, 25)]
    assert all(a < b for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 1.0 for v in values)
    with pytest.raises(DomainError):
        constant_patch_posterior(-1.0, lam_max=1.0, pixels=441)


def test_constant_patch_oracle_output():
    oracle = ConstantPatchOracle(lam_max=4.0)
    out = oracle(torch.full((1, 21, 21), 2.0, dtype=torch.float64))
    assert out.shape == (1, 21, 21)
    assert torch.all(out == out[0, 0, 0])
    assert abs(float(out[0, 0, 0]) - 2.0) < 0.05
    with pytest.raises(DomainError):
        oracle.posterior_mean(-3.0)


# Rapports

def test_make_report_semantics():
    failing = make_report("egalite", "equality", 1.0, 0.1, 100)
    assert not failing.passed
    assert math.isclose(failing.tolerance, 0.4)
    assert make_report("borne", "bound", -5.0, 0.1, 100).passed
    assert make_report("borne", "bound", 1.05, 0.02, 100, bound=1.0).passed


# Vérifications

def test_prop1_holds_for_random_linear(linear_denoiser):
    report = check_prop1(linear_denoiser, uniform_images((1, 8, 8)), NoiseSpec.gaussian(0.1), 0.5, 20_000, SeededRng(33))
    assert report.passed, report
    assert report.name == "prop1"
    assert set(report.components) == {"J_hat", "MSE_hat", "c_hat"}


def test_prop1_holds_under_poisson_noise(linear_denoiser):
    report = check_prop1(linear_denoiser, uniform_images((1, 8, 8), 0.2, 1.0), NoiseSpec.poisson(30.0), 0.5,
                         20_000, SeededRng(34))
    assert report.passed, report


def test_prop1_identity_loss_value():
    report = check_prop1(lambda v: v, fixed_image(torch.full((1, 8, 8), 0.5, dtype=torch.float64)),
                         NoiseSpec.gaussian(0.1), 1.0, 20_000, SeededRng(35))
    assert report.passed
    assert abs(report.components["J_hat"] - 4 * 0.01) <= 0.02 * 0.04


def test_prop1_requires_affine_denoiser():
    with pytest.raises(ContractError):
        check_prop1(torch.relu, uniform_images((1, 4, 4)), NoiseSpec.gaussian(0.1), 0.5, 100, SeededRng(0))


def test_prop1_requires_two_samples(linear_denoiser):
    with pytest.raises(ContractError):
        check_prop1(linear_denoiser, uniform_images((1, 8, 8)), NoiseSpec.gaussian(0.1), 0.5, 1, SeededRng(0))


@pytest.mark.parametrize("beta", [-0.2, 0.0, 0.2])
def test_env_extra_term(beta, linear_denoiser, small_image):
    spec = NoiseSpec.gaussian(0.1, aux_scale=1.0 + beta)
    report = check_env_extra_term(linear_denoiser, small_image, spec, 0.5, 20_000, SeededRng(36))
    assert report.passed, report
    if beta == 0.0:
        assert report.components["expected"] == 0.0
    # Forme en Cov(z) : (1 + β) fois l'écart attendu
    components = report.components
    assert components["trace_W_cov_z"] == pytest.approx((1.0 + beta) * components["trace_W_cov_n"])
    assert components["two_beta_trace_W_cov_z"] == pytest.approx((1.0 + beta) * components["expected"])


def test_noise_compensation(linear_denoiser, small_image):
    report = check_noise_compensation(linear_denoiser, fixed_image(small_image), NoiseSpec.gaussian(0.1), 0.5,
                                      20_000, SeededRng(37))
    assert report.passed


def test_prop2_bound_rectifier_at_zero():
    report = check_prop2_bound(rectifier, fixed_image(torch.zeros((1, 4, 4), dtype=torch.float64)),
                               NoiseSpec.gaussian(0.1), 0.5, 5_000, SeededRng(38))
    assert report.passed, report
    assert report.components["eps2_per_pixel"] > 0
    assert report.kind == "bound"


def test_corollary_identical_denoisers():
    scalar = LinearDenoiser.scalar(0.5)
    x = torch.full((1, 1, 1), 0.5, dtype=torch.float64)
    report = check_corollary_delta(scalar, scalar, x, NoiseSpec.gaussian(0.1), 0.5, 2_000, SeededRng(39),
                                   delta_a=0.0, delta_b=0.0)
    assert report.passed
    assert report.statistic == 0.0


def test_corollary_skipped_for_large_delta():
    scalar = LinearDenoiser.scalar(0.5)
    x = torch.full((1, 1, 1), 0.5, dtype=torch.float64)
    report = check_corollary_delta(scalar, scalar, x, NoiseSpec.gaussian(0.1), 0.5, 100, SeededRng(0),
                                   delta_a=1.5, delta_b=0.0)
    assert report.skipped
    assert report.passed
    with pytest.raises(ParameterError):
        check_corollary_delta(scalar, scalar, x, NoiseSpec.gaussian(0.1), 0.5, 100, SeededRng(0),
                              delta_a=-0.1, delta_b=0.0)


@pytest.mark.parametrize("weight", [0.0, 0.3, 1.0])
def test_convexity(weight):
    x = torch.full((1, 4, 4), 0.05, dtype=torch.float64)
    report = check_convexity(rectifier, soft_shrink, weight, x, NoiseSpec.gaussian(0.1), 0.5, 500, SeededRng(40))
    assert report.passed
    assert report.components["eps2_combined"] <= max(report.components["eps2_a"], report.components["eps2_b"]) + 1e-15


def test_convexity_rejects_bad_weight():
    with pytest.raises(ParameterError):
        check_convexity(rectifier, soft_shrink, 1.5, torch.zeros((1, 2, 2)), NoiseSpec.gaussian(0.1), 0.5, 10, SeededRng(0))


# Suites

def test_example1_partial_linearity(tmp_path):
    report = example1_partial_linearity(4.0, 1000, SeededRng(41), csv_dir=tmp_path)
    assert report.passed, report
    assert report.components["ratio"] >= 10.0
    lines = (tmp_path / "example1_lambda4.csv").read_text().splitlines()
    assert lines[0] == "g_plus_Ln,R0,ref_w"
    assert len(lines) == 1001


def test_run_suite_unknown():
    with pytest.raises(ParameterError):
        run_suite("inconnue", 0)


def test_run_suite_corollary_reproducible():
    first = run_suite("corollary", 3, samples=20_000)
    second = run_suite("corollary", 3, samples=20_000)
    assert first.passed
    assert first.model_dump() == second.model_dump()


def test_run_suite_convexity():
    assert run_suite("convexity", 1, samples=500).passed


def test_run_suite_gradients():
    result = run_suite("gradients", 7)
    assert result.passed, [r.message for r in result.reports if not r.passed]
    assert len(result.reports) == 20


def test_run_suite_prop2_rectifier_oracle():
    result = run_suite("prop2", 4)
    assert result.passed, [r.name for r in result.reports if not r.passed]
    reports = {r.name: r for r in result.reports}
    # Écart relatif à la quadrature sous 5 %, en plus du critère en erreurs standard
    relative = reports["rectifier_oracle_relative"]
    assert relative.tolerance == pytest.approx(0.05)
    assert abs(relative.statistic) <= 0.05
    assert reports["rectifier_oracle"].passed
