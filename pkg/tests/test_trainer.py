import math

import pytest
import torch
from pydantic import ValidationError

from src.core.errors import ParameterError, TrainingDivergedError
from src.core.rng import SeededRng
from src.core.tensor_io import write_tensor
from src.diffcore.model import ModelArchitecture
from src.losses.operators import DeblurOperator
from src.noise_model.sampler import NoiseSpec
from src.trainer import experiments as experiments_module
from src.trainer import trainer as trainer_module
from src.trainer.data import (
    corrupt_corpus,
    flip,
    foreground_reweight,
    patch_stream,
    sample_patches,
    sample_windows,
    sliding_patches,
    synthetic_corpus,
    usable_images,
)
from src.trainer.experiments import env_sweep, fine_tune_fn, gamma_sweep, noise_level_sweep
from src.trainer.metrics import evaluate, psnr, ssim
from src.trainer.trainer import (
    TrainConfig,
    TrainingHistory,
    patch_specs,
    stage_of,
    train_deblur,
    train_denoiser,
)
from src.variance_estimation.estimator import refine_lambda


@pytest.fixture
def clean_corpus():
    return synthetic_corpus(6, 16, SeededRng(50))


@pytest.fixture
def noisy_corpus(clean_corpus):
    return corrupt_corpus(clean_corpus, NoiseSpec.gaussian(0.1), SeededRng(51))


@pytest.fixture
def held_out(clean_corpus):
    clean = clean_corpus[:2]
    return corrupt_corpus(clean, NoiseSpec.gaussian(0.1), SeededRng(52)), clean


@pytest.fixture
def quick_config():
    # Configuration minimale : quelques pas sur des patchs 8×8
    return TrainConfig(
        stage1_steps=3,
        stage2_steps=3,
        batch_size=2,
        patch_size=(8, 8),
        noise="gaussian:0.1",
        architecture=ModelArchitecture(depth=3, width=4),
        eval_interval=3,
        proxy_kernel_size=5,
    )


# Métriques

def test_psnr_values():
    x = torch.zeros((1, 4, 4), dtype=torch.float64)
    assert math.isclose(psnr(x + 0.1, x), 20.0, rel_tol=1e-12)
    assert psnr(x, x) == math.inf


def test_ssim_values(small_image):
    image = SeededRng(53).uniform(0.0, 1.0, (1, 16, 16))
    assert math.isclose(ssim(image, image), 1.0, rel_tol=1e-12)
    assert ssim(image, image * 0.5) < 1.0
    with pytest.raises(ParameterError):
        ssim(small_image, small_image)


def test_evaluate_requires_pairs(held_out):
    with pytest.raises(ParameterError):
        evaluate(lambda v: v, held_out[0], held_out[1][:1])
    report = evaluate(lambda v: v, held_out[0], held_out[1])
    assert len(report.per_image) == 2


# Données

def test_synthetic_corpus_deterministic():
    a = synthetic_corpus(3, 16, SeededRng(1))
    b = synthetic_corpus(3, 16, SeededRng(1))
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (1, 16, 16)
    assert all(float(x.min()) >= 0.0 and float(x.max()) <= 1.0 for x in a)


def test_flip_is_involution(small_image):
    assert torch.equal(flip(flip(small_image, True, True), True, True), small_image)
    assert torch.equal(flip(small_image, True, False)[..., 0], small_image[..., -1])


def test_patch_stream_reproducible(clean_corpus):
    first = patch_stream(clean_corpus, (8, 8), SeededRng(2))
    second = patch_stream(clean_corpus, (8, 8), SeededRng(2))
    for _ in range(5):
        assert torch.equal(next(first), next(second))


def test_full_size_patch_without_flips(clean_corpus):
    patches = sample_patches(clean_corpus[:1], (16, 16), 3, SeededRng(3), flips=(False, False))
    assert all(torch.equal(p, clean_corpus[0]) for p in patches)


def test_undersized_images_skipped(clean_corpus, caplog):
    corpus = [torch.zeros((1, 4, 4), dtype=torch.float64), clean_corpus[0]]
    assert len(usable_images(corpus, (8, 8))) == 1
    assert "ignorée" in caplog.text
    with pytest.raises(ParameterError):
        usable_images(corpus[:1], (8, 8))


def test_sliding_patches():
    image = torch.arange(1600, dtype=torch.float64).reshape(1, 40, 40)
    patches = sliding_patches(image, 10, 10)
    assert patches.shape == (16, 1, 10, 10)
    assert torch.equal(patches[0], image[:, :10, :10])
    assert torch.equal(patches[1], image[:, :10, 10:20])
    assert sliding_patches(image, 50, 10).shape[0] == 0


def test_foreground_reweight():
    patches = torch.arange(100, dtype=torch.float64).reshape(100, 1, 1, 1).expand(100, 1, 2, 2).clone()
    kept = foreground_reweight(patches, SeededRng(4))
    assert kept.shape[0] == 100 - 64
    means = set(kept.reshape(kept.shape[0], -1).mean(dim=1).tolist())
    # Les 20 % les plus lumineux sont toujours conservés
    assert all(float(v) in means for v in range(80, 100))


def test_windows_match_patches(clean_corpus):
    patches, windows = sample_windows(clean_corpus[:1], (8, 8), 4, SeededRng(4))
    for patch, window in zip(patches, windows):
        assert torch.equal(patch, window.apply(clean_corpus[0]))
    # Même tirage que le flux de patchs seul
    assert torch.equal(patches, sample_patches(clean_corpus[:1], (8, 8), 4, SeededRng(4)))


def test_patch_specs_follow_windows(clean_corpus):
    # Carte égale à l'image : chaque carte recadrée doit égaler son patch
    spec = NoiseSpec.from_var_map(clean_corpus[0])
    patches, windows = sample_windows(clean_corpus[:1], (8, 8), 4, SeededRng(5))
    specs = patch_specs(spec, windows)
    for patch, local in zip(patches, specs):
        assert torch.equal(local.var_map, patch)
    gaussian = NoiseSpec.gaussian(0.1)
    assert patch_specs(gaussian, windows) is gaussian


# Configuration

def test_default_schedule():
    config = TrainConfig(stage1_steps=100, stage2_steps=50)
    assert config.schedule() == [(0, 1e-3), (60, 1e-4), (100, 1e-3), (130, 1e-4)]
    assert config.lr_at(59) == 1e-3
    assert config.lr_at(60) == 1e-4
    assert config.lr_at(149) == 1e-4
    assert stage_of(config, 99) == 1
    assert stage_of(config, 100) == 2


def test_stage_two_learning_rate():
    # Le calendrier par défaut repart de 1e-3 à la frontière des étapes
    config = TrainConfig(stage1_steps=100, stage2_steps=50)
    assert config.lr_at(99) == 1e-4
    assert config.lr_at(100) == 1e-3
    # Un calendrier explicite sans ce point garde le taux décru
    explicit = config.model_copy(update={"lr_schedule": [(0, 1e-3), (60, 1e-4)]})
    assert explicit.lr_at(100) == 1e-4


@pytest.mark.parametrize("overrides", [
    {"lr_schedule": [(10, 1e-3)]},
    {"lr_schedule": [(0, 1e-3), (0, 1e-4)]},
    {"alpha_stage1": 0.0},
    {"alpha_stage2_range": (0.5, 0.1)},
    {"noise": "laplace:0.1"},
    {"inconnu": 1},
])
def test_invalid_config(overrides):
    with pytest.raises(ValidationError):
        TrainConfig(**overrides)


def test_preset_configs():
    assert TrainConfig.full_scale().total_steps == 400_000
    deblur = TrainConfig.deblur_defaults()
    assert deblur.mode == "deblur"
    assert deblur.gamma_prox == 1.0 / 16


def test_history_csv(tmp_path):
    history = TrainingHistory()
    history.record(10, 0.5)
    lines = history.to_csv(tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "step,loss,psnr,ssim"
    assert math.isnan(history.last_psnr)


# Entraînement

def test_zero_step_training_returns_identity(noisy_corpus, small_image):
    config = TrainConfig(stage1_steps=0, stage2_steps=0, architecture=ModelArchitecture(depth=3, width=4),
                         patch_size=(8, 8))
    result = train_denoiser(config, noisy_corpus, SeededRng(5))
    assert result.history.rows == []
    assert torch.equal(result.model(small_image), small_image)


def test_short_training_is_deterministic(quick_config, noisy_corpus, held_out):
    a = train_denoiser(quick_config, noisy_corpus, SeededRng(6), held_out)
    b = train_denoiser(quick_config, noisy_corpus, SeededRng(6), held_out)
    for (_, pa), (_, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(pa, pb)
    assert [row[0] for row in a.history.rows] == [3, 6]
    assert all(math.isfinite(row[1]) for row in a.history.rows)
    assert a.optimizer_state.step == 6


def test_perturbations_only_in_stage_two(quick_config, noisy_corpus, mocker):
    spy = mocker.spy(trainer_module, "build_perturbation_batch")
    train_denoiser(quick_config, noisy_corpus, SeededRng(7))
    assert spy.call_count == quick_config.stage2_steps


def test_gamma_zero_skips_penalty(quick_config, noisy_corpus, mocker):
    spy = mocker.spy(trainer_module, "build_perturbation_batch")
    train_denoiser(quick_config.model_copy(update={"gamma": 0.0}), noisy_corpus, SeededRng(7))
    assert spy.call_count == 0


def test_supervised_baseline(quick_config, clean_corpus, mocker):
    spy = mocker.spy(trainer_module, "supervised_loss")
    config = quick_config.model_copy(update={"mode": "supervised_baseline"})
    train_denoiser(config, clean_corpus, SeededRng(8))
    assert spy.call_count == config.total_steps


def test_divergence_restores_last_good_state(quick_config, noisy_corpus, mocker):
    mocker.patch("src.trainer.trainer.total_denoise_loss",
                 return_value=torch.tensor(float("nan"), dtype=torch.float64))
    with pytest.raises(TrainingDivergedError) as error:
        train_denoiser(quick_config, noisy_corpus, SeededRng(9))
    assert error.value.step == 0
    last = error.value.last_good_state
    assert torch.equal(last["layers.2.weight"], torch.zeros_like(last["layers.2.weight"]))


def test_mode_mismatch(quick_config, noisy_corpus):
    with pytest.raises(ParameterError):
        train_deblur(quick_config, noisy_corpus, DeblurOperator.box(3))
    with pytest.raises(ParameterError):
        train_denoiser(quick_config.model_copy(update={"mode": "deblur"}), noisy_corpus)


def test_deblur_training_uses_proxy_in_phase_two(quick_config, clean_corpus, mocker):
    operator = DeblurOperator.box(3)
    observed = corrupt_corpus(clean_corpus, NoiseSpec.gaussian(0.05), SeededRng(10), operator)
    config = quick_config.model_copy(update={"mode": "deblur", "gamma": 1.0 / 16, "gamma_prox": 1.0 / 16})
    spy = mocker.spy(trainer_module, "random_motion_kernel")
    result = train_deblur(config, observed, operator, SeededRng(11))
    assert spy.call_count == config.stage2_steps
    assert result.optimizer_state.step == config.total_steps


def test_variance_map_training_on_patches(quick_config, clean_corpus, tmp_path, mocker):
    # Carte 16×16 alignée sur les images, patchs 8×8
    var_map = torch.linspace(0.001, 0.01, 256, dtype=torch.float64).reshape(1, 16, 16)
    path = write_tensor(tmp_path / "var.pldt", var_map)
    noisy = corrupt_corpus(clean_corpus, NoiseSpec.from_var_map(var_map), SeededRng(15))
    config = quick_config.model_copy(update={"noise": f"var_map:{path}"})
    spy = mocker.spy(trainer_module, "build_perturbation_batch")
    result = train_denoiser(config, noisy, SeededRng(16))
    assert result.optimizer_state.step == config.total_steps
    specs = spy.call_args.args[2]
    assert len(specs) == config.batch_size
    assert all(tuple(s.var_map.shape) == (1, 8, 8) for s in specs)


def test_variance_map_deblur_training(quick_config, clean_corpus, tmp_path):
    var_map = torch.full((1, 16, 16), 0.002, dtype=torch.float64)
    path = write_tensor(tmp_path / "var.pldt", var_map)
    operator = DeblurOperator.box(3)
    observed = corrupt_corpus(clean_corpus, NoiseSpec.from_var_map(var_map), SeededRng(17), operator)
    config = quick_config.model_copy(update={"mode": "deblur", "noise": f"var_map:{path}", "gamma_prox": 1.0 / 16})
    result = train_deblur(config, observed, operator, SeededRng(18))
    assert result.optimizer_state.step == config.total_steps


def test_variance_map_must_match_images(quick_config, noisy_corpus, tmp_path):
    path = write_tensor(tmp_path / "var.pldt", torch.full((1, 32, 32), 0.01, dtype=torch.float64))
    with pytest.raises(ParameterError):
        train_denoiser(quick_config.model_copy(update={"noise": f"var_map:{path}"}), noisy_corpus, SeededRng(0))


def test_training_from_initial_model(quick_config, noisy_corpus, small_image):
    base = train_denoiser(quick_config, noisy_corpus, SeededRng(19))
    saved = base.model.snapshot()

    # Zéro pas : copie exacte du modèle de départ
    frozen = quick_config.model_copy(update={"stage1_steps": 0, "stage2_steps": 0})
    copied = train_denoiser(frozen, noisy_corpus, SeededRng(20), initial_model=base.model)
    assert copied.model is not base.model
    assert torch.equal(copied.model(small_image), base.model(small_image))

    tuned = train_denoiser(quick_config, noisy_corpus, SeededRng(20), initial_model=base.model,
                           optimizer_state=base.optimizer_state)
    assert tuned.optimizer_state.step == base.optimizer_state.step + quick_config.total_steps
    # Le modèle de base n'est pas modifié
    for name, p in base.model.named_parameters():
        assert torch.equal(p, saved[name])


def test_initial_model_architecture_mismatch(quick_config, noisy_corpus, tiny_model):
    config = quick_config.model_copy(update={"architecture": ModelArchitecture(depth=2, width=4)})
    with pytest.raises(ParameterError):
        train_denoiser(config, noisy_corpus, SeededRng(0), initial_model=tiny_model)


# Balayages

def test_gamma_sweep(quick_config, noisy_corpus, held_out):
    table = gamma_sweep(quick_config, noisy_corpus, [0.0, 4.0], SeededRng(12), held_out)
    assert table.column("gamma") == [0.0, 4.0]
    assert len(table.rows) == 2


def test_noise_level_sweep_identity(held_out):
    table = noise_level_sweep(lambda v: v, held_out[1], [20.0, 40.0], SeededRng(13))
    assert table.column("psnr_noisy") == table.column("psnr_denoised")
    with pytest.raises(ParameterError):
        noise_level_sweep(lambda v: v, held_out[1], [0.1], SeededRng(0), kind="laplace")


def test_env_sweep(quick_config, noisy_corpus):
    table = env_sweep(quick_config, noisy_corpus, [-0.2, 0.2], SeededRng(14), samples=64)
    assert table.column("beta") == [-0.2, 0.2]
    assert isinstance(table.warnings, list)
    with pytest.raises(ParameterError):
        env_sweep(quick_config, noisy_corpus, [-1.5], SeededRng(0))


def test_env_sweep_measures_with_scaled_auxiliary(quick_config, noisy_corpus, mocker):
    spy = mocker.spy(experiments_module, "zLz_statistic")
    env_sweep(quick_config, noisy_corpus, [-0.16, 0.16], SeededRng(21), samples=64)
    scales = [call.args[2].aux_scale for call in spy.call_args_list]
    assert scales == pytest.approx([0.84, 1.16])


def test_fine_tune_fn(quick_config, noisy_corpus, mocker):
    base = train_denoiser(quick_config, noisy_corpus, SeededRng(22))
    spy = mocker.spy(experiments_module, "train_denoiser")
    train = fine_tune_fn(base, noisy_corpus, steps=2, spec_factory=lambda v: NoiseSpec.gaussian(math.sqrt(v)))
    model = train(0.01, SeededRng(23))

    kwargs = spy.call_args.kwargs
    config = spy.call_args.args[0]
    assert kwargs["initial_model"] is base.model
    assert kwargs["optimizer_state"] is base.optimizer_state
    assert (config.stage1_steps, config.stage2_steps) == (0, 2)
    assert config.noise_spec.sigma == pytest.approx(0.1)
    assert config.lr_schedule == [(0, quick_config.lr_at(quick_config.total_steps - 1))]
    assert model is not base.model
    with pytest.raises(ParameterError):
        fine_tune_fn(base, noisy_corpus, steps=0)


def test_refine_with_fine_tuning(quick_config, noisy_corpus):
    base = train_denoiser(quick_config, noisy_corpus, SeededRng(24))
    train = fine_tune_fn(base, noisy_corpus, steps=2, spec_factory=lambda v: NoiseSpec.gaussian(math.sqrt(v)))
    x_const = torch.full((1, 8, 8), 0.5, dtype=torch.float64)
    report = refine_lambda(train, [0.008, 0.01], x_const, 1.0, SeededRng(25),
                           spec_factory=lambda v: NoiseSpec.gaussian(math.sqrt(v)), samples=64)
    assert [row[0] for row in report.table] == [0.008, 0.01]
    assert report.chosen in (0.008, 0.01)


# Acceptation à échelle bureau

@pytest.mark.slow
@pytest.mark.timeout(3600)
def test_desk_scale_denoising_beats_noisy_input():
    rng = SeededRng(60)
    clean = synthetic_corpus(220, 32, rng.substream(0))
    spec = NoiseSpec.gaussian(25.0 / 255.0)
    train_clean, held_clean = clean[:200], clean[200:]
    noisy = corrupt_corpus(train_clean, spec, rng.substream(1))
    held = (corrupt_corpus(held_clean, spec, rng.substream(2)), held_clean)

    config = TrainConfig(seed=60)
    result = train_denoiser(config, noisy, SeededRng(60), held)
    supervised = train_denoiser(config.model_copy(update={"mode": "supervised_baseline"}), train_clean, SeededRng(60), held)

    noisy_psnr = evaluate(lambda v: v, held[0], held[1]).psnr_db
    denoised_psnr = evaluate(result.model, held[0], held[1]).psnr_db
    supervised_psnr = evaluate(supervised.model, held[0], held[1]).psnr_db
    assert denoised_psnr >= noisy_psnr + 3.0
    assert denoised_psnr >= supervised_psnr - 1.5


@pytest.mark.slow
@pytest.mark.timeout(3600)
def test_desk_scale_deblurring_improves():
    rng = SeededRng(61)
    operator = DeblurOperator.box(3)
    clean = synthetic_corpus(220, 32, rng.substream(0))
    spec = NoiseSpec.gaussian(2.0 / 255.0)
    observed = corrupt_corpus(clean[:200], spec, rng.substream(1), operator)
    held = (corrupt_corpus(clean[200:], spec, rng.substream(2), operator), clean[200:])

    config = TrainConfig.deblur_defaults(noise=spec.to_text(), seed=61)
    result = train_deblur(config, observed, operator, SeededRng(61), held)
    assert evaluate(result.model, held[0], held[1]).psnr_db >= evaluate(lambda v: v, held[0], held[1]).psnr_db + 2.0


@pytest.mark.slow
@pytest.mark.timeout(3600)
def test_desk_scale_poisson_denoising():
    rng = SeededRng(62)
    clean = synthetic_corpus(220, 32, rng.substream(0))
    spec = NoiseSpec.poisson(30.0)
    train_clean, held_clean = clean[:200], clean[200:]
    noisy = corrupt_corpus(train_clean, spec, rng.substream(1))
    held = (corrupt_corpus(held_clean, spec, rng.substream(2)), held_clean)

    config = TrainConfig(seed=62, noise=spec.to_text(), gamma=16.0)
    result = train_denoiser(config, noisy, SeededRng(62), held)
    supervised = train_denoiser(config.model_copy(update={"mode": "supervised_baseline"}), train_clean, SeededRng(62), held)

    noisy_psnr = evaluate(lambda v: v, held[0], held[1]).psnr_db
    denoised_psnr = evaluate(result.model, held[0], held[1]).psnr_db
    supervised_psnr = evaluate(supervised.model, held[0], held[1]).psnr_db
    assert denoised_psnr >= noisy_psnr + 3.0
    assert denoised_psnr >= supervised_psnr - 1.5


@pytest.mark.slow
@pytest.mark.timeout(4 * 3600)
def test_desk_scale_zlz_decreases_with_auxiliary_variance():
    spec = NoiseSpec.gaussian(25.0 / 255.0)
    config = TrainConfig(stage1_steps=1000, stage2_steps=1000, noise=spec.to_text())
    decreasing = 0
    for seed in range(5):
        rng = SeededRng(70 + seed)
        noisy = corrupt_corpus(synthetic_corpus(100, 32, rng.substream(0)), spec, rng.substream(1))
        table = env_sweep(config.model_copy(update={"seed": 70 + seed}), noisy, [-0.16, 0.0, 0.16], rng.substream(2))
        decreasing += not table.warnings
    assert decreasing >= 4


@pytest.mark.slow
@pytest.mark.timeout(2 * 3600)
def test_desk_scale_variance_refinement():
    sigma2 = (25.0 / 255.0) ** 2
    spec = NoiseSpec.gaussian(math.sqrt(sigma2))
    rng = SeededRng(63)
    noisy = corrupt_corpus(synthetic_corpus(200, 32, rng.substream(0)), spec, rng.substream(1))
    base = train_denoiser(TrainConfig(seed=63, noise=spec.to_text()), noisy, SeededRng(63))

    factory = lambda v: NoiseSpec.gaussian(math.sqrt(v))
    candidates = [0.84 * sigma2, sigma2, 1.16 * sigma2]
    x_const = torch.full((1, 32, 32), 0.5, dtype=torch.float64)
    report = refine_lambda(fine_tune_fn(base, noisy, spec_factory=factory), candidates, x_const, 1.0,
                           rng.substream(2), spec_factory=factory)
    assert len(report.table) == 3
    assert abs(report.chosen - sigma2) <= 0.16 * sigma2 * (1.0 + 1e-9)
