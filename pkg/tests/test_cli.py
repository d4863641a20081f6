import json
import logging

import pytest
import torch

from src.cli.commands import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from src.core.rng import SeededRng
from src.core.tensor_io import write_pgm, write_tensor
from src.noise_model.sampler import NoiseSpec, sample_noise
from src.verification.checks import make_report
from src.verification.suites import SuiteReport

pytestmark = pytest.mark.integration


@pytest.fixture(autouse=True)
def restore_logging():
    # La CLI reconfigure la journalisation racine
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers, root.level = handlers, level


def write_config(path, **train):
    values = {
        "stage1_steps": 0,
        "stage2_steps": 0,
        "patch_size": [8, 8],
        "architecture": {"depth": 3, "width": 4},
    }
    values.update(train)
    config = {"train": values, "corpus": {"count": 4, "size": 16, "held_out": 2}}
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


def test_usage_errors(run_dirs):
    assert main([]) == EXIT_USAGE
    assert main(["verify", "--suite", "inconnue"]) == EXIT_USAGE
    assert main(["denoise", "--model", "m"]) == EXIT_USAGE


def test_verify_writes_report(run_dirs, capsys):
    out = run_dirs / "verify"
    code = main(["verify", "--suite", "corollary", "--samples", "20000", "--seed", "3", "--out", str(out)])
    assert code == EXIT_OK
    document = json.loads((out / "verify_corollary.json").read_text(encoding="utf-8"))
    assert document["command"] == "verify_corollary"
    assert document["seed"] == 3
    assert document["report"]["passed"] is True
    assert "[OK]" in capsys.readouterr().out


def test_verify_is_reproducible(run_dirs):
    first, second = run_dirs / "a", run_dirs / "b"
    for out in (first, second):
        assert main(["verify", "--suite", "convexity", "--samples", "300", "--seed", "5", "--out", str(out)]) == EXIT_OK
    report_a = json.loads((first / "verify_convexity.json").read_text())["report"]
    report_b = json.loads((second / "verify_convexity.json").read_text())["report"]
    assert report_a == report_b


def test_verify_failure_exit_code(run_dirs, mocker):
    failing = make_report("prop1", "equality", 1.0, 0.01, 10)
    mocker.patch("src.cli.commands.run_suite",
                 return_value=SuiteReport(suite="prop1", seed=0, passed=False, reports=[failing]))
    assert main(["verify", "--suite", "prop1", "--out", str(run_dirs / "fail")]) == EXIT_FAILURE
    assert (run_dirs / "fail" / "verify_prop1.json").exists()


def test_unknown_config_key(run_dirs):
    config = run_dirs / "config.json"
    config.write_text(json.dumps({"train": {"inconnu": 1}}), encoding="utf-8")
    assert main(["train", "--config", str(config)]) == EXIT_USAGE
    assert main(["train", "--config", str(run_dirs / "absent.json")]) == EXIT_USAGE


def test_deblur_mode_requires_deblur_train(run_dirs):
    config = write_config(run_dirs / "config.json", mode="deblur")
    assert main(["train", "--config", str(config)]) == EXIT_USAGE


def test_train_then_denoise_identity(run_dirs):
    config = write_config(run_dirs / "config.json")
    out = run_dirs / "train"
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert (out / "checkpoint").is_dir()
    assert (out / "history.csv").read_text().splitlines()[0] == "step,loss,psnr,ssim"
    document = json.loads((out / "train.json").read_text())
    assert document["report"]["steps"] == 0
    assert "held_out" in document["report"]

    # Modèle non entraîné : identité, l'image PGM ressort inchangée
    image = torch.arange(256, dtype=torch.float64).reshape(1, 16, 16) / 255.0
    write_pgm(run_dirs / "in.pgm", image)
    code = main(["denoise", "--model", str(out / "checkpoint"), "--in", str(run_dirs / "in.pgm"),
                 "--out", str(run_dirs / "out.pgm")])
    assert code == EXIT_OK
    assert (run_dirs / "out.pgm").read_bytes() == (run_dirs / "in.pgm").read_bytes()


def test_denoise_missing_checkpoint(run_dirs):
    write_pgm(run_dirs / "in.pgm", torch.zeros((1, 8, 8), dtype=torch.float64))
    code = main(["denoise", "--model", str(run_dirs / "absent"), "--in", str(run_dirs / "in.pgm"),
                 "--out", str(run_dirs / "out.pgm")])
    assert code == EXIT_USAGE


def test_decompose_writes_scatter(run_dirs):
    config = write_config(run_dirs / "config.json")
    out = run_dirs / "train"
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    write_tensor(run_dirs / "clean.pldt", SeededRng(70).uniform(0.2, 0.8, (1, 8, 8)))

    decomposed = run_dirs / "decompose"
    code = main(["decompose", "--model", str(out / "checkpoint"), "--clean", str(run_dirs / "clean.pldt"),
                 "--noise", "gaussian:0.1", "--samples", "200", "--pixel", "10", "--out", str(decomposed)])
    assert code == EXIT_OK
    lines = (decomposed / "scatter.csv").read_text().splitlines()
    assert lines[0] == "Ln_hat_i,R_minus_g_i"
    assert len(lines) == 201
    report = json.loads((decomposed / "decompose.json").read_text())["report"]
    assert report["pixel"] == 10
    assert report["noise"]["kind"] == "gaussian"


def test_estimate_noise_writes_curve(run_dirs):
    folder = run_dirs / "noisy"
    folder.mkdir()
    rng = SeededRng(71)
    ramp = torch.linspace(0.2, 0.8, 128, dtype=torch.float64).expand(1, 128, 128).clone()
    for k in range(2):
        write_tensor(folder / f"image_{k}.pldt", ramp + sample_noise(NoiseSpec.gaussian(0.02), ramp, rng.substream(k)))

    out = run_dirs / "estimate"
    assert main(["estimate-noise", "--in", str(folder / "*.pldt"), "--frames", str(folder / "*.pldt"),
                 "--out", str(out)]) == EXIT_OK
    assert (out / "variance_curve.csv").read_text().splitlines()[0] == "v,V,count"
    assert (out / "variance_map.pldt").exists()
    report = json.loads((out / "estimate_noise.json").read_text())["report"]
    assert report["frames"] == 2
    assert report["levels"] > 1


def test_estimate_noise_without_images(run_dirs):
    assert main(["estimate-noise", "--in", str(run_dirs / "*.pgm")]) == EXIT_USAGE


def test_deblur_train_then_deblur(run_dirs):
    config = write_config(run_dirs / "config.json", mode="deblur", gamma=0.0625, gamma_prox=0.0625)
    kernel = run_dirs / "box.pldt"
    write_tensor(kernel, torch.full((3, 3), 1.0 / 9.0, dtype=torch.float64))

    # Noyau obligatoire
    assert main(["deblur-train", "--config", str(config)]) == EXIT_USAGE

    out = run_dirs / "deblur"
    assert main(["deblur-train", "--config", str(config), "--kernel", str(kernel), "--out", str(out)]) == EXIT_OK
    assert (out / "deblur-train.json").exists()

    image = torch.arange(256, dtype=torch.float64).reshape(1, 16, 16) / 255.0
    write_pgm(run_dirs / "blurred.pgm", image)
    code = main(["deblur", "--model", str(out / "checkpoint"), "--in", str(run_dirs / "blurred.pgm"),
                 "--kernel", str(kernel), "--out", str(run_dirs / "sharp.pgm")])
    assert code == EXIT_OK
    assert (run_dirs / "sharp.pgm").read_bytes() == (run_dirs / "blurred.pgm").read_bytes()
