# Interface en ligne de commande : entraînement, restauration, diagnostics, vérification
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import torch

from ..config.settings import ensure_directories, settings
from ..core.errors import ConfigError, FormatError, ParameterError, RestorationError
from ..core.rng import SeededRng
from ..core.tensor_io import read_tensor
from ..decomposition.estimator import default_mode, export_scatter
from ..diffcore.checkpoint import load_checkpoint, save_checkpoint
from ..losses.operators import DeblurOperator
from ..noise_model.sampler import NoiseSpec, describe_spec
from ..report_generator.generator import ReportGenerator, summary_text
from ..trainer.data import load_corpus, load_image
from ..trainer.metrics import evaluate
from ..trainer.trainer import TrainResult, train_deblur, train_denoiser
from ..variance_estimation.estimator import FrameStack, estimate_noise_curve, multiframe_variance
from ..verification.suites import SUITES, run_suite
from ..workers.realization_pool import RealizationPool
from .run_config import RunConfig, load_run_config, prepare_corpus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

USAGE_ERRORS = (ConfigError, ParameterError, FormatError)


class CheckFailed(Exception):
    """Au moins une vérification a échoué (code de sortie 1)"""


def configure_logging(level: Optional[str] = None) -> None:
    """Journalisation vers logs/pld.log et la sortie standard"""
    level_name = (level or settings.log_level).upper()
    Path(settings.log_directory).mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Path(settings.log_directory) / 'pld.log'),
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )


def configure_threads(threads: Optional[int]) -> RealizationPool:
    """--threads, sinon PLD_THREADS, sinon 1 ; 1 garantit la reproductibilité bit à bit"""
    count = threads or settings.threads or 1
    if count < 1:
        raise ParameterError(f"--threads doit être ≥ 1, reçu {count}")
    torch.set_num_threads(count)
    return RealizationPool(threads=count)


def _generator(args: argparse.Namespace, fallback: Optional[str] = None) -> ReportGenerator:
    return ReportGenerator(args.out or fallback or settings.output_directory)


# Commandes

def _finish_training(args, config: RunConfig, result: TrainResult, reports: ReportGenerator, held_out) -> int:
    save_checkpoint(reports.path("checkpoint"), result.model, result.config.total_steps, result.config.seed)
    result.history.to_csv(reports.path("history.csv"))
    payload = {"steps": result.config.total_steps, "history_rows": len(result.history.rows)}
    if held_out is not None:
        payload["held_out"] = evaluate(result.model, held_out[0], held_out[1]).model_dump()
        payload["noisy_input_psnr_db"] = evaluate(lambda y: y, held_out[0], held_out[1]).psnr_db
    reports.write_report(f"{args.command}.json", payload, config=config, seed=config.train.seed)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"seed": args.seed})})
    if config.train.mode == "deblur":
        raise ConfigError("Mode 'deblur' : utiliser la commande deblur-train")
    reports = _generator(args, config.output)
    corpus, held_out = prepare_corpus(config)
    result = train_denoiser(config.train, corpus, SeededRng(config.train.seed), held_out)
    return _finish_training(args, config, result, reports, held_out)


def cmd_deblur_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"seed": args.seed})})
    kernel_path = args.kernel or config.kernel
    if kernel_path is None:
        raise ConfigError("Noyau de flou requis (--kernel ou 'kernel' dans la configuration)")
    operator = DeblurOperator(read_tensor(kernel_path))
    reports = _generator(args, config.output)
    corpus, held_out = prepare_corpus(config, operator)
    result = train_deblur(config.train, corpus, operator, SeededRng(config.train.seed), held_out)
    return _finish_training(args, config, result, reports, held_out)


def cmd_restore(args: argparse.Namespace) -> int:
    """denoise / deblur : R appliqué directement à l'observation, sans A"""
    model, manifest = load_checkpoint(args.model)
    observed = load_image(args.input)
    if args.command == "deblur" and args.kernel:
        logger.info(f"Noyau {args.kernel} ignoré à l'inférence (R appliqué directement)")
    with torch.no_grad():
        restored = model(observed)
    out = Path(args.output)
    reports = ReportGenerator(out.parent)
    reports.write_image(out.name, restored)
    logger.info(f"✅ Image restaurée: {out}")
    return EXIT_OK


def cmd_decompose(args: argparse.Namespace, pool: RealizationPool) -> int:
    model, _ = load_checkpoint(args.model)
    clean = load_image(args.clean)
    spec = NoiseSpec.parse(args.noise)
    seed = settings.default_seed if args.seed is None else args.seed
    mode = args.mode or default_mode(clean, args.samples)
    pixel = args.pixel if args.pixel is not None else clean.numel() // 2
    reports = _generator(args)
    scatter, decomposition = export_scatter(
        model, clean, pixel, spec, args.alpha, args.samples, SeededRng(seed), mode=mode,
        csv_path=reports.path("scatter.csv"), pool=pool,
    )
    payload = decomposition.to_report().model_dump()
    payload.update(pixel=pixel, pearson=scatter.pearson, noise=describe_spec(spec), alpha=args.alpha)
    reports.write_report("decompose.json", payload, config=vars_for_report(args), seed=seed)
    return EXIT_OK


def cmd_estimate_noise(args: argparse.Namespace) -> int:
    reports = _generator(args)
    payload: Dict[str, object] = {}
    images = load_corpus(args.input)
    curve, fit = estimate_noise_curve(images)
    curve.to_csv(reports.path("variance_curve.csv"))
    payload["levels"] = int(len(curve.counts))
    if fit is not None:
        payload["fit"] = {"kind": fit.kind, "mu": fit.mu, "lambda": fit.lam, "variance": fit.variance,
                          "noise": fit.to_noise_spec().to_text()}
    if args.frames:
        frames = load_corpus(args.frames)
        variance = multiframe_variance(FrameStack(frames))
        reports.write_image("variance_map.pldt", variance)
        payload["frames"] = len(frames)
        payload["mean_variance"] = float(variance.mean())
    reports.write_report("estimate_noise.json", payload, config=vars_for_report(args), seed=None)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, pool: RealizationPool) -> int:
    reports = _generator(args)
    seed = settings.default_seed if args.seed is None else args.seed
    result = run_suite(args.suite, seed, samples=args.samples, out_dir=reports.run_directory, pool=pool)
    reports.write_report(f"verify_{args.suite}.json", result, config=vars_for_report(args), seed=seed)
    print(summary_text(result.reports))
    if not result.passed:
        raise CheckFailed(f"Suite {args.suite} en échec")
    return EXIT_OK


def vars_for_report(args: argparse.Namespace) -> Dict[str, object]:
    return dict(sorted(vars(args).items()))


# Analyseur

def build_parser() -> argparse.ArgumentParser:
    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("--threads", type=int, default=None, help="Threads de calcul (défaut: PLD_THREADS ou 1)")
    base.add_argument("--log-level", default=None, help="Niveau de journalisation (défaut: PLD_LOG_LEVEL)")
    base.add_argument("--seed", type=int, default=None, help="Graine du générateur")

    common = argparse.ArgumentParser(add_help=False, parents=[base])
    common.add_argument("--out", default=None, help="Répertoire de sortie de l'exécution")

    parser = argparse.ArgumentParser(prog="pld", description=settings.app_name)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "deblur-train"):
        cmd = sub.add_parser(name, parents=[common], help=f"Commande {name}")
        cmd.add_argument("--config", required=True, help="Configuration JSON (RunConfig)")
        if name == "deblur-train":
            cmd.add_argument("--kernel", default=None, help="Noyau de flou (PLDT)")

    for name in ("denoise", "deblur"):
        cmd = sub.add_parser(name, parents=[base], help=f"Commande {name}")
        cmd.add_argument("--model", required=True, help="Répertoire de checkpoint")
        cmd.add_argument("--in", dest="input", required=True, help="Image observée (PGM ou PLDT)")
        cmd.add_argument("--out", dest="output", required=True, help="Image restaurée (PGM ou PLDT)")
        if name == "deblur":
            cmd.add_argument("--kernel", default=None, help="Noyau de flou (non utilisé à l'inférence)")

    cmd = sub.add_parser("decompose", parents=[common], help="Décomposition g + L·n̂ + e")
    cmd.add_argument("--model", required=True)
    cmd.add_argument("--clean", required=True, help="Image propre x (PGM ou PLDT)")
    cmd.add_argument("--noise", required=True, help="gaussian:<σ> | poisson:<λ>[,mu=<μ>] | var_map:<fichier.pldt>[,aux_scale=<1+β>]")
    cmd.add_argument("--samples", type=int, default=1000)
    cmd.add_argument("--alpha", type=float, default=0.5)
    cmd.add_argument("--mode", choices=("full", "diagonal"), default=None)
    cmd.add_argument("--pixel", type=int, default=None)

    cmd = sub.add_parser("estimate-noise", parents=[common], help="Estimation de la variance du bruit")
    cmd.add_argument("--in", dest="input", required=True, help="Motif glob des images")
    cmd.add_argument("--frames", default=None, help="Motif glob des trames (estimation multi-trames)")

    cmd = sub.add_parser("verify", parents=[common], help="Suites de vérification")
    cmd.add_argument("--suite", choices=(*SUITES, "all"), required=True)
    cmd.add_argument("--samples", type=int, default=None, help="Nombre de réalisations (défaut propre à chaque suite)")
    return parser


HANDLERS: Dict[str, Callable] = {
    "train": lambda args, pool: cmd_train(args),
    "deblur-train": lambda args, pool: cmd_deblur_train(args),
    "denoise": lambda args, pool: cmd_restore(args),
    "deblur": lambda args, pool: cmd_restore(args),
    "decompose": cmd_decompose,
    "estimate-noise": lambda args, pool: cmd_estimate_noise(args),
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Point d'entrée : 0 succès, 1 vérification ou calcul en échec, 2 usage/configuration"""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    configure_logging(args.log_level)
    try:
        pool = configure_threads(args.threads)
        ensure_directories()
        logger.info(f"🚀 {settings.app_name} v{settings.app_version} : commande {args.command}")
        code = HANDLERS[args.command](args, pool)
        logger.info(f"✅ Commande {args.command} terminée")
        return code
    except CheckFailed as e:
        logger.error(f"❌ {e}")
        return EXIT_FAILURE
    except USAGE_ERRORS as e:
        logger.error(f"❌ Erreur d'usage: {e}")
        return EXIT_USAGE
    except RestorationError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"❌ Erreur inattendue: {e}")
        return EXIT_FAILURE
