# main.py

import argparse
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, TextIO

import config
from config import APP_DATA_DIR, APP_LOG_DIR
from core.attention import export_kernels
from core.benchmark import benchmark_attention, write_benchmark_csv
from core.checkpoint import load_checkpoint
from core.data import generate_dataset, load_dataset
from core.errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateReferenceError,
    DegenerateStatisticsError,
    FactFormerError,
    FormatError,
    NumericalError,
    OracleScaleError,
    ResourceBudgetError,
    TrainingDivergenceError,
)
from core.evaluation import evaluate_model
from core.model import FactFormerModel
from core.spectrum import attention_spectrum_sweep, write_spectrum_csv
from core.training import train
from utils.paths import ensure_output_dir, ensure_parent_dir, require_readable
from utils.workers import resolve_worker_count

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_FORMAT = 4

BENCHMARK_ALIASES: Dict[str, str] = {
    "bench_grids": "--grids",
    "bench_kernel_dims": "--kernel_dims",
    "bench_width": "--width",
    "bench_n_dims": "--n_dims",
    "bench_reps": "--reps",
    "bench_warmup": "--warmup",
    "bench_mechanisms": "--mechanisms",
}

_logging_configured = False


def setup_logging() -> None:
    """配置全局日志记录器: 滚动日志文件 + 标准错误输出。"""
    global _logging_configured
    if _logging_configured:
        return
    if not os.path.exists(APP_LOG_DIR):
        os.makedirs(APP_LOG_DIR)

    log_file = os.path.join(APP_LOG_DIR, "factformer.log")
    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    handler = RotatingFileHandler(
        log_file, maxBytes=1 * 1024 * 1024, backupCount=5, encoding="utf-8"
    )
    handler.setFormatter(formatter)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)

    root_logger = logging.getLogger()
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()
    root_logger.setLevel(log_level)
    root_logger.addHandler(handler)
    root_logger.addHandler(console)
    _logging_configured = True

    logger = logging.getLogger(__name__)
    logger.info("=" * 60)
    logger.info(f"FactFormer Toolkit Starting Up (Log Level: {log_level})")
    logger.info(f"Logging configured. Log file at: {log_file}")
    logger.info("=" * 60)


logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(
    parser: argparse.ArgumentParser, aliases: Optional[Dict[str, str]] = None
) -> None:
    """每个配置键一个同名参数；aliases 为个别键再挂一个短名字。"""
    aliases = aliases or {}
    group = parser.add_argument_group("run config keys (override the --config file)")
    for key, default in config.get_default_settings().items():
        names = [f"--{key}"] + ([aliases[key]] if key in aliases else [])
        group.add_argument(
            *names, dest=f"cfg_{key}", default=None, metavar="VALUE",
            help=f"(default: {default})",
        )


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key=value run config file")
    parser.add_argument("--threads", type=int, default=None, help="worker cap (fallback: FACT_THREADS)")
    parser.add_argument("--stdout", action="store_true", help="write the CSV to standard output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factformer", description="Factorized axial attention neural PDE surrogate toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate the advection-diffusion toy dataset")
    _add_common_flags(gen)
    gen.add_argument("--out-dir", default=APP_DATA_DIR, help="dataset root (train/ and test/ below)")
    _add_config_flags(gen)

    tr = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common_flags(tr)
    tr.add_argument("--out", default=os.path.join(APP_DATA_DIR, "model.ffckpt"), help="checkpoint path")
    _add_config_flags(tr)

    ev = sub.add_parser("eval", help="roll out a checkpoint over a test set")
    _add_common_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", default=None, help="test dataset directory (default: test_data key)")
    ev.add_argument("--horizon", type=int, default=None, help="rollout frames (default: eval_horizon key)")
    ev.add_argument("--output", default=None, help="CSV path (default: <checkpoint>.rollout.csv)")
    _add_config_flags(ev)

    bench = sub.add_parser("benchmark", help="time factorized vs linear attention")
    _add_common_flags(bench)
    bench.add_argument("--output", default=os.path.join(APP_DATA_DIR, "benchmark.csv"))
    _add_config_flags(bench, BENCHMARK_ALIASES)

    spectrum = sub.add_parser("spectrum", help="singular value spectra of attention kernels")
    _add_common_flags(spectrum)
    spectrum.add_argument("--checkpoint", required=True)
    spectrum.add_argument("--data", default=None, help="dataset directory (default: test_data key)")
    spectrum.add_argument("--samples", type=int, default=100)
    spectrum.add_argument("--full", action="store_true", help="also analyse the materialized baseline kernel")
    spectrum.add_argument("--truncate", type=int, default=64, help="top-r components for full kernels")
    spectrum.add_argument("--export-kernels", default=None, help="directory for raw kernel dumps")
    spectrum.add_argument("--output", default=None, help="CSV path (default: <checkpoint>.spectrum.csv)")
    _add_config_flags(spectrum)
    return parser


def _settings_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    settings = config.load_run_config(args.config)
    overrides = {
        key[len("cfg_"):]: value for key, value in vars(args).items() if key.startswith("cfg_")
    }
    return config.apply_overrides(settings, overrides)


def _emit_csv(args: argparse.Namespace, path: Optional[str], write: Callable[[TextIO], None]) -> None:
    if args.stdout or path is None:
        write(sys.stdout)
        sys.stdout.flush()
        return
    target = ensure_parent_dir(path)
    with open(target, "w", encoding="utf-8", newline="") as f:
        write(f)
    logger.info(f"CSV written to '{target}'.")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    cfg = config.build_dataset_config(settings)
    root = ensure_output_dir(args.out_dir)
    workers = resolve_worker_count(args.threads)
    train_seeds = range(cfg.seed, cfg.seed + cfg.n_train)
    test_seeds = range(cfg.seed + cfg.n_train, cfg.seed + cfg.n_train + cfg.n_test)
    generate_dataset(cfg, root / "train", train_seeds, workers)
    if cfg.n_test > 0:
        generate_dataset(cfg, root / "test", test_seeds, workers)
    config.save_run_config(root / "generate.run.cfg", settings)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    model_cfg = config.build_model_config(settings)
    train_cfg = config.build_train_config(settings)
    settings["march_steps"] = model_cfg.march_steps

    train_dir = Path(settings["train_data"])
    require_readable(train_dir / "manifest.txt")
    test_dir = Path(settings["test_data"])
    has_test = (test_dir / "manifest.txt").is_file()
    checkpoint = ensure_parent_dir(args.out)
    config.save_run_config(f"{checkpoint}.run.cfg", settings)

    datasets = load_dataset(train_dir)
    eval_sets = load_dataset(test_dir) if has_test else None
    model = FactFormerModel(model_cfg)
    logger.info(f"Parameter census: {model.parameter_census()}")
    train(
        model,
        datasets,
        train_cfg,
        metrics_path=f"{checkpoint}.metrics.csv",
        eval_path=f"{checkpoint}.eval.csv",
        eval_datasets=eval_sets,
        checkpoint_path=checkpoint,
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    require_readable(args.checkpoint)
    data_dir = Path(args.data or settings["test_data"])
    require_readable(data_dir / "manifest.txt")
    model = load_checkpoint(args.checkpoint)
    horizon = args.horizon if args.horizon is not None else int(settings["eval_horizon"])
    k = model.config.march_steps
    if horizon < 1 or horizon % k != 0:
        raise ConfigurationError(f"--horizon {horizon} must be a positive multiple of k={k}.")
    logger.info(f"Parameter census: {model.parameter_census()}")
    report = evaluate_model(model, load_dataset(data_dir), horizon)
    output = args.output or f"{args.checkpoint}.rollout.csv"
    _emit_csv(args, output, report.write_csv)
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    rows = benchmark_attention(config.build_benchmark_settings(settings))
    _emit_csv(args, args.output, lambda stream: write_benchmark_csv(rows, stream))
    return EXIT_OK


def cmd_spectrum(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    require_readable(args.checkpoint)
    data_dir = Path(args.data or settings["test_data"])
    require_readable(data_dir / "manifest.txt")
    model = load_checkpoint(args.checkpoint)
    datasets = load_dataset(data_dir)
    reports = attention_spectrum_sweep(
        model,
        datasets,
        args.samples,
        include_full=args.full,
        truncate=args.truncate,
        max_workers=resolve_worker_count(args.threads),
    )
    if args.export_kernels:
        frames = datasets[0].window(0, model.config.context_frames)
        for layer, (_, kernels) in enumerate(model.trace_layers(frames)):
            export_kernels(kernels, args.export_kernels, layer)
    output = args.output or f"{args.checkpoint}.spectrum.csv"
    _emit_csv(args, output, lambda stream: write_spectrum_csv(reports, stream))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
    "spectrum": cmd_spectrum,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数，解析命令行并把异常映射为退出码。"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    setup_logging()
    try:
        return COMMANDS[args.command](args)
    except FormatError as e:
        logger.error(f"File format error: {e}", exc_info=True)
        return EXIT_FORMAT
    except (
        TrainingDivergenceError, NumericalError, DegenerateReferenceError, DegenerateStatisticsError
    ) as e:
        logger.error(f"Numerical failure: {e}", exc_info=True)
        return EXIT_DIVERGED
    except (
        ConfigurationError, ContractViolationError, ResourceBudgetError, OracleScaleError, OSError
    ) as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True)
        return EXIT_USAGE
    except FactFormerError as e:
        logger.error(f"Unhandled library error {type(e).__name__}: {e}", exc_info=True)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
