# config.py

import os
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union
from dotenv import load_dotenv

from core.benchmark import BenchmarkSettings
from core.data.advection import DatasetConfig
from core.errors import ConfigurationError
from core.model import FactFormerConfig
from core.training import TrainConfig
from utils.paths import ensure_parent_dir

logger = logging.getLogger(__name__)

load_dotenv()

APP_DATA_DIR: str = os.getenv("FACT_DATA_PATH", "data")
APP_LOG_DIR: str = os.getenv("FACT_LOG_PATH", "logs")

MODEL_KEYS = (
    "grid",
    "in_channels",
    "context_frames",
    "hidden_dim",
    "depth",
    "heads",
    "kernel_dim",
    "rope_lambda",
    "march_steps",
    "rff_scale",
    "per_layer_rff",
    "skip_from_pre_psi",
    "norm_eps",
)
TRAIN_KEYS = (
    "mode",
    "iterations",
    "batch_size",
    "max_lr",
    "lr_period",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "pushforward_start",
    "curriculum_fraction",
    "eval_every",
    "eval_horizon",
    "grad_clip",
)


def get_default_settings() -> Dict[str, Any]:
    """
    返回一份默认的运行配置。每个键都可以在配置文件或同名命令行参数中覆盖。
    """
    return {
        # 模型
        "grid": "32,32",
        "in_channels": 1,
        "context_frames": 4,
        "hidden_dim": 64,
        "depth": 2,
        "heads": 4,
        "kernel_dim": 16,
        "rope_lambda": 64.0,
        "march_steps": 4,
        "rff_scale": 1.0,
        "per_layer_rff": False,
        "skip_from_pre_psi": False,
        "norm_eps": 1e-5,
        "seed": 0,
        # 训练
        "mode": "lm",
        "iterations": 10000,
        "batch_size": 4,
        "max_lr": 3e-4,
        "lr_period": 10000,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "weight_decay": 1e-4,
        "pushforward_start": 0.06,
        "curriculum_fraction": 0.1,
        "eval_every": 500,
        "eval_horizon": 16,
        "grad_clip": 1.0,
        # 数据
        "grid_size": 32,
        "frames": 30,
        "dt": 0.05,
        "nu": 0.01,
        "cx": 1.0,
        "cy": 0.5,
        "alpha": 2.5,
        "k_max": 8,
        "n_train": 200,
        "n_test": 20,
        "data_seed": 0,
        # 基准
        "bench_grids": "64",
        "bench_kernel_dims": "64",
        "bench_heads": "4",
        "bench_width": 64,
        "bench_n_dims": 2,
        "bench_reps": 10,
        "bench_warmup": 3,
        "bench_mechanisms": "factorized,linear",
        # 路径
        "train_data": os.path.join(APP_DATA_DIR, "train"),
        "test_data": os.path.join(APP_DATA_DIR, "test"),
    }


def coerce_value(key: str, text: Union[str, Any], defaults: Optional[Mapping[str, Any]] = None) -> Any:
    """按默认值的类型转换配置文本。"""
    defaults = defaults if defaults is not None else get_default_settings()
    if key not in defaults:
        raise ConfigurationError(f"Unknown config key '{key}'.")
    default = defaults[key]
    if not isinstance(text, str):
        return text
    value = text.strip()
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigurationError(
            f"Config key '{key}' expects a {type(default).__name__}, got '{value}'."
        ) from None
    return value


def parse_run_config(text: str, source: str = "<config>") -> Dict[str, Any]:
    """解析 key=value 文本，`#` 之后为注释。只返回出现的键。"""
    defaults = get_default_settings()
    parsed: Dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{line_no}: expected key=value, got '{line}'.")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigurationError(f"{source}:{line_no}: unknown config key '{key}'.")
        parsed[key] = coerce_value(key, value, defaults)
    return parsed


def load_run_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    读取运行配置文件并与默认值合并。path 为 None 时只返回默认值。
    """
    settings = get_default_settings()
    if path is None:
        return settings
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise OSError(f"Cannot read run config '{path}': {e}") from e
    settings.update(parse_run_config(text, str(path)))
    logger.debug(f"Run config loaded from '{path}'.")
    return settings


def apply_overrides(settings: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """把命令行覆盖项 (值为 None 的跳过) 合并进配置。"""
    merged = dict(settings)
    for key, value in overrides.items():
        if value is None:
            continue
        merged[key] = coerce_value(key, value)
    return merged


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_run_config(path: Union[str, Path], settings: Mapping[str, Any]) -> Path:
    """
    把配置以 key=value 形式写回文件 (运行回显)。
    """
    target = ensure_parent_dir(path)
    try:
        with open(target, "w", encoding="utf-8") as f:
            for key, value in settings.items():
                f.write(f"{key}={_format_value(value)}\n")
        logger.debug(f"Run config successfully saved to '{target}'.")
    except OSError as e:
        logger.error(f"Error saving run config: {e}", exc_info=True)
        raise
    return target


def _effective_march_steps(settings: Mapping[str, Any]) -> int:
    return 1 if str(settings["mode"]).lower() == "ar" else int(settings["march_steps"])


def parse_int_list(key: str, text: Any) -> Tuple[int, ...]:
    """解析逗号分隔的整数列表，例如 grid=32,32。"""
    text = str(text)
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigurationError(f"{key} must be a comma-separated list of ints, got '{text}'.") from None


def build_model_config(settings: Mapping[str, Any]) -> FactFormerConfig:
    return FactFormerConfig(
        grid=parse_int_list("grid", settings["grid"]),
        in_channels=int(settings["in_channels"]),
        context_frames=int(settings["context_frames"]),
        hidden_dim=int(settings["hidden_dim"]),
        depth=int(settings["depth"]),
        heads=int(settings["heads"]),
        kernel_dim=int(settings["kernel_dim"]),
        rope_lambda=float(settings["rope_lambda"]),
        march_steps=_effective_march_steps(settings),
        seed=int(settings["seed"]),
        rff_scale=float(settings["rff_scale"]),
        per_layer_rff=bool(settings["per_layer_rff"]),
        skip_from_pre_psi=bool(settings["skip_from_pre_psi"]),
        norm_eps=float(settings["norm_eps"]),
    )


def build_train_config(settings: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(
        iterations=int(settings["iterations"]),
        batch_size=int(settings["batch_size"]),
        max_lr=float(settings["max_lr"]),
        lr_period=int(settings["lr_period"]),
        beta1=float(settings["beta1"]),
        beta2=float(settings["beta2"]),
        adam_eps=float(settings["adam_eps"]),
        weight_decay=float(settings["weight_decay"]),
        march_steps=_effective_march_steps(settings),
        mode=str(settings["mode"]).lower(),
        pushforward_start=float(settings["pushforward_start"]),
        curriculum_fraction=float(settings["curriculum_fraction"]),
        eval_every=int(settings["eval_every"]),
        eval_horizon=int(settings["eval_horizon"]),
        grad_clip=float(settings["grad_clip"]),
        seed=int(settings["seed"]),
    )


def build_dataset_config(settings: Mapping[str, Any]) -> DatasetConfig:
    return DatasetConfig(
        grid_size=int(settings["grid_size"]),
        frames=int(settings["frames"]),
        dt=float(settings["dt"]),
        nu=float(settings["nu"]),
        velocity=(float(settings["cx"]), float(settings["cy"])),
        alpha=float(settings["alpha"]),
        k_max=int(settings["k_max"]),
        n_train=int(settings["n_train"]),
        n_test=int(settings["n_test"]),
        seed=int(settings["data_seed"]),
    )


def build_benchmark_settings(settings: Mapping[str, Any]) -> BenchmarkSettings:
    mechanisms = str(settings["bench_mechanisms"])
    return BenchmarkSettings(
        grids=parse_int_list("bench_grids", settings["bench_grids"]),
        kernel_dims=parse_int_list("bench_kernel_dims", settings["bench_kernel_dims"]),
        heads=parse_int_list("bench_heads", settings["bench_heads"]),
        width=int(settings["bench_width"]),
        n_dims=int(settings["bench_n_dims"]),
        reps=int(settings["bench_reps"]),
        warmup=int(settings["bench_warmup"]),
        mechanisms=tuple(m.strip() for m in mechanisms.split(",") if m.strip()),
    )
