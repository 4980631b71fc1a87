# core/training.py

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from utils.paths import ensure_parent_dir
from .checkpoint import save_checkpoint
from .data.field_file import TrajectoryDataset
from .errors import ConfigurationError, ContractViolationError, NumericalError, TrainingDivergenceError
from .evaluation import evaluate_model
from .layers import Param
from .model import FactFormerModel
from .tensor import FieldTensor, relative_l2_with_grad

logger = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "lr", "train_loss")
EVAL_HEADER = ("iter", "frame", "rel_l2")
TRAIN_MODES = ("lm", "ar")


@dataclass(frozen=True)
class TrainConfig:
    """
    训练超参数。AR 模式等价于 k = 1 的潜空间推进加上两步展开训练。
    """

    iterations: int = 10000
    batch_size: int = 4
    max_lr: float = 3e-4
    lr_period: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    march_steps: int = 4
    mode: str = "lm"
    pushforward_start: float = 0.06
    curriculum_fraction: float = 0.1
    eval_every: int = 500
    eval_horizon: int = 16
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"Training mode must be one of {TRAIN_MODES}, got '{self.mode}'.")
        if self.mode == "ar" and self.march_steps != 1:
            raise ConfigurationError("AR mode requires march_steps = 1.")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError(f"AdamW betas must lie in (0, 1), got {self.beta1}, {self.beta2}.")
        if not 0.0 <= self.pushforward_start <= 1.0:
            raise ConfigurationError(
                f"pushforward_start must lie in [0, 1], got {self.pushforward_start}."
            )
        if not 0.0 <= self.curriculum_fraction <= 1.0:
            raise ConfigurationError(
                f"curriculum_fraction must lie in [0, 1], got {self.curriculum_fraction}."
            )
        if self.iterations < 0 or self.batch_size < 1 or self.lr_period < 1 or self.march_steps < 1:
            raise ConfigurationError(
                "iterations must be >= 0; batch_size, lr_period and march_steps must be >= 1."
            )
        if self.max_lr < 0 or self.adam_eps <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigurationError("Learning rate, eps, weight decay and grad_clip must be non-negative.")


# ---------------------------------------------------------------------------
# Optimizer and schedules
# ---------------------------------------------------------------------------


def adamw_step(
    params: Sequence[Param],
    lr: float,
    step: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """
    解耦权重衰减的 Adam 更新 (step 从 1 开始计数)，更新后清零梯度。
    任何参数的梯度出现 NaN/Inf 时不做任何更新，直接报错。
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDivergenceError(
                f"Non-finite gradient in parameter '{p.name}'.", parameter=p.name, iteration=step
            )
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for p in params:
        p.m1 = beta1 * p.m1 + (1.0 - beta1) * p.grad
        p.m2 = beta2 * p.m2 + (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m1 / correction1
        v_hat = p.m2 / correction2
        p.value[...] = p.value - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.value)
        p.zero_grad()


class AdamW:
    """持有步数计数器的 AdamW，矩估计存放在每个 Param 自己的槽里。"""

    def __init__(
        self,
        params: Sequence[Param],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0

    @classmethod
    def from_config(cls, params: Sequence[Param], cfg: TrainConfig) -> "AdamW":
        return cls(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def step(self, lr: float) -> None:
        adamw_step(
            self.params,
            lr,
            self.step_count + 1,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )
        self.step_count += 1


def cyclic_lr(iteration: int, cfg: TrainConfig) -> float:
    """
    三角形循环学习率: 每个周期从 lr_min 升到 max_lr 再降回 lr_min，
    lr_min = max_lr / 25；最后一个完整周期之后保持 lr_min。
    """
    if iteration < 0:
        raise ContractViolationError(f"Iteration must be >= 0, got {iteration}.")
    lr_min = cfg.max_lr / 25.0
    period = cfg.lr_period
    n_cycles = max(1, cfg.iterations // period)
    if iteration >= n_cycles * period:
        return lr_min
    phase = (iteration % period) / period
    return lr_min + (cfg.max_lr - lr_min) * (1.0 - abs(2.0 * phase - 1.0))


def curriculum(iteration: int, cfg: TrainConfig) -> Tuple[int, bool]:
    """
    返回 (当前推进步数 k′, 是否启用 pushforward)。
    k′ 在前 curriculum_fraction 的迭代里按等长区间从 1 增加到 k。
    """
    k = cfg.march_steps
    ramp = max(1, int(round(cfg.curriculum_fraction * cfg.iterations)))
    active = min(k, 1 + (iteration * k) // ramp)
    enabled = iteration >= cfg.pushforward_start * cfg.iterations
    return active, enabled


def clip_gradients(params: Sequence[Param], max_norm: float) -> float:
    """按全局范数裁剪梯度，返回裁剪前的范数。"""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _frame_losses(
    outputs: Sequence[FieldTensor], truth: Sequence[FieldTensor], scale: float
) -> Tuple[float, List[np.ndarray]]:
    steps = len(outputs)
    total = 0.0
    grads: List[np.ndarray] = []
    for out, ref in zip(outputs, truth):
        value, grad = relative_l2_with_grad(out, ref)
        total += value
        grads.append(grad * (scale / steps))
    return total / steps, grads


def step_loss(
    model: FactFormerModel,
    window: Sequence[FieldTensor],
    steps: Optional[int] = None,
    scale: float = 1.0,
) -> float:
    """
    单次调用的损失: 用前 T_in 帧预测接下来 steps 帧，k 帧的相对 L² 取平均。
    梯度乘以 scale 后累加到参数上。
    """
    t_in = model.config.context_frames
    steps = model.config.march_steps if steps is None else steps
    if len(window) < t_in + steps:
        raise ContractViolationError(
            f"Step loss needs {t_in + steps} frames, window has {len(window)}."
        )
    outputs, backward = model.forward(window[:t_in], steps)
    loss, grads = _frame_losses(outputs, window[t_in:t_in + steps], scale)
    backward(grads)
    return loss


def pushforward_loss(
    model: FactFormerModel,
    window: Sequence[FieldTensor],
    steps: Optional[int] = None,
    scale: float = 1.0,
) -> float:
    """
    两步展开: 第一次调用的预测当作常量组成第二次调用的上下文，
    只对第二次调用的损失求梯度。
    """
    t_in = model.config.context_frames
    steps = model.config.march_steps if steps is None else steps
    need = t_in + 2 * steps
    if len(window) < need:
        raise ContractViolationError(
            f"Pushforward needs {need} frames, window has {len(window)}."
        )
    context = list(window[:t_in])
    first = model.predict(context, steps)
    second_context = (context + list(first))[-t_in:]
    outputs, backward = model.forward(second_context, steps)
    loss, grads = _frame_losses(outputs, window[t_in + steps:need], scale)
    backward(grads)
    return loss


def sample_window(
    datasets: Sequence[TrajectoryDataset], length: int, rng: np.random.Generator
) -> List[FieldTensor]:
    """均匀抽一条足够长的轨迹，再均匀抽一个起点。"""
    eligible = [d for d in datasets if len(d) >= length]
    if not eligible:
        raise ContractViolationError(f"No trajectory has the {length} frames a training window needs.")
    trajectory = eligible[int(rng.integers(len(eligible)))]
    start = int(rng.integers(len(trajectory) - length + 1))
    return trajectory.window(start, length)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FactFormerModel
    losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    eval_rows: List[Tuple[int, int, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def _open_csv(path: Optional[Union[str, Path]], header: Sequence[str]) -> Tuple[Optional[TextIO], Optional[Any]]:
    if path is None:
        return None, None
    stream = open(ensure_parent_dir(path), "w", encoding="utf-8", newline="")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(header)
    stream.flush()
    return stream, writer


def train(
    model: FactFormerModel,
    datasets: Sequence[TrajectoryDataset],
    cfg: TrainConfig,
    metrics_path: Optional[Union[str, Path]] = None,
    eval_path: Optional[Union[str, Path]] = None,
    eval_datasets: Optional[Sequence[TrajectoryDataset]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    训练循环: 抽窗口 → 单步或 pushforward 损失 → 反向 → 梯度裁剪 → AdamW。
    启用 pushforward 后奇数迭代使用 pushforward，偶数迭代使用单步损失。
    每 eval_every 次迭代评估一次并保存检查点；发散时抛出异常，
    之前保存的检查点保持不变。
    """
    if not datasets:
        raise ContractViolationError("Training needs at least one trajectory.")
    if cfg.march_steps != model.config.march_steps:
        raise ConfigurationError(
            f"Train config uses k={cfg.march_steps}, the model was built with "
            f"k={model.config.march_steps}."
        )
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = AdamW.from_config(params, cfg)
    model.zero_grad()
    result = TrainResult(model)
    t_in = model.config.context_frames
    k = cfg.march_steps
    eval_horizon = max(k, (cfg.eval_horizon // k) * k)

    logger.info(
        f"Training ({cfg.mode.upper()}) for {cfg.iterations} iterations, batch {cfg.batch_size}, "
        f"max_lr {cfg.max_lr}, k={k}. Parameter census: {model.parameter_census()}"
    )
    metrics_stream, metrics_writer = _open_csv(metrics_path, METRICS_HEADER)
    eval_stream, eval_writer = _open_csv(eval_path, EVAL_HEADER)
    try:
        for it in range(cfg.iterations):
            active, pushforward_enabled = curriculum(it, cfg)
            use_pushforward = pushforward_enabled and it % 2 == 1
            length = t_in + (2 if use_pushforward else 1) * active
            lr = cyclic_lr(it, cfg)
            loss_fn = pushforward_loss if use_pushforward else step_loss

            total = 0.0
            try:
                for _ in range(cfg.batch_size):
                    window = sample_window(datasets, length, rng)
                    total += loss_fn(model, window, active, 1.0 / cfg.batch_size)
            except NumericalError as e:
                raise TrainingDivergenceError(f"Iteration {it}: {e}", iteration=it) from e
            loss = total / cfg.batch_size
            if not math.isfinite(loss):
                raise TrainingDivergenceError(f"Training loss became {loss} at iteration {it}.", iteration=it)

            if cfg.grad_clip > 0:
                clip_gradients(params, cfg.grad_clip)
            optimizer.step(lr)
            result.losses.append(loss)
            result.learning_rates.append(lr)
            if metrics_writer is not None:
                metrics_writer.writerow([it, repr(lr), repr(loss)])
                metrics_stream.flush()
            if it % 100 == 0:
                logger.info(f"iter {it}: lr={lr:.3e} loss={loss:.5e} k'={active} pushforward={use_pushforward}")

            if cfg.eval_every > 0 and (it + 1) % cfg.eval_every == 0:
                if eval_datasets:
                    report = evaluate_model(model, eval_datasets, eval_horizon)
                    for j, value in enumerate(report.mean):
                        result.eval_rows.append((it, j + 1, float(value)))
                        if eval_writer is not None:
                            eval_writer.writerow([it, j + 1, repr(float(value))])
                    if eval_stream is not None:
                        eval_stream.flush()
                if checkpoint_path is not None:
                    result.checkpoint = save_checkpoint(model, checkpoint_path)
    except TrainingDivergenceError as e:
        logger.error(f"Training diverged: {e}", exc_info=True)
        raise
    finally:
        for stream in (metrics_stream, eval_stream):
            if stream is not None:
                stream.close()

    if checkpoint_path is not None:
        result.checkpoint = save_checkpoint(model, checkpoint_path)
    if result.losses:
        logger.info(f"Training finished: first loss {result.losses[0]:.5e}, last loss {result.losses[-1]:.5e}.")
    return result
