# core/evaluation.py

import csv
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Sequence, TextIO, Tuple

import numpy as np

from .data.field_file import TrajectoryDataset
from .errors import ContractViolationError, NumericalError
from .model import FactFormerModel
from .tensor import FieldTensor, relative_l2

logger = logging.getLogger(__name__)

RolloutFn = Callable[[Sequence[FieldTensor], int], List[FieldTensor]]

EVAL_HEADER = ("frame", "mean_rel_l2", "stddev", "persistence_rel_l2")


@dataclass
class RolloutReport:
    """逐帧误差统计。errors 的形状为 (轨迹数, horizon)。"""

    errors: np.ndarray
    persistence: np.ndarray
    seconds_per_sequence: float

    @property
    def horizon(self) -> int:
        return int(self.errors.shape[1])

    @property
    def mean(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def stddev(self) -> np.ndarray:
        return self.errors.std(axis=0)

    @property
    def persistence_mean(self) -> np.ndarray:
        return self.persistence.mean(axis=0)

    @property
    def avg_rel_l2(self) -> float:
        return float(self.mean.mean())

    @property
    def final_rel_l2(self) -> float:
        return float(self.mean[-1])

    def write_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        mean, std, base = self.mean, self.stddev, self.persistence_mean
        for j in range(self.horizon):
            writer.writerow([j + 1, repr(float(mean[j])), repr(float(std[j])), repr(float(base[j]))])
        stream.write(
            f"# avg_rel_l2={self.avg_rel_l2!r},final_rel_l2={self.final_rel_l2!r},"
            f"seconds_per_sequence={self.seconds_per_sequence!r}\n"
        )


def evaluate_rollouts(
    rollout_fn: RolloutFn,
    datasets: Sequence[TrajectoryDataset],
    context_frames: int,
    horizon: int,
    start: int = 0,
) -> RolloutReport:
    """
    对每条轨迹从 start 处取 context_frames 帧作为上下文，展开 horizon 帧，
    同时计算"重复最后一帧"的持久性基线误差。
    """
    if not datasets:
        raise ContractViolationError("Evaluation needs at least one trajectory.")
    need = start + context_frames + horizon
    errors = np.zeros((len(datasets), horizon))
    persistence = np.zeros((len(datasets), horizon))
    elapsed = 0.0
    for i, trajectory in enumerate(datasets):
        if len(trajectory) < need:
            raise ContractViolationError(
                f"Trajectory {i} has {len(trajectory)} frames, evaluation needs {need}."
            )
        context = trajectory.window(start, context_frames)
        truth = trajectory.window(start + context_frames, horizon)
        began = time.perf_counter()
        predictions = rollout_fn(context, horizon)
        elapsed += time.perf_counter() - began
        if len(predictions) != horizon:
            raise ContractViolationError(
                f"Rollout returned {len(predictions)} frames, expected {horizon}."
            )
        for j in range(horizon):
            errors[i, j] = relative_l2(predictions[j], truth[j])
            persistence[i, j] = relative_l2(context[-1], truth[j])
    if not np.all(np.isfinite(errors)):
        raise NumericalError("Rollout produced non-finite errors.", residual=float("nan"))

    report = RolloutReport(errors, persistence, elapsed / len(datasets))
    logger.info(
        f"Evaluated {len(datasets)} rollouts of {horizon} frames: "
        f"avg_rel_l2={report.avg_rel_l2:.4e}, final_rel_l2={report.final_rel_l2:.4e}, "
        f"persistence_final={float(report.persistence_mean[-1]):.4e}."
    )
    return report


def evaluate_model(
    model: FactFormerModel,
    datasets: Sequence[TrajectoryDataset],
    horizon: int,
    start: int = 0,
) -> RolloutReport:
    k = model.config.march_steps
    if horizon < 1 or horizon % k != 0:
        raise ContractViolationError(
            f"Evaluation horizon {horizon} must be a positive multiple of k={k}."
        )
    report = evaluate_rollouts(model.rollout, datasets, model.config.context_frames, horizon, start)
    timing_split(model, datasets[0].window(start, model.config.context_frames))
    return report


def timing_split(model: FactFormerModel, frames: Sequence[FieldTensor]) -> Tuple[float, float]:
    """一次 forward 中 (编码器 + 注意力层) 与 (潜在推进 + 解码器) 各自的耗时，单位秒。"""
    began = time.perf_counter()
    z = model.latent(frames)
    encoded = time.perf_counter()
    for j in range(model.config.march_steps):
        z, _ = model.latent_march(z, j)
        model.decoder(z.data)
    finished = time.perf_counter()
    enc_time, propagate_time = encoded - began, finished - encoded
    logger.info(
        f"Forward timing split: encoder {enc_time:.4e}s, "
        f"propagator + decoder {propagate_time:.4e}s."
    )
    return enc_time, propagate_time
