# core/spectrum.py

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from utils.paths import require_readable
from utils.workers import run_tasks
from .attention import KERNEL_DUMP_HEADER, LinearAttentionParams, flatten_field, full_kernel_matrix
from .data.field_file import TrajectoryDataset
from .errors import (
    ContractViolationError,
    FormatError,
    NumericalError,
    ResourceBudgetError,
    TruncatedFileError,
)
from .model import FactFormerModel
from .tensor import Matrix

logger = logging.getLogger(__name__)

JACOBI_MAX_DIM: int = 512
JACOBI_MAX_SWEEPS: int = 60
POWER_ITERATIONS: int = 10
OVERSAMPLING: int = 8
FULL_KERNEL_MAX_POINTS: int = 4096
ENERGY_LEVEL: float = 0.9
# Jacobi 对零空间列留下的舍入噪声远高于 eps·σ_max
RANK_RTOL: float = 1e-10

SPECTRUM_HEADER = ("layer", "axis", "k", "b_k", "k90", "truncated")


@dataclass
class SpectrumReport:
    """
    一个 (或一组平均后的) 注意力矩阵的奇异值谱。

    cumulative[k-1] = Σ_{i≤k} σ_i / Σ_i σ_i；k90 是 cumulative 首次达到 0.9 的
    1-based 下标，退化 (全零) 矩阵记为 0。
    """

    layer: int
    axis: str
    head: Optional[int]
    singular_values: np.ndarray
    cumulative: np.ndarray
    k90: int
    truncated: bool
    rank: int

    @classmethod
    def from_singular_values(
        cls,
        sigma: np.ndarray,
        layer: int = 0,
        axis: str = "0",
        head: Optional[int] = None,
        truncated: bool = False,
    ) -> "SpectrumReport":
        sigma = np.sort(np.abs(np.asarray(sigma, dtype=np.float64)))[::-1]
        cumulative, k90 = cumulative_energy(sigma)
        return cls(layer, axis, head, sigma, cumulative, k90, truncated, numerical_rank(sigma))


def cumulative_energy(sigma: np.ndarray) -> Tuple[np.ndarray, int]:
    running = np.cumsum(sigma)
    if running.size == 0 or running[-1] <= 0.0:
        return np.zeros_like(sigma), 0
    cumulative = running / running[-1]
    return cumulative, int(np.argmax(cumulative >= ENERGY_LEVEL)) + 1


def numerical_rank(sigma: np.ndarray) -> int:
    if sigma.size == 0 or sigma[0] <= 0.0:
        return 0
    return int(np.sum(sigma > RANK_RTOL * sigma[0]))


# ---------------------------------------------------------------------------
# Singular values
# ---------------------------------------------------------------------------


def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """n (偶数) 个列的循环赛配对，每轮 n/2 对互不相交。"""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        left = np.array([players[i] for i in range(n // 2)])
        right = np.array([players[n - 1 - i] for i in range(n // 2)])
        rounds.append((left, right))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_singular_values(a: np.ndarray) -> np.ndarray:
    """
    单边 Jacobi (Hestenes) 迭代: 反复旋转列对直到两两正交，
    奇异值即列范数。每轮同时处理互不相交的列对。
    """
    work = np.array(a, dtype=np.float64)
    if work.shape[1] > work.shape[0]:
        work = work.T.copy()
    n_cols = work.shape[1]
    if n_cols % 2 == 1:
        work = np.concatenate([work, np.zeros((work.shape[0], 1))], axis=1)
    rounds = _round_robin(work.shape[1]) if work.shape[1] > 1 else []
    tol = max(work.shape[0], 32) * np.finfo(np.float64).eps

    off = 0.0
    for sweep in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for left, right in rounds:
            ap, aq = work[:, left], work[:, right]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            rotate = (np.abs(gamma) > tol * scale) & (scale > 0)
            if not np.any(rotate):
                continue
            off = max(off, float(np.max(np.abs(gamma[rotate]) / scale[rotate])))
            safe_gamma = np.where(rotate, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(rotate, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(rotate, c * t, 0.0)
            work[:, left] = c * ap - s * aq
            work[:, right] = s * ap + c * aq
        if off <= tol:
            logger.debug(f"Jacobi SVD converged after {sweep + 1} sweeps.")
            break
    else:
        raise NumericalError(
            f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps.", residual=off
        )
    sigma = np.linalg.norm(work, axis=0)[:n_cols]
    return np.sort(sigma)[::-1]


def randomized_singular_values(
    a: np.ndarray, rank: int, seed: int = 0
) -> np.ndarray:
    """随机范围探测 + 幂迭代 (每次用 QR 重新正交化)，再对小矩阵做 Jacobi。"""
    rows, cols = a.shape
    width = min(rank + OVERSAMPLING, rows, cols)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(a @ rng.standard_normal((cols, width)))
    for _ in range(POWER_ITERATIONS):
        z, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ z)
    return jacobi_singular_values(q.T @ a)[:rank]


def svd_spectrum(
    a: Union[Matrix, np.ndarray],
    truncate: Optional[int] = None,
    layer: int = 0,
    axis: str = "0",
    head: Optional[int] = None,
) -> SpectrumReport:
    """
    完整模式用 Jacobi 求全部奇异值；截断模式只求前 r 个，
    b_k 用截断后的能量和归一化。
    """
    arr = a.data if isinstance(a, Matrix) else np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolationError(f"svd_spectrum needs a matrix, got shape {arr.shape}.")
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError("svd_spectrum needs a finite matrix.")
    smallest = min(arr.shape)
    if truncate is not None:
        if not 1 <= truncate <= smallest:
            raise ContractViolationError(f"Truncation rank {truncate} must lie in [1, {smallest}].")
        sigma = randomized_singular_values(arr, truncate)
        return SpectrumReport.from_singular_values(sigma, layer, axis, head, True)
    if smallest > JACOBI_MAX_DIM:
        raise ResourceBudgetError(
            f"Full SVD is limited to {JACOBI_MAX_DIM} columns, matrix is {arr.shape}; use truncation."
        )
    sigma = jacobi_singular_values(arr)
    return SpectrumReport.from_singular_values(sigma, layer, axis, head, False)


def average_reports(reports: Sequence[SpectrumReport]) -> SpectrumReport:
    """对同一 (layer, axis) 的多个报告按 k 平均 b_k，并重新计算 k90。"""
    if not reports:
        raise ContractViolationError("Cannot average an empty report set.")
    first = reports[0]
    cumulative = np.mean(np.stack([r.cumulative for r in reports]), axis=0)
    sigma = np.mean(np.stack([r.singular_values for r in reports]), axis=0)
    hits = np.nonzero(cumulative >= ENERGY_LEVEL)[0]
    k90 = int(hits[0]) + 1 if hits.size else 0
    return SpectrumReport(
        first.layer,
        first.axis,
        first.head if len(reports) == 1 else None,
        sigma,
        cumulative,
        k90,
        any(r.truncated for r in reports),
        max(r.rank for r in reports),
    )


# ---------------------------------------------------------------------------
# Sweep over a model
# ---------------------------------------------------------------------------


def attention_spectrum_sweep(
    model: FactFormerModel,
    datasets: Sequence[TrajectoryDataset],
    samples: int,
    include_full: bool = False,
    truncate: int = 64,
    max_workers: Optional[int] = None,
) -> List[SpectrumReport]:
    """
    对 samples 个上下文窗口逐层计算轴向核的谱，在 head 与样本上平均。
    include_full 时还会对同一层输入物化线性注意力的完整核并做截断分析。
    """
    if samples < 1 or not datasets:
        raise ContractViolationError("Spectrum sweep needs at least one sample and one trajectory.")
    cfg = model.config
    n_points = int(np.prod(cfg.grid))
    if include_full and n_points > FULL_KERNEL_MAX_POINTS:
        raise ResourceBudgetError(
            f"Full-kernel spectra are limited to {FULL_KERNEL_MAX_POINTS} points, grid has {n_points}."
        )

    jobs: List[Tuple[Tuple[int, str], np.ndarray, Optional[int]]] = []
    baselines = _baseline_layers(model) if include_full else []
    for s in range(samples):
        trajectory = datasets[s % len(datasets)]
        start = s // len(datasets)
        frames = trajectory.window(start, cfg.context_frames)
        for layer, (z_in, kernels) in enumerate(model.trace_layers(frames)):
            for m in range(kernels.n_axes):
                for h in range(kernels.n_heads):
                    jobs.append(((layer, str(m)), kernels.matrices[m][h], None))
            if include_full:
                points, coords = flatten_field(z_in)
                for h in range(baselines[layer].heads):
                    kernel = full_kernel_matrix(points, coords, baselines[layer], head=h)
                    jobs.append(((layer, "full"), kernel.data, min(truncate, n_points)))

    def analyse(job: Tuple[Tuple[int, str], np.ndarray, Optional[int]]) -> SpectrumReport:
        (layer, axis), matrix, rank = job
        return svd_spectrum(matrix, rank, layer=layer, axis=axis)

    reports = run_tasks(analyse, jobs, max_workers)
    grouped: Dict[Tuple[int, str], List[SpectrumReport]] = {}
    for (key, _, _), report in zip(jobs, reports):
        grouped.setdefault(key, []).append(report)

    averaged = [average_reports(group) for group in grouped.values()]
    for report in averaged:
        if report.axis != "full" and report.rank > cfg.kernel_dim:
            logger.warning(
                f"Layer {report.layer} axis {report.axis}: rank {report.rank} exceeds kernel_dim {cfg.kernel_dim}."
            )
        size = len(report.cumulative)
        if report.axis != "full" and 0 < report.k90 < 0.05 * size:
            logger.info(
                f"Layer {report.layer} axis {report.axis}: {report.k90} of {size} singular values "
                f"hold 90% of the energy."
            )
    logger.info(f"Spectrum sweep analysed {len(jobs)} matrices into {len(averaged)} reports.")
    return averaged


def _baseline_layers(model: FactFormerModel) -> List[LinearAttentionParams]:
    cfg = model.config
    block = 2 * cfg.n_dims
    kernel_dim = ((cfg.kernel_dim + block - 1) // block) * block
    logger.warning(
        f"Full-kernel spectra use untrained linear-attention baselines seeded with {cfg.seed}, "
        f"not weights from the checkpoint."
    )
    rng = np.random.default_rng(cfg.seed)
    return [
        LinearAttentionParams(
            f"baseline.{i}", cfg.n_dims, cfg.hidden_dim, cfg.heads, kernel_dim, rng, cfg.rope_lambda
        )
        for i in range(cfg.depth)
    ]


def write_spectrum_csv(reports: Sequence[SpectrumReport], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SPECTRUM_HEADER)
    for report in reports:
        for k, b in enumerate(report.cumulative, start=1):
            writer.writerow(
                [report.layer, report.axis, k, repr(float(b)), report.k90, int(report.truncated)]
            )


def load_kernel_dump(path: Union[str, Path]) -> Tuple[int, int, Matrix]:
    """读取核导出文件，返回 (axis, head, A)。"""
    with open(require_readable(path), "rb") as f:
        blob = f.read()
    if len(blob) < KERNEL_DUMP_HEADER.size:
        raise TruncatedFileError(f"Kernel dump '{path}' is shorter than its header.")
    axis, head, size = KERNEL_DUMP_HEADER.unpack_from(blob, 0)
    expected = KERNEL_DUMP_HEADER.size + 8 * size * size
    if len(blob) < expected:
        raise TruncatedFileError(f"Kernel dump '{path}' has {len(blob)} bytes, needs {expected}.")
    if len(blob) > expected:
        raise FormatError(f"Kernel dump '{path}' has {len(blob) - expected} trailing bytes.")
    data = np.frombuffer(blob, dtype="<f8", offset=KERNEL_DUMP_HEADER.size).reshape(size, size)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"Kernel dump '{path}' holds non-finite values.")
    return axis, head, Matrix(data.astype(np.float64))
