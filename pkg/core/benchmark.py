# core/benchmark.py

import csv
import logging
import platform
import statistics
import time
import tracemalloc
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from utils.counters import op_counter
from .attention import (
    DEFAULT_MEMORY_BUDGET,
    AttentionLayerParams,
    LinearAttentionParams,
    attention_update,
    compute_axial_kernels,
    factorized_attention,
    flatten_field,
    full_kernel_matrix,
    linear_attention,
)
from .errors import ConfigurationError, ContractViolationError, ResourceBudgetError
from .layers import INSTANCE_NORM_EPS, Mlp, instance_norm_array
from .tensor import FieldTensor

logger = logging.getLogger(__name__)

BENCHMARK_HEADER = (
    "mechanism",
    "grid",
    "d_k",
    "enc_time",
    "fwd_bwd_time",
    "peak_bytes",
    "mul_add_count",
)
MECHANISMS = ("factorized", "linear")
MIN_WARMUP = 3


@dataclass(frozen=True)
class BenchmarkSettings:
    grids: Sequence[int] = (64,)
    kernel_dims: Sequence[int] = (64,)
    heads: Sequence[int] = (4,)
    width: int = 64
    n_dims: int = 2
    reps: int = 10
    warmup: int = MIN_WARMUP
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    seed: int = 0
    mechanisms: Sequence[str] = MECHANISMS

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ConfigurationError(f"reps must be >= 1, got {self.reps}.")
        if self.warmup < MIN_WARMUP:
            raise ConfigurationError(f"At least {MIN_WARMUP} warm-up runs are required.")
        unknown = set(self.mechanisms) - set(MECHANISMS)
        if unknown:
            raise ConfigurationError(f"Unknown benchmark mechanisms: {sorted(unknown)}.")


@dataclass(frozen=True)
class BenchmarkRow:
    mechanism: str
    grid: int
    d_k: int
    enc_time: float
    fwd_bwd_time: float
    peak_bytes: int
    mul_add_count: int

    def as_csv_row(self) -> List[str]:
        return [
            self.mechanism,
            str(self.grid),
            str(self.d_k),
            f"{self.enc_time:.6e}",
            f"{self.fwd_bwd_time:.6e}",
            str(self.peak_bytes),
            str(self.mul_add_count),
        ]


def median_time(fn: Callable[[], object], reps: int, warmup: int = MIN_WARMUP) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        began = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - began)
    return statistics.median(samples)


def peak_allocation(fn: Callable[[], object]) -> int:
    """用 tracemalloc 统计一次调用期间的峰值分配字节数。"""
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def forward_mul_adds(fn: Callable[[], object]) -> int:
    with op_counter.measuring() as counts:
        fn()
    return sum(v for k, v in counts.items() if not k.endswith("_backward"))


# ---------------------------------------------------------------------------
# Per-mechanism workloads
# ---------------------------------------------------------------------------


def _factorized_workload(
    u: FieldTensor, width: int, heads: int, d_k: int, n_dims: int, rng: np.random.Generator
) -> Tuple[Callable[[], object], Callable[[], object], Callable[[], object]]:
    params = AttentionLayerParams("bench.factorized", n_dims, width, heads, d_k, rng)
    grad = rng.standard_normal(u.shape)

    def forward() -> object:
        return attention_update(u, params)[0]

    def forward_backward() -> object:
        _, back = attention_update(u, params)
        result = back(grad)
        for p in params.params():
            p.zero_grad()
        return result

    def attention_only() -> object:
        return factorized_attention(u, params)[0]

    return forward, forward_backward, attention_only


def _linear_workload(
    u: FieldTensor,
    width: int,
    heads: int,
    d_k: int,
    n_dims: int,
    rng: np.random.Generator,
    memory_budget: int,
) -> Tuple[Callable[[], object], Callable[[], object], Callable[[], object]]:
    params = LinearAttentionParams("bench.linear", n_dims, width, heads, d_k, rng)
    ffn = Mlp("bench.linear.ffn", (width, width, width, width), rng)
    points, coords = flatten_field(u)
    grad = rng.standard_normal(points.shape)

    def update() -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        z, back_att = linear_attention(points, coords, params, memory_budget=memory_budget)
        z_n, back_norm = instance_norm_array(z, (0,), INSTANCE_NORM_EPS)
        f, back_f = ffn(z_n)
        return f, lambda g: back_att(back_norm(back_f(g)))

    def forward() -> object:
        return update()[0]

    def forward_backward() -> object:
        _, back = update()
        result = back(grad)
        for p in params.params() + ffn.params():
            p.zero_grad()
        return result

    def attention_only() -> object:
        return linear_attention(points, coords, params, memory_budget=memory_budget)[0]

    return forward, forward_backward, attention_only


def _factorized_fits(size: int, width: int, heads: int, n_dims: int, budget: int) -> bool:
    n_points = size ** n_dims
    needed = 8 * n_points * width * (2 * n_dims + 8) + 8 * heads * n_dims * size * size
    return needed <= budget


def benchmark_attention(settings: BenchmarkSettings) -> List[BenchmarkRow]:
    """
    对每个 (网格, d_k, head 数, 机制) 组合测量:
    enc_time = 注意力层 + 逐点 MLP 的前向中位时间，
    fwd_bwd_time = 同一块的前向 + 反向中位时间，
    peak_bytes = 一次前向 + 反向的峰值分配，
    mul_add_count = 注意力算子一次前向的乘加计数。
    超出预算或不合法的组合记录原因后跳过。
    """
    rows: List[BenchmarkRow] = []
    multi_head = len(settings.heads) > 1
    for size in settings.grids:
        for d_k in settings.kernel_dims:
            for heads in settings.heads:
                rng = np.random.default_rng(settings.seed)
                shape = (size,) * settings.n_dims + (settings.width,)
                u = FieldTensor(rng.standard_normal(shape))
                for mechanism in settings.mechanisms:
                    label = f"{mechanism}@h{heads}" if multi_head else mechanism
                    try:
                        if mechanism == "factorized":
                            if not _factorized_fits(
                                size, settings.width, heads, settings.n_dims, settings.memory_budget
                            ):
                                raise ResourceBudgetError(
                                    f"grid {size} exceeds the memory budget of {settings.memory_budget} bytes"
                                )
                            workload = _factorized_workload(
                                u, settings.width, heads, d_k, settings.n_dims, rng
                            )
                        else:
                            workload = _linear_workload(
                                u, settings.width, heads, d_k, settings.n_dims, rng,
                                settings.memory_budget,
                            )
                        forward, forward_backward, attention_only = workload
                        mul_adds = forward_mul_adds(attention_only)
                        enc_time = median_time(forward, settings.reps, settings.warmup)
                        fwd_bwd_time = median_time(forward_backward, settings.reps, settings.warmup)
                        peak = peak_allocation(forward_backward)
                    except (ResourceBudgetError, ConfigurationError) as e:
                        logger.warning(
                            f"Skipping {label} at grid {size}, d_k {d_k}: {e}"
                        )
                        continue
                    row = BenchmarkRow(label, size, d_k, enc_time, fwd_bwd_time, peak, mul_adds)
                    logger.info(
                        f"{label} grid={size} d_k={d_k}: enc {enc_time:.4e}s, "
                        f"fwd+bwd {fwd_bwd_time:.4e}s, peak {peak} B, mul-adds {mul_adds}."
                    )
                    rows.append(row)
    return rows


def write_benchmark_csv(rows: Sequence[BenchmarkRow], stream: TextIO) -> None:
    stream.write(
        f"# machine={platform.machine()} processor={platform.processor() or 'unknown'} "
        f"python={platform.python_version()} numpy={np.__version__}\n"
    )
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(BENCHMARK_HEADER)
    for row in rows:
        writer.writerow(row.as_csv_row())


# ---------------------------------------------------------------------------
# Scaling with the axial extent
# ---------------------------------------------------------------------------


def kernel_construction_time(
    size: int, kernel_dim: int, heads: int = 4, width: int = 64, reps: int = 10, seed: int = 0
) -> float:
    """S×S 网格上构造全部轴向核的中位时间。"""
    rng = np.random.default_rng(seed)
    params = AttentionLayerParams("scaling.factorized", 2, width, heads, kernel_dim, rng)
    u = FieldTensor(rng.standard_normal((size, size, width)))
    return median_time(lambda: compute_axial_kernels(u, params), reps)


def full_kernel_time(
    size: int, kernel_dim: int, heads: int = 4, width: int = 64, reps: int = 10, seed: int = 0
) -> float:
    """S×S 网格上物化一个 head 的 N×N 核的中位时间。"""
    rng = np.random.default_rng(seed)
    params = LinearAttentionParams("scaling.full", 2, width, heads, kernel_dim, rng)
    points, coords = flatten_field(FieldTensor(rng.standard_normal((size, size, width))))
    return median_time(lambda: full_kernel_matrix(points, coords, params), reps)


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys) or len(xs) < 2:
        raise ContractViolationError("A log-log fit needs at least two paired samples.")
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=np.float64)), np.log(np.asarray(ys, dtype=np.float64)), 1)
    return float(slope)


def scaling_exponents(
    sizes: Sequence[int],
    full_sizes: Optional[Sequence[int]] = None,
    kernel_dim: int = 16,
    reps: int = 10,
) -> Tuple[float, Optional[float]]:
    """返回 (轴向核构造时间对 S 的指数, 完整核物化时间对 S 的指数)。"""
    fact = [kernel_construction_time(s, kernel_dim, reps=reps) for s in sizes]
    fact_slope = fit_loglog_slope(sizes, fact)
    full_slope = None
    if full_sizes:
        full = [full_kernel_time(s, kernel_dim, reps=reps) for s in full_sizes]
        full_slope = fit_loglog_slope(full_sizes, full)
    logger.info(f"Scaling exponents: factorized {fact_slope:.3f}, full {full_slope}.")
    return fact_slope, full_slope
