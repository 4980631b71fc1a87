# core/data/advection.py

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.paths import ensure_output_dir
from utils.workers import run_tasks
from ..errors import ConfigurationError, ContractViolationError
from ..tensor import FieldTensor
from .field_file import TrajectoryDataset, write_field_file, write_manifest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralField:
    """
    [0, 2π)² 周期域上实场的傅里叶系数，使用 rfft2 布局 (S, S/2+1)。

    约定 u(x) = Σ_k û_k e^{ik·x}，即逆变换不做 1/N 缩放。
    """

    coefficients: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coefficients, dtype=np.complex128)
        if c.ndim != 2 or c.shape[1] != c.shape[0] // 2 + 1:
            raise ContractViolationError(f"Expected rfft2 layout (S, S/2+1), got {c.shape}.")
        if not np.all(np.isfinite(c)):
            raise ContractViolationError("Spectral coefficients must be finite.")
        object.__setattr__(self, "coefficients", c)

    @property
    def size(self) -> int:
        return self.coefficients.shape[0]

    def wavenumbers(self) -> Tuple[np.ndarray, np.ndarray]:
        s = self.size
        kx = np.fft.fftfreq(s, d=1.0 / s)[:, None]
        ky = np.fft.rfftfreq(s, d=1.0 / s)[None, :]
        return kx, ky

    def to_physical(self) -> np.ndarray:
        s = self.size
        return np.fft.irfft2(self.coefficients, s=(s, s), norm="forward")

    def to_full(self) -> np.ndarray:
        """用共轭对称补全为 (S, S) 的完整频谱。"""
        s = self.size
        half = s // 2 + 1
        full = np.zeros((s, s), dtype=np.complex128)
        full[:, :half] = self.coefficients
        cols = np.arange(half, s)
        rows = (-np.arange(s)) % s
        full[:, cols] = np.conj(self.coefficients[rows][:, s - cols])
        return full


def sample_initial(
    size: int, seed: int, alpha: float = 2.5, k_max: int = 8
) -> SpectralField:
    """
    高斯随机场初值: û_k = σ_k (a + ib)/√2，σ_k = (1 + |k|²)^(−α)。
    |k| > k_max 的模态、均值模态与 Nyquist 模态置零，然后做共轭对称化。
    """
    if size < 2 or size % 2 != 0:
        raise ConfigurationError(f"Grid size must be even, got {size}.")
    if not 0 <= k_max <= size // 2:
        raise ConfigurationError(f"k_max must lie in [0, {size // 2}], got {k_max}.")
    rng = np.random.default_rng(seed)
    k = np.fft.fftfreq(size, d=1.0 / size)
    kx, ky = k[:, None], k[None, :]
    k_sq = kx * kx + ky * ky
    sigma = (1.0 + k_sq) ** (-alpha)
    a = rng.standard_normal((size, size))
    b = rng.standard_normal((size, size))
    coeff = sigma * (a + 1j * b) / np.sqrt(2.0)
    coeff[k_sq > k_max * k_max] = 0.0
    coeff[0, 0] = 0.0
    coeff[size // 2, :] = 0.0
    coeff[:, size // 2] = 0.0
    mirrored = np.roll(np.flip(coeff, axis=(0, 1)), 1, axis=(0, 1))
    coeff = 0.5 * (coeff + np.conj(mirrored))
    return SpectralField(coeff[:, : size // 2 + 1])


def evolve_spectrum(
    u0: SpectralField, nu: float, velocity: Sequence[float], t: float
) -> SpectralField:
    """û_k(t) = û_k(0)·exp(−ν|k|²t − i(k·c)t)。"""
    if nu < 0 or t < 0:
        raise ContractViolationError(f"Need nu >= 0 and t >= 0, got nu={nu}, t={t}.")
    cx, cy = float(velocity[0]), float(velocity[1])
    kx, ky = u0.wavenumbers()
    factor = np.exp(-nu * (kx * kx + ky * ky) * t - 1j * (kx * cx + ky * cy) * t)
    return SpectralField(u0.coefficients * factor)


def exact_solution(
    u0: SpectralField, nu: float, velocity: Sequence[float], t: float
) -> FieldTensor:
    """u_t + c·∇u = ν∇²u 在周期方形域上的解析解 (单通道)。"""
    physical = evolve_spectrum(u0, nu, velocity, t).to_physical()
    return FieldTensor(physical[..., None])


@dataclass(frozen=True)
class DatasetConfig:
    grid_size: int = 32
    frames: int = 30
    dt: float = 0.05
    nu: float = 0.01
    velocity: Tuple[float, float] = (1.0, 0.5)
    alpha: float = 2.5
    k_max: int = 8
    n_train: int = 200
    n_test: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.frames < 1 or self.dt <= 0 or self.nu < 0:
            raise ConfigurationError("Dataset needs frames >= 1, dt > 0 and nu >= 0.")

    def manifest_settings(self) -> dict:
        return {
            "grid": str(self.grid_size),
            "frames": str(self.frames),
            "dt": repr(self.dt),
            "nu": repr(self.nu),
            "cx": repr(float(self.velocity[0])),
            "cy": repr(float(self.velocity[1])),
            "alpha": repr(self.alpha),
            "k_max": str(self.k_max),
        }


def generate_trajectory(cfg: DatasetConfig, seed: int) -> TrajectoryDataset:
    u0 = sample_initial(cfg.grid_size, seed, cfg.alpha, cfg.k_max)
    frames = [
        exact_solution(u0, cfg.nu, cfg.velocity, i * cfg.dt) for i in range(cfg.frames)
    ]
    metadata = cfg.manifest_settings()
    metadata["seed"] = str(seed)
    return TrajectoryDataset(frames, cfg.dt, metadata)


def trajectory_file_name(seed: int) -> str:
    return f"traj_{seed:05d}.ffld"


def generate_dataset(
    cfg: DatasetConfig,
    out_dir: Union[str, Path],
    seeds: Optional[Sequence[int]] = None,
    max_workers: Optional[int] = None,
) -> Path:
    """
    每个种子生成一条轨迹文件，帧时刻为 0, dt, …, (T−1)·dt，最后写入清单。
    返回清单路径。
    """
    target = ensure_output_dir(out_dir)
    seed_list: List[int] = list(seeds) if seeds is not None else list(
        range(cfg.seed, cfg.seed + cfg.n_train)
    )

    def build(seed: int) -> str:
        trajectory = generate_trajectory(cfg, seed)
        name = trajectory_file_name(seed)
        write_field_file(target / name, trajectory.frames)
        logger.info(f"Generated trajectory seed={seed} -> '{target / name}'.")
        return name

    names = run_tasks(build, seed_list, max_workers)
    manifest = write_manifest(target, cfg.manifest_settings(), list(zip(names, seed_list)))
    logger.info(f"Wrote {len(names)} trajectories and manifest '{manifest}'.")
    return manifest
