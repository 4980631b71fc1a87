# core/layers.py

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateStatisticsError,
)
from .tensor import FieldTensor

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], np.ndarray]

INSTANCE_NORM_EPS: float = 1e-5
ROPE_BASE: float = 10000.0
DEFAULT_MESH_WEIGHT: float = 64.0


@dataclass
class Param:
    """
    一个可学习参数: 数值、梯度累加器以及 AdamW 的两个动量槽。

    梯度在每次优化器更新之后被清零。
    """

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)
    m1: np.ndarray = field(init=False, repr=False)
    m2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m1 = np.zeros_like(self.value)
        self.m2 = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# Linear / MLP
# ---------------------------------------------------------------------------


class Linear:
    """y = x·W + b，W 形状为 (in, out)。偏置初始化为 0。"""

    def __init__(
        self,
        name: str,
        in_width: int,
        out_width: int,
        rng: np.random.Generator,
        bias: bool = True,
    ):
        self.weight = Param(f"{name}.weight", glorot_uniform(rng, in_width, out_width))
        self.bias: Optional[Param] = (
            Param(f"{name}.bias", np.zeros(out_width)) if bias else None
        )

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]

    def params(self) -> List[Param]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: np.ndarray) -> Tuple[np.ndarray, Backward]:
        return linear_fwd_bwd(x, self.weight, self.bias)


def linear_fwd_bwd(
    x: np.ndarray, weight: Param, bias: Optional[Param] = None
) -> Tuple[np.ndarray, Backward]:
    """
    前向 y = x·W (+ b)，返回 y 与反向闭包。

    反向闭包接收 grad_y，返回 grad_x = grad_y·Wᵀ，
    同时把 xᵀ·grad_y 累加进 W 的梯度 (以及 grad_y 的列和进偏置梯度)。
    x 可以有任意多个前导维，最后一维是输入宽度。
    """
    x = np.asarray(x, dtype=np.float64)
    w = weight.value
    if x.shape[-1] != w.shape[0]:
        raise ContractViolationError(
            f"Linear '{weight.name}' expects input width {w.shape[0]}, got {x.shape[-1]}."
        )
    y = x @ w
    if bias is not None:
        y = y + bias.value

    def backward(grad_y: np.ndarray) -> np.ndarray:
        if grad_y.shape != y.shape:
            raise ContractViolationError(
                f"Linear '{weight.name}' backward got gradient shape {grad_y.shape}, "
                f"expected {y.shape}."
            )
        x2 = x.reshape(-1, w.shape[0])
        g2 = grad_y.reshape(-1, w.shape[1])
        weight.grad += x2.T @ g2
        if bias is not None:
            bias.grad += g2.sum(axis=0)
        return grad_y @ w.T

    return y, backward


def gelu(x: np.ndarray) -> np.ndarray:
    """精确 (erf) 版本的 GELU。"""
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


class Mlp:
    """三层感知机: Linear → GELU → Linear → GELU → Linear。"""

    def __init__(self, name: str, widths: Sequence[int], rng: np.random.Generator):
        if len(widths) != 4:
            raise ConfigurationError(
                f"Mlp '{name}' needs four widths (in, hidden, hidden, out), got {list(widths)}."
            )
        self.layers = [
            Linear(f"{name}.{i}", widths[i], widths[i + 1], rng) for i in range(3)
        ]

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    @property
    def last(self) -> Linear:
        return self.layers[-1]

    def params(self) -> List[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, x: np.ndarray) -> Tuple[np.ndarray, Backward]:
        return mlp_fwd_bwd(x, self)


def mlp_fwd_bwd(x: np.ndarray, mlp: Mlp) -> Tuple[np.ndarray, Backward]:
    first, second, third = mlp.layers
    h1, back1 = first(x)
    h2, back2 = second(gelu(h1))
    y, back3 = third(gelu(h2))

    def backward(grad_y: np.ndarray) -> np.ndarray:
        g = back3(grad_y) * gelu_grad(h2)
        g = back2(g) * gelu_grad(h1)
        return back1(g)

    return y, backward


# ---------------------------------------------------------------------------
# Instance normalization
# ---------------------------------------------------------------------------


def instance_norm_array(
    x: np.ndarray, axes: Tuple[int, ...], eps: float = INSTANCE_NORM_EPS
) -> Tuple[np.ndarray, Backward]:
    """
    沿 `axes` 对每个通道做归一化 (有偏方差，无仿射参数)。
    """
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise DegenerateStatisticsError(
            f"Instance normalization needs at least 2 positions, got {count}."
        )
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std

    def backward(grad_y: np.ndarray) -> np.ndarray:
        g_mean = grad_y.mean(axis=axes, keepdims=True)
        gx_mean = (grad_y * x_hat).mean(axis=axes, keepdims=True)
        return inv_std * (grad_y - g_mean - x_hat * gx_mean)

    return x_hat, backward


def instance_norm_fwd_bwd(
    t: FieldTensor, eps: float = INSTANCE_NORM_EPS
) -> Tuple[FieldTensor, Backward]:
    """每个通道在全部空间位置上归一化为均值 0、方差 1。"""
    out, backward = instance_norm_array(t.data, tuple(range(t.n_spatial)), eps)
    return FieldTensor(out), backward


# ---------------------------------------------------------------------------
# Rotary position encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RopeTable:
    """
    旋转位置编码的频率表: θ_l = 10000^(−2(l−1)/d)，l = 1..d/2。
    mesh_weight 即 λ，把 [0, 1] 坐标放大到合适的旋转波长。
    """

    head_dim: int
    mesh_weight: float = DEFAULT_MESH_WEIGHT

    def __post_init__(self) -> None:
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ConfigurationError(
                f"Rotary encoding needs an even positive head width, got {self.head_dim}."
            )
        if self.mesh_weight <= 0:
            raise ConfigurationError(
                f"Rotary mesh weight must be positive, got {self.mesh_weight}."
            )

    @property
    def theta(self) -> np.ndarray:
        exponents = -2.0 * np.arange(self.head_dim // 2, dtype=np.float64) / self.head_dim
        return ROPE_BASE**exponents


def rope_encode(
    q: np.ndarray, coords: np.ndarray, table: RopeTable
) -> Tuple[np.ndarray, Backward]:
    """
    对每一行做成对旋转: (a, b) ↦ (a·cos φ − b·sin φ, a·sin φ + b·cos φ)，
    φ = λ·x_i·θ_l。q 的形状为 (..., S, d)，coords 的形状为 (S,)。

    旋转是正交的，所以反向就是用逆旋转作用于梯度。
    """
    q = np.asarray(q, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if q.shape[-1] != table.head_dim:
        raise ContractViolationError(
            f"Rotary table is for width {table.head_dim}, got rows of width {q.shape[-1]}."
        )
    if coords.ndim != 1 or q.shape[-2] != coords.shape[0]:
        raise ContractViolationError(
            f"Rotary encoding got {coords.shape} coordinates for {q.shape[-2]} rows."
        )
    angles = table.mesh_weight * coords[:, None] * table.theta[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    a, b = q[..., 0::2], q[..., 1::2]
    out = np.empty_like(q)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos

    def backward(grad_y: np.ndarray) -> np.ndarray:
        ge, go = grad_y[..., 0::2], grad_y[..., 1::2]
        grad = np.empty_like(grad_y)
        grad[..., 0::2] = ge * cos + go * sin
        grad[..., 1::2] = go * cos - ge * sin
        return grad

    return out, backward


# ---------------------------------------------------------------------------
# Random Fourier feature positional encoding
# ---------------------------------------------------------------------------


class RffEncoder:
    """
    ψ(x) = [cos(Bx); sin(Bx)]·W_out。

    B 从 N(0, σ²) 中采样一次之后冻结，只有 W_out 可学习。
    """

    def __init__(
        self,
        name: str,
        n_dims: int,
        width: int,
        rng: np.random.Generator,
        scale: float = 1.0,
        n_freq: Optional[int] = None,
    ):
        n_freq = n_freq if n_freq is not None else max(1, width // 2)
        frequencies = rng.normal(0.0, scale, size=(n_freq, n_dims))
        frequencies.flags.writeable = False
        self.frequencies = frequencies
        self.weight = Param(f"{name}.weight", glorot_uniform(rng, 2 * n_freq, width))

    @property
    def n_dims(self) -> int:
        return self.frequencies.shape[1]

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    def params(self) -> List[Param]:
        return [self.weight]

    def features(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[-1] != self.n_dims:
            raise ContractViolationError(
                f"Fourier features expect {self.n_dims}-d coordinates, got {coords.shape[-1]}."
            )
        proj = coords @ self.frequencies.T
        return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


def rff_positional(
    coords: np.ndarray, enc: RffEncoder
) -> Tuple[np.ndarray, Callable[[np.ndarray], None]]:
    """返回每个点的 d 维位置编码；反向只更新 W_out，B 不接收梯度。"""
    psi, back = linear_fwd_bwd(enc.features(coords), enc.weight)

    def backward(grad_psi: np.ndarray) -> None:
        back(grad_psi)

    return psi, backward
