# core/attention.py

import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.counters import op_counter
from utils.paths import ensure_output_dir
from .errors import (
    ConfigurationError,
    ContractViolationError,
    OracleScaleError,
    ResourceBudgetError,
)
from .layers import (
    Backward,
    DEFAULT_MESH_WEIGHT,
    INSTANCE_NORM_EPS,
    Linear,
    Mlp,
    Param,
    RopeTable,
    glorot_uniform,
    instance_norm_array,
    instance_norm_fwd_bwd,
    rope_encode,
)
from .tensor import (
    FieldTensor,
    Matrix,
    axis_coordinates,
    grid_points,
    mode_product_array,
    pooled_axes,
)

logger = logging.getLogger(__name__)

ORACLE_MAX_POINTS: int = 10_000
DEFAULT_MEMORY_BUDGET: int = 1 << 30  # bytes
KERNEL_DUMP_HEADER = struct.Struct("<III")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class AxialProjector:
    """
    每个空间轴一对 (γ, h): γ 是逐点线性层，h 是逐点三层 MLP。
    G^(m)(u) = h(mean_{其余轴}(γ(u)))。
    """

    def __init__(self, name: str, n_axes: int, width: int, rng: np.random.Generator):
        self.gammas: List[Linear] = []
        self.heads: List[Mlp] = []
        for m in range(n_axes):
            self.gammas.append(Linear(f"{name}.gamma.{m}", width, width, rng))
            self.heads.append(Mlp(f"{name}.h.{m}", (width, width, width, width), rng))

    @property
    def n_axes(self) -> int:
        return len(self.gammas)

    def params(self) -> List[Param]:
        out: List[Param] = []
        for gamma, h in zip(self.gammas, self.heads):
            out.extend(gamma.params())
            out.extend(h.params())
        return out


@dataclass
class AxialKernelSet:
    """
    每个轴、每个 head 的核矩阵 A^(m,h) (S_m × S_m)，以及求积权重 w_m。

    queries/keys 保存的是旋转编码之后的 Q̃、K̃，供分析与测试使用；
    由外部矩阵直接构造时它们为空。
    """

    matrices: List[List[np.ndarray]]
    weights: List[float]
    queries: List[List[np.ndarray]] = field(default_factory=list)
    keys: List[List[np.ndarray]] = field(default_factory=list)

    @classmethod
    def from_matrices(
        cls, matrices: Sequence[Sequence[Union[np.ndarray, Matrix]]]
    ) -> "AxialKernelSet":
        mats = [
            [np.asarray(a.data if isinstance(a, Matrix) else a, dtype=np.float64) for a in per_axis]
            for per_axis in matrices
        ]
        for m, per_axis in enumerate(mats):
            for a in per_axis:
                if a.ndim != 2 or a.shape[0] != a.shape[1]:
                    raise ContractViolationError(
                        f"Axial kernel for axis {m} must be square, got {a.shape}."
                    )
        return cls(mats, [1.0 / per_axis[0].shape[0] for per_axis in mats])

    @classmethod
    def identity(cls, spatial_shape: Sequence[int], heads: int) -> "AxialKernelSet":
        return cls.from_matrices([[np.eye(s) for _ in range(heads)] for s in spatial_shape])

    @property
    def n_axes(self) -> int:
        return len(self.matrices)

    @property
    def n_heads(self) -> int:
        return len(self.matrices[0]) if self.matrices else 0

    def matrix(self, axis: int, head: int) -> Matrix:
        return Matrix(self.matrices[axis][head])

    def for_head(self, head: int) -> List[np.ndarray]:
        return [per_axis[head] for per_axis in self.matrices]


class AttentionLayerParams:
    """
    一层分解注意力的全部参数: 每轴每头的 W_q^(m)、W_k^(m)，共享的 W_v，
    轴向投影器，输出混合层，以及注意力之后的逐点 MLP f。
    """

    def __init__(
        self,
        name: str,
        n_axes: int,
        width: int,
        heads: int,
        kernel_dim: int,
        rng: np.random.Generator,
        mesh_weight: float = DEFAULT_MESH_WEIGHT,
        norm_eps: float = INSTANCE_NORM_EPS,
    ):
        if heads < 1 or width % heads != 0:
            raise ConfigurationError(
                f"Hidden width {width} must split evenly into {heads} heads."
            )
        self.name = name
        self.width = width
        self.heads = heads
        self.kernel_dim = kernel_dim
        self.norm_eps = norm_eps
        self.rope = [RopeTable(kernel_dim, mesh_weight) for _ in range(n_axes)]
        head_width = width // heads
        self.value = Linear(f"{name}.value", width, width, rng, bias=False)
        self.query = [
            [
                Param(f"{name}.query.{m}.{h}", glorot_uniform(rng, head_width, kernel_dim))
                for h in range(heads)
            ]
            for m in range(n_axes)
        ]
        self.key = [
            [
                Param(f"{name}.key.{m}.{h}", glorot_uniform(rng, head_width, kernel_dim))
                for h in range(heads)
            ]
            for m in range(n_axes)
        ]
        self.projector = AxialProjector(f"{name}.proj", n_axes, width, rng)
        self.mix = Linear(f"{name}.mix", width, width, rng, bias=False)
        self.ffn = Mlp(f"{name}.ffn", (width, width, width, width), rng)

    @property
    def n_axes(self) -> int:
        return len(self.rope)

    @property
    def head_width(self) -> int:
        return self.width // self.heads

    def head_slice(self, head: int) -> slice:
        return slice(head * self.head_width, (head + 1) * self.head_width)

    def params(self) -> List[Param]:
        out: List[Param] = list(self.value.params())
        for m in range(self.n_axes):
            out.extend(self.query[m])
            out.extend(self.key[m])
        out.extend(self.projector.params())
        out.extend(self.mix.params())
        out.extend(self.ffn.params())
        return out


# ---------------------------------------------------------------------------
# Axial projection and kernels
# ---------------------------------------------------------------------------


def axial_project(
    u: FieldTensor, proj: AxialProjector, axis: int
) -> Tuple[Matrix, Backward]:
    """
    φ^(m) = h^(m)(mean_pool(γ^(m)(u)))，返回 (S_m, d) 矩阵与反向闭包。
    均值池化的梯度是广播之后除以被池化的点数。
    """
    if not 0 <= axis < u.n_spatial or axis >= proj.n_axes:
        raise ContractViolationError(
            f"Axis {axis} is out of range for a {u.n_spatial}-d field."
        )
    g, back_gamma = proj.gammas[axis](u.data)
    other = pooled_axes(u.n_spatial, axis)
    count = int(np.prod([u.shape[a] for a in other])) if other else 1
    pooled = g.mean(axis=other) if other else g
    phi, back_h = proj.heads[axis](pooled)

    def backward(grad_phi: np.ndarray) -> np.ndarray:
        grad_pooled = back_h(np.asarray(grad_phi, dtype=np.float64))
        shape = [1] * u.n_spatial + [g.shape[-1]]
        shape[axis] = g.shape[axis]
        grad_g = np.broadcast_to(grad_pooled.reshape(shape), g.shape) / count
        return back_gamma(np.ascontiguousarray(grad_g))

    return Matrix(phi), backward


def build_axial_kernels(
    phis: Sequence[Union[Matrix, np.ndarray]],
    params: AttentionLayerParams,
    coords: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[AxialKernelSet, Callable[[List[List[Optional[np.ndarray]]]], List[np.ndarray]]]:
    """
    A^(m,h) = w_m · Q̃^(m,h) (K̃^(m,h))ᵀ，w_m = 1/S_m。

    Q、K 由 head 切分后的 φ^(m) 乘 W_q^(m,h)、W_k^(m,h) 得到，
    再用该轴的一维坐标做旋转编码。反向接收每个核矩阵的梯度，
    返回每个 φ^(m) 的梯度，并把权重梯度累加到参数上。
    """
    if len(phis) != params.n_axes:
        raise ContractViolationError(
            f"Expected {params.n_axes} axial projections, got {len(phis)}."
        )
    phi_arrays = [np.asarray(p.data if isinstance(p, Matrix) else p) for p in phis]
    if coords is None:
        coords = [axis_coordinates(p.shape[0]) for p in phi_arrays]
    for m, (phi, xs) in enumerate(zip(phi_arrays, coords)):
        if phi.shape[0] != len(xs):
            raise ContractViolationError(
                f"Axis {m}: projection has {phi.shape[0]} rows but {len(xs)} coordinates."
            )

    matrices: List[List[np.ndarray]] = []
    queries: List[List[np.ndarray]] = []
    keys: List[List[np.ndarray]] = []
    weights: List[float] = []
    rope_backs: List[List[Tuple[Backward, Backward]]] = []
    for m, phi in enumerate(phi_arrays):
        size = phi.shape[0]
        w_m = 1.0 / size
        weights.append(w_m)
        axis_mats, axis_q, axis_k, axis_backs = [], [], [], []
        for h in range(params.heads):
            phi_h = phi[:, params.head_slice(h)]
            q_tilde, back_q = rope_encode(phi_h @ params.query[m][h].value, coords[m], params.rope[m])
            k_tilde, back_k = rope_encode(phi_h @ params.key[m][h].value, coords[m], params.rope[m])
            axis_mats.append(w_m * (q_tilde @ k_tilde.T))
            op_counter.add("kernel", size * size * params.kernel_dim)
            axis_q.append(q_tilde)
            axis_k.append(k_tilde)
            axis_backs.append((back_q, back_k))
        matrices.append(axis_mats)
        queries.append(axis_q)
        keys.append(axis_k)
        rope_backs.append(axis_backs)

    kernels = AxialKernelSet(matrices, weights, queries, keys)

    def backward(grad_kernels: List[List[Optional[np.ndarray]]]) -> List[np.ndarray]:
        grad_phis: List[np.ndarray] = []
        for m, phi in enumerate(phi_arrays):
            grad_phi = np.zeros_like(phi)
            w_m = weights[m]
            for h in range(params.heads):
                grad_a = grad_kernels[m][h]
                if grad_a is None:
                    continue
                back_q, back_k = rope_backs[m][h]
                grad_q = back_q(w_m * (grad_a @ keys[m][h]))
                grad_k = back_k(w_m * (grad_a.T @ queries[m][h]))
                sl = params.head_slice(h)
                phi_h = phi[:, sl]
                w_q, w_k = params.query[m][h], params.key[m][h]
                w_q.grad += phi_h.T @ grad_q
                w_k.grad += phi_h.T @ grad_k
                grad_phi[:, sl] += grad_q @ w_q.value.T + grad_k @ w_k.value.T
            grad_phis.append(grad_phi)
        return grad_phis

    return kernels, backward


# ---------------------------------------------------------------------------
# Factorized attention
# ---------------------------------------------------------------------------


def _kernel_chain(v: np.ndarray, mats: Sequence[np.ndarray]) -> List[np.ndarray]:
    """V ×₁ A^(1) ×₂ A^(2) ⋯，按轴序升序。返回全部中间结果。"""
    stages = [v]
    for m, a in enumerate(mats):
        stages.append(mode_product_array(stages[-1], a, m))
    return stages


def _kernel_chain_backward(
    grad_out: np.ndarray, stages: List[np.ndarray], mats: Sequence[np.ndarray]
) -> Tuple[np.ndarray, List[np.ndarray]]:
    grad = grad_out
    grad_mats: List[np.ndarray] = [np.empty(0)] * len(mats)
    for m in reversed(range(len(mats))):
        other = [a for a in range(grad.ndim) if a != m]
        grad_mats[m] = np.tensordot(grad, stages[m], axes=(other, other))
        grad = mode_product_array(grad, mats[m].T, m, category="mode_product_backward")
    return grad, grad_mats


@dataclass
class _AttentionTrace:
    output: np.ndarray
    premix: np.ndarray
    value: np.ndarray
    kernels: AxialKernelSet
    backward: Backward


def _factorized_forward(
    u: FieldTensor, params: AttentionLayerParams, identity_kernels: bool
) -> _AttentionTrace:
    if u.n_spatial != params.n_axes or u.channels != params.width:
        raise ContractViolationError(
            f"Attention layer '{params.name}' expects {params.n_axes} spatial modes and "
            f"{params.width} channels, got shape {u.shape}."
        )
    spatial_shape = u.spatial_shape

    proj_backs: List[Backward] = []
    kernel_back = None
    if identity_kernels:
        kernels = AxialKernelSet.identity(spatial_shape, params.heads)
    else:
        phis = []
        for m in range(params.n_axes):
            phi, back = axial_project(u, params.projector, m)
            phis.append(phi)
            proj_backs.append(back)
        coords = [axis_coordinates(s) for s in spatial_shape]
        kernels, kernel_back = build_axial_kernels(phis, params, coords)

    v, back_value = params.value(u.data)
    premix = np.empty_like(v)
    head_stages: List[List[np.ndarray]] = []
    for h in range(params.heads):
        sl = params.head_slice(h)
        stages = _kernel_chain(np.ascontiguousarray(v[..., sl]), kernels.for_head(h))
        premix[..., sl] = stages[-1]
        head_stages.append(stages)
    out, back_mix = params.mix(premix)

    def backward(grad_out: np.ndarray) -> np.ndarray:
        grad_premix = back_mix(grad_out)
        grad_v = np.empty_like(v)
        grad_kernels: List[List[Optional[np.ndarray]]] = [
            [None] * params.heads for _ in range(params.n_axes)
        ]
        for h in range(params.heads):
            sl = params.head_slice(h)
            grad_vh, grad_mats = _kernel_chain_backward(
                np.ascontiguousarray(grad_premix[..., sl]),
                head_stages[h],
                kernels.for_head(h),
            )
            grad_v[..., sl] = grad_vh
            for m in range(params.n_axes):
                grad_kernels[m][h] = grad_mats[m]
        grad_u = back_value(grad_v)
        if kernel_back is not None:
            grad_phis = kernel_back(grad_kernels)
            for m, back in enumerate(proj_backs):
                grad_u = grad_u + back(grad_phis[m])
        return grad_u

    return _AttentionTrace(out, premix, v, kernels, backward)


def factorized_attention(
    u: FieldTensor, params: AttentionLayerParams, identity_kernels: bool = False
) -> Tuple[FieldTensor, Backward]:
    """
    Z = V ×₁ A^(1) ×₂ ⋯ ×ₙ A^(n)，逐 head 计算后拼接并经过输出混合层。

    `identity_kernels=True` 是测试钩子: 把所有核矩阵替换为单位阵，
    不用于正式计算。
    """
    trace = _factorized_forward(u, params, identity_kernels)
    return FieldTensor(trace.output), trace.backward


def factorized_attention_premix(
    u: FieldTensor, params: AttentionLayerParams, identity_kernels: bool = False
) -> Tuple[FieldTensor, FieldTensor, AxialKernelSet]:
    """返回 (混合前的输出, V, 核集合)，用于与暴力求和 oracle 对照。"""
    trace = _factorized_forward(u, params, identity_kernels)
    return FieldTensor(trace.premix), FieldTensor(trace.value), trace.kernels


def compute_axial_kernels(u: FieldTensor, params: AttentionLayerParams) -> AxialKernelSet:
    phis = [axial_project(u, params.projector, m)[0] for m in range(params.n_axes)]
    kernels, _ = build_axial_kernels(phis, params)
    return kernels


def brute_force_kernel_integral(
    v: FieldTensor, kernels: AxialKernelSet, head: int = 0
) -> FieldTensor:
    """
    直接求和: z_{i,c} = Σ_j A^(1)_{i₁j₁}⋯A^(n)_{iₙjₙ} v_{j,c}。

    对每个输出点逐项构造全部 N 个权重，不利用任何分解结构；只用于小网格。
    """
    shape = v.spatial_shape
    n_points = v.num_points
    if n_points > ORACLE_MAX_POINTS:
        raise OracleScaleError(
            f"Brute-force kernel integral is limited to {ORACLE_MAX_POINTS} points, got {n_points}."
        )
    mats = kernels.for_head(head)
    if len(mats) != v.n_spatial:
        raise ContractViolationError(
            f"Kernel set has {len(mats)} axes but the field has {v.n_spatial}."
        )
    for m, a in enumerate(mats):
        if a.shape != (shape[m], shape[m]):
            raise ContractViolationError(
                f"Axis {m} kernel has shape {a.shape}, expected {(shape[m], shape[m])}."
            )
    sources = np.array(list(np.ndindex(*shape)), dtype=np.intp).reshape(n_points, len(shape))
    values = v.as_points()
    out = np.zeros_like(values)
    for row, target in enumerate(np.ndindex(*shape)):
        weights = np.ones(n_points)
        for m, a in enumerate(mats):
            weights = weights * a[target[m], sources[:, m]]
        out[row] = weights @ values
    return FieldTensor(out.reshape(v.shape))


# ---------------------------------------------------------------------------
# Softmax-free linear attention baseline
# ---------------------------------------------------------------------------


class LinearAttentionParams:
    """
    作为对照的线性注意力: Q、K 的 head 宽度为 kernel_dim，
    多维旋转编码把 head 宽度平均分给每个轴。
    """

    def __init__(
        self,
        name: str,
        n_axes: int,
        width: int,
        heads: int,
        kernel_dim: int,
        rng: np.random.Generator,
        mesh_weight: float = DEFAULT_MESH_WEIGHT,
        normalize: bool = True,
        norm_eps: float = INSTANCE_NORM_EPS,
    ):
        if heads < 1 or width % heads != 0:
            raise ConfigurationError(
                f"Hidden width {width} must split evenly into {heads} heads."
            )
        if kernel_dim % (2 * n_axes) != 0:
            raise ConfigurationError(
                f"Kernel dim {kernel_dim} must split into even blocks over {n_axes} axes."
            )
        self.name = name
        self.width = width
        self.heads = heads
        self.kernel_dim = kernel_dim
        self.normalize = normalize
        self.norm_eps = norm_eps
        self.rope = [RopeTable(kernel_dim // n_axes, mesh_weight) for _ in range(n_axes)]
        self.query = Linear(f"{name}.query", width, heads * kernel_dim, rng, bias=False)
        self.key = Linear(f"{name}.key", width, heads * kernel_dim, rng, bias=False)
        self.value = Linear(f"{name}.value", width, width, rng, bias=False)
        self.mix = Linear(f"{name}.mix", width, width, rng, bias=False)

    @property
    def n_axes(self) -> int:
        return len(self.rope)

    @property
    def head_width(self) -> int:
        return self.width // self.heads

    def params(self) -> List[Param]:
        return (
            self.query.params() + self.key.params() + self.value.params() + self.mix.params()
        )


def flatten_field(u: FieldTensor) -> Tuple[np.ndarray, np.ndarray]:
    """把场展平为 (N, d) 序列，同时返回 (N, n) 的网格坐标。"""
    coords = grid_points(u.spatial_shape).reshape(u.num_points, u.n_spatial)
    return np.ascontiguousarray(u.as_points()), coords


def _rope_blocks(
    x: np.ndarray, coords: np.ndarray, tables: Sequence[RopeTable]
) -> Tuple[np.ndarray, Backward]:
    block = tables[0].head_dim
    out = np.empty_like(x)
    backs: List[Backward] = []
    for m, table in enumerate(tables):
        sl = slice(m * block, (m + 1) * block)
        out[..., sl], back = rope_encode(x[..., sl], coords[:, m], table)
        backs.append(back)

    def backward(grad: np.ndarray) -> np.ndarray:
        result = np.empty_like(grad)
        for m, back in enumerate(backs):
            sl = slice(m * block, (m + 1) * block)
            result[..., sl] = back(grad[..., sl])
        return result

    return out, backward


def linear_attention_core(
    q_tilde: np.ndarray,
    k_tilde: np.ndarray,
    v: np.ndarray,
    weight: float,
    path: str = "associative",
) -> np.ndarray:
    """
    w·Q̃K̃ᵀV。`associative` 先算 K̃ᵀV (代价 ∝ N·d²)，`direct` 先物化 N×N 核。
    支持任意前导 (head) 维。
    """
    if path == "associative":
        kv = np.einsum("...nk,...nc->...kc", k_tilde, v)
        op_counter.add("linear", k_tilde.size * v.shape[-1])
        out = weight * np.einsum("...nk,...kc->...nc", q_tilde, kv)
        op_counter.add("linear", q_tilde.size * v.shape[-1])
        return out
    if path == "direct":
        kernel = weight * np.einsum("...ik,...jk->...ij", q_tilde, k_tilde)
        op_counter.add("full_kernel", kernel.size * q_tilde.shape[-1])
        op_counter.add("full_kernel", kernel.size * v.shape[-1])
        return np.einsum("...ij,...jc->...ic", kernel, v)
    raise ConfigurationError(f"Unknown linear attention path '{path}'.")


def _check_budget(n_points: int, params: LinearAttentionParams, path: str, budget: int) -> None:
    per_point = 3 * params.heads * params.kernel_dim + 3 * params.width
    needed = 8 * n_points * per_point
    if path == "direct":
        needed += 8 * params.heads * n_points * n_points
    if needed > budget:
        raise ResourceBudgetError(
            f"Linear attention ({path}) on {n_points} points needs about {needed} bytes, "
            f"budget is {budget}."
        )


def _qk_tilde(
    u: np.ndarray, coords: np.ndarray, params: LinearAttentionParams
) -> Tuple[np.ndarray, np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]:
    n_points = u.shape[0]
    q, back_q = params.query(u)
    k, back_k = params.key(u)
    heads, kd = params.heads, params.kernel_dim
    q_h = q.reshape(n_points, heads, kd).transpose(1, 0, 2)
    k_h = k.reshape(n_points, heads, kd).transpose(1, 0, 2)
    q_tilde, back_rq = _rope_blocks(q_h, coords, params.rope)
    k_rot, back_rk = _rope_blocks(k_h, coords, params.rope)
    back_nk: Optional[Backward] = None
    if params.normalize:
        k_tilde, back_nk = instance_norm_array(k_rot, (1,), params.norm_eps)
    else:
        k_tilde = k_rot

    def backward(grad_q_tilde: np.ndarray, grad_k_tilde: np.ndarray) -> np.ndarray:
        grad_k_rot = back_nk(grad_k_tilde) if back_nk is not None else grad_k_tilde
        grad_q = back_rq(grad_q_tilde).transpose(1, 0, 2).reshape(n_points, heads * kd)
        grad_k = back_rk(grad_k_rot).transpose(1, 0, 2).reshape(n_points, heads * kd)
        return back_q(grad_q) + back_k(grad_k)

    return q_tilde, k_tilde, backward


def linear_attention(
    u: np.ndarray,
    coords: np.ndarray,
    params: LinearAttentionParams,
    path: str = "associative",
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> Tuple[np.ndarray, Backward]:
    """
    Z = w·Q̃(K̃ᵀV)，w = 1/N。K̃ 与 V 按列做实例归一化，Q 不归一化。
    u 为 (N, d) 展平序列，coords 为 (N, n)。
    """
    u = np.asarray(u, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != params.width:
        raise ContractViolationError(
            f"Linear attention expects an (N, {params.width}) sequence, got {u.shape}."
        )
    if coords.shape != (u.shape[0], params.n_axes):
        raise ContractViolationError(
            f"Linear attention expects coordinates of shape {(u.shape[0], params.n_axes)}, "
            f"got {coords.shape}."
        )
    n_points = u.shape[0]
    _check_budget(n_points, params, path, memory_budget)
    weight = 1.0 / n_points
    heads, hw = params.heads, params.head_width

    q_tilde, k_tilde, back_qk = _qk_tilde(u, coords, params)
    v, back_v = params.value(u)
    v_h = v.reshape(n_points, heads, hw).transpose(1, 0, 2)
    back_nv: Optional[Backward] = None
    if params.normalize:
        v_n, back_nv = instance_norm_array(v_h, (1,), params.norm_eps)
    else:
        v_n = v_h

    z_h = linear_attention_core(q_tilde, k_tilde, v_n, weight, path)
    z = z_h.transpose(1, 0, 2).reshape(n_points, params.width)
    out, back_mix = params.mix(z)

    def backward(grad_out: np.ndarray) -> np.ndarray:
        grad_z = back_mix(grad_out).reshape(n_points, heads, hw).transpose(1, 0, 2)
        if path == "associative":
            kv = np.einsum("hnk,hnc->hkc", k_tilde, v_n)
            grad_q_tilde = weight * np.einsum("hnc,hkc->hnk", grad_z, kv)
            grad_kv = weight * np.einsum("hnk,hnc->hkc", q_tilde, grad_z)
            grad_k_tilde = np.einsum("hnc,hkc->hnk", v_n, grad_kv)
            grad_v_n = np.einsum("hnk,hkc->hnc", k_tilde, grad_kv)
        else:
            kernel = weight * np.einsum("hik,hjk->hij", q_tilde, k_tilde)
            grad_kernel = np.einsum("hic,hjc->hij", grad_z, v_n)
            grad_v_n = np.einsum("hij,hic->hjc", kernel, grad_z)
            grad_q_tilde = weight * np.einsum("hij,hjk->hik", grad_kernel, k_tilde)
            grad_k_tilde = weight * np.einsum("hij,hik->hjk", grad_kernel, q_tilde)
        grad_v_h = back_nv(grad_v_n) if back_nv is not None else grad_v_n
        grad_u = back_v(grad_v_h.transpose(1, 0, 2).reshape(n_points, params.width))
        return grad_u + back_qk(grad_q_tilde, grad_k_tilde)

    return out, backward


def full_kernel_matrix(
    u: np.ndarray,
    coords: np.ndarray,
    params: LinearAttentionParams,
    head: int = 0,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> Matrix:
    """物化一个 head 的 N×N 核 w·Q̃K̃ᵀ，用于谱分析与秩检查。"""
    n_points = np.asarray(u).shape[0]
    _check_budget(n_points, params, "direct", memory_budget)
    q_tilde, k_tilde, _ = _qk_tilde(np.asarray(u, dtype=np.float64), coords, params)
    kernel = (q_tilde[head] @ k_tilde[head].T) / n_points
    op_counter.add("full_kernel", kernel.size * params.kernel_dim)
    return Matrix(kernel)


# ---------------------------------------------------------------------------
# Attention block
# ---------------------------------------------------------------------------


def attention_update(
    u: FieldTensor, params: AttentionLayerParams
) -> Tuple[np.ndarray, Backward]:
    """f(IN(Att(u)))，不含残差。"""
    z, back_att = factorized_attention(u, params)
    z_norm, back_norm = instance_norm_fwd_bwd(z, params.norm_eps)
    f, back_f = params.ffn(z_norm.data)

    def backward(grad_f: np.ndarray) -> np.ndarray:
        return back_att(back_norm(back_f(grad_f)))

    return f, backward


def attention_block(
    u: FieldTensor, params: AttentionLayerParams
) -> Tuple[FieldTensor, Backward]:
    """U ← f(IN(Att(U))) + U。"""
    f, back_update = attention_update(u, params)

    def backward(grad_out: np.ndarray) -> np.ndarray:
        return back_update(grad_out) + grad_out

    return FieldTensor(f + u.data), backward


# ---------------------------------------------------------------------------
# Kernel export
# ---------------------------------------------------------------------------


def export_kernels(kernels: AxialKernelSet, directory: Union[str, Path], layer: int) -> List[Path]:
    """
    把每个 A^(m,h) 写成原始 f64 小端文件，文件头为 (axis, head, S_m) 三个 u32。
    """
    out_dir = ensure_output_dir(directory)
    written: List[Path] = []
    for m, h in itertools.product(range(kernels.n_axes), range(kernels.n_heads)):
        a = kernels.matrices[m][h]
        path = out_dir / f"layer{layer}_axis{m}_head{h}.f64"
        with open(path, "wb") as f:
            f.write(KERNEL_DUMP_HEADER.pack(m, h, a.shape[0]))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        written.append(path)
    logger.debug(f"Exported {len(written)} kernel matrices of layer {layer} to '{out_dir}'.")
    return written
