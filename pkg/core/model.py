# core/model.py

import logging
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import AttentionLayerParams, AxialKernelSet, attention_update, compute_axial_kernels
from .errors import ConfigurationError, ContractViolationError
from .layers import (
    Backward,
    DEFAULT_MESH_WEIGHT,
    INSTANCE_NORM_EPS,
    Linear,
    Mlp,
    Param,
    RffEncoder,
    rff_positional,
)
from .tensor import FieldTensor, grid_points

logger = logging.getLogger(__name__)

FramesBackward = Callable[[Sequence[Optional[np.ndarray]]], List[np.ndarray]]


@dataclass(frozen=True)
class FactFormerConfig:
    """
    FactFormer 的超参数。

    kernel_dim 是每个 head 的 Q/K 宽度，可以与 hidden_dim / heads 不同；
    head 切分只要求 hidden_dim 能被 heads 整除。
    """

    grid: Tuple[int, ...] = (32, 32)
    in_channels: int = 1
    context_frames: int = 4
    hidden_dim: int = 64
    depth: int = 2
    heads: int = 4
    kernel_dim: int = 16
    rope_lambda: float = DEFAULT_MESH_WEIGHT
    march_steps: int = 4
    seed: int = 0
    rff_scale: float = 1.0
    per_layer_rff: bool = False
    skip_from_pre_psi: bool = False
    norm_eps: float = INSTANCE_NORM_EPS

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(int(s) for s in self.grid))
        self.validate()

    @property
    def n_dims(self) -> int:
        return len(self.grid)

    def validate(self) -> None:
        if not 1 <= len(self.grid) <= 3 or any(s < 1 for s in self.grid):
            raise ConfigurationError(f"Grid must have 1-3 positive extents, got {self.grid}.")
        if self.in_channels < 1 or self.context_frames < 1:
            raise ConfigurationError("in_channels and context_frames must be >= 1.")
        if self.depth < 1:
            raise ConfigurationError(f"Depth must be >= 1, got {self.depth}.")
        if self.march_steps < 1:
            raise ConfigurationError(f"march_steps must be >= 1, got {self.march_steps}.")
        if self.heads < 1 or self.hidden_dim % self.heads != 0:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} must split evenly into {self.heads} heads."
            )
        if self.kernel_dim < 2 or self.kernel_dim % 2 != 0:
            raise ConfigurationError(f"kernel_dim must be even, got {self.kernel_dim}.")
        if self.rope_lambda <= 0 or self.rff_scale <= 0 or self.norm_eps <= 0:
            raise ConfigurationError("rope_lambda, rff_scale and norm_eps must be positive.")

    def to_items(self) -> List[Tuple[str, str]]:
        """按字段顺序序列化为字符串键值对 (检查点与配置回显使用)。"""
        items: List[Tuple[str, str]] = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value)
            items.append((f.name, text))
        return items

    @classmethod
    def from_items(cls, items: Sequence[Tuple[str, str]]) -> "FactFormerConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs: Dict[str, object] = {}
        for key, text in items:
            if key not in known:
                raise ConfigurationError(f"Unknown model config key '{key}'.")
            default = getattr(cls, key, None)
            if key == "grid":
                kwargs[key] = tuple(int(s) for s in text.split(",") if s.strip())
            elif isinstance(default, bool):
                kwargs[key] = text.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(text)
            else:
                kwargs[key] = float(text)
        return cls(**kwargs)  # type: ignore[arg-type]


class FactFormerModel:
    """
    编码器 (逐点时间压缩) → [加位置编码 → 分解注意力块] × depth
    → [潜空间推进 → 解码] × k。
    """

    def __init__(self, config: FactFormerConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, n = config.hidden_dim, config.n_dims

        self.encoder = Linear("encoder", config.context_frames * config.in_channels, d, rng)
        rff_count = config.depth if config.per_layer_rff else 1
        self.rffs = [
            RffEncoder(f"rff.{i}" if config.per_layer_rff else "rff", n, d, rng, config.rff_scale)
            for i in range(rff_count)
        ]
        self.blocks = [
            AttentionLayerParams(
                f"blocks.{i}",
                n,
                d,
                config.heads,
                config.kernel_dim,
                rng,
                mesh_weight=config.rope_lambda,
                norm_eps=config.norm_eps,
            )
            for i in range(config.depth)
        ]
        self.propagator = Mlp("propagator", (d + 1, d, d, d), rng)
        self.decoder = Mlp("decoder", (d, d, d, config.in_channels), rng)
        self.coords = grid_points(config.grid)

        logger.info(
            f"FactFormer model built: grid={config.grid}, hidden={d}, depth={config.depth}, "
            f"heads={config.heads}, kernel_dim={config.kernel_dim}, k={config.march_steps}, "
            f"parameters={self.parameter_count()}."
        )

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> List[Param]:
        out: List[Param] = list(self.encoder.params())
        for rff in self.rffs:
            out.extend(rff.params())
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.propagator.params())
        out.extend(self.decoder.params())
        return out

    def named_parameters(self) -> Dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameter_census(self) -> Dict[str, int]:
        """按顶层分组统计参数量。"""
        census: Dict[str, int] = {}
        for p in self.parameters():
            group = p.name.split(".")[0]
            if group == "blocks":
                group = ".".join(p.name.split(".")[:2])
            census[group] = census.get(group, 0) + p.size
        return census

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def rff_for_layer(self, layer: int) -> RffEncoder:
        return self.rffs[layer] if self.config.per_layer_rff else self.rffs[0]

    # -- building blocks ----------------------------------------------------

    def _check_frames(self, frames: Sequence[FieldTensor]) -> None:
        cfg = self.config
        if len(frames) != cfg.context_frames:
            raise ContractViolationError(
                f"Expected {cfg.context_frames} context frames, got {len(frames)}."
            )
        expected = tuple(cfg.grid) + (cfg.in_channels,)
        for i, frame in enumerate(frames):
            if frame.shape != expected:
                raise ContractViolationError(
                    f"Context frame {i} has shape {frame.shape}, expected {expected}."
                )

    def encode(self, frames: Sequence[FieldTensor]) -> Tuple[FieldTensor, FramesBackward]:
        """
        把 T_in 帧按通道拼接成 T_in·c 个通道，再做逐点线性映射到 d 维。
        与核大小为 (1, T_in) 的卷积完全等价。
        """
        self._check_frames(frames)
        stacked = np.concatenate([f.data for f in frames], axis=-1)
        z, back = self.encoder(stacked)
        c = self.config.in_channels

        def backward(grad_z: np.ndarray) -> List[np.ndarray]:
            grad_stacked = back(grad_z)
            return [grad_stacked[..., i * c:(i + 1) * c] for i in range(len(frames))]

        return FieldTensor(z), backward  # type: ignore[return-value]

    def latent_march(self, z: FieldTensor, step: int) -> Tuple[FieldTensor, Backward]:
        """z + ε([z; τ])，τ = step / k 作为额外的一个通道。"""
        k = self.config.march_steps
        if not 0 <= step < k:
            raise ContractViolationError(f"March step {step} is outside [0, {k}).")
        tau = np.full(z.spatial_shape + (1,), step / k)
        update, back = self.propagator(np.concatenate([z.data, tau], axis=-1))
        d = z.channels

        def backward(grad_out: np.ndarray) -> np.ndarray:
            return grad_out + back(grad_out)[..., :d]

        return FieldTensor(z.data + update), backward

    def _encode_and_attend(
        self, frames: Sequence[FieldTensor], collect_inputs: bool = False
    ) -> Tuple[FieldTensor, Callable[[np.ndarray], List[np.ndarray]], List[FieldTensor]]:
        z, back_encode = self.encode(frames)
        block_backs: List[Tuple[Backward, Callable[[np.ndarray], None]]] = []
        layer_inputs: List[FieldTensor] = []
        for i, block in enumerate(self.blocks):
            psi, back_psi = rff_positional(self.coords, self.rff_for_layer(i))
            z_in = FieldTensor(z.data + psi)
            if collect_inputs:
                layer_inputs.append(z_in)
            update, back_update = attention_update(z_in, block)
            skip = z.data if self.config.skip_from_pre_psi else z_in.data
            z = FieldTensor(update + skip)
            block_backs.append((back_update, back_psi))

        skip_pre = self.config.skip_from_pre_psi

        def backward(grad_z: np.ndarray) -> List[np.ndarray]:
            grad = grad_z
            for back_update, back_psi in reversed(block_backs):
                grad_in = back_update(grad)
                if skip_pre:
                    back_psi(grad_in)
                    grad = grad_in + grad
                else:
                    grad_in = grad_in + grad
                    back_psi(grad_in)
                    grad = grad_in
            return back_encode(grad)

        return z, backward, layer_inputs

    # -- public API ---------------------------------------------------------

    def forward(
        self, frames: Sequence[FieldTensor], steps: Optional[int] = None
    ) -> Tuple[List[FieldTensor], FramesBackward]:
        """
        一次调用预测 `steps` (默认 k) 个未来帧。反向闭包接收每个输出帧的梯度
        (None 表示该帧不参与损失)，返回对每个输入帧的梯度。
        """
        k = self.config.march_steps
        steps = k if steps is None else steps
        if not 1 <= steps <= k:
            raise ContractViolationError(f"Requested {steps} march steps, model supports 1..{k}.")
        z, back_latent, _ = self._encode_and_attend(frames)

        outputs: List[FieldTensor] = []
        march_backs: List[Backward] = []
        decode_backs: List[Backward] = []
        for j in range(steps):
            z, back_march = self.latent_march(z, j)
            frame, back_decode = self.decoder(z.data)
            outputs.append(FieldTensor(frame))
            march_backs.append(back_march)
            decode_backs.append(back_decode)
        latent_shape = z.shape

        def backward(grad_frames: Sequence[Optional[np.ndarray]]) -> List[np.ndarray]:
            if len(grad_frames) != steps:
                raise ContractViolationError(
                    f"Backward expects {steps} frame gradients, got {len(grad_frames)}."
                )
            grad = np.zeros(latent_shape)
            for j in reversed(range(steps)):
                if grad_frames[j] is not None:
                    grad = grad + decode_backs[j](np.asarray(grad_frames[j], dtype=np.float64))
                grad = march_backs[j](grad)
            return back_latent(grad)

        return outputs, backward

    def latent(self, frames: Sequence[FieldTensor]) -> FieldTensor:
        """编码器与全部注意力层的输出，即潜在推进的起点。"""
        return self._encode_and_attend(frames)[0]

    def predict(self, frames: Sequence[FieldTensor], steps: Optional[int] = None) -> List[FieldTensor]:
        outputs, _ = self.forward(frames, steps)
        return outputs

    def rollout(self, frames: Sequence[FieldTensor], horizon: int) -> List[FieldTensor]:
        """
        自回归展开: 用自己的预测作为新的上下文 (长度 T_in 的滑动窗口)，
        共调用 horizon / k 次 forward。
        """
        k = self.config.march_steps
        if horizon < 1 or horizon % k != 0:
            raise ContractViolationError(
                f"Rollout horizon {horizon} must be a positive multiple of k={k}."
            )
        t_in = self.config.context_frames
        context = list(frames[-t_in:])
        predictions: List[FieldTensor] = []
        for _ in range(horizon // k):
            outputs = self.predict(context)
            predictions.extend(outputs)
            context = (context + outputs)[-t_in:]
        return predictions

    def trace_layers(
        self, frames: Sequence[FieldTensor]
    ) -> List[Tuple[FieldTensor, AxialKernelSet]]:
        """返回每个注意力层的输入 (已加位置编码) 及其轴向核集合。"""
        _, _, layer_inputs = self._encode_and_attend(frames, collect_inputs=True)
        return [
            (z_in, compute_axial_kernels(z_in, block))
            for z_in, block in zip(layer_inputs, self.blocks)
        ]
