# core/data/field_file.py

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.paths import ensure_output_dir, ensure_parent_dir, require_readable
from ..errors import (
    BadMagicError,
    ContractViolationError,
    ExtentOverflowError,
    FormatError,
    TruncatedFileError,
)
from ..tensor import FieldTensor

logger = logging.getLogger(__name__)

# 文件头: 魔数 (8 字节) + u8 空间维数 + u8 是否含时间维
MAGIC: bytes = b"FFLD0001"
_HEADER = struct.Struct("<8sBB")
_MAX_EXTENT = 0xFFFFFFFF
_MAX_VALUES = 1 << 34

MANIFEST_NAME = "manifest.txt"


@dataclass
class TrajectoryDataset:
    """一条 PDE 轨迹: 按时间排列的帧、帧间隔 dt 以及生成参数。"""

    frames: List[FieldTensor]
    dt: float
    metadata: Dict[str, str] = field(default_factory=dict)
    path: Optional[Path] = None

    def __post_init__(self) -> None:
        if not self.frames:
            raise ContractViolationError("A trajectory needs at least one frame.")
        shape = self.frames[0].shape
        for i, frame in enumerate(self.frames):
            if frame.shape != shape:
                raise ContractViolationError(
                    f"Frame {i} has shape {frame.shape}, trajectory frames have {shape}."
                )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def grid(self) -> Tuple[int, ...]:
        return self.frames[0].spatial_shape

    @property
    def channels(self) -> int:
        return self.frames[0].channels

    def window(self, start: int, length: int) -> List[FieldTensor]:
        if start < 0 or start + length > len(self.frames):
            raise ContractViolationError(
                f"Window [{start}, {start + length}) exceeds trajectory of {len(self.frames)} frames."
            )
        return self.frames[start:start + length]


def write_field_file(
    path: Union[str, Path], data: Union[FieldTensor, Sequence[FieldTensor]]
) -> Path:
    """
    写入 FFLD0001 场文件。传入单个张量时不含时间维，传入帧序列时含时间维。
    数据以 f32 小端、行主序 (通道最快) 存储。
    """
    if isinstance(data, FieldTensor):
        include_time = 0
        n_spatial = data.n_spatial
        extents: Tuple[int, ...] = data.shape
        payload = data.data
    else:
        frames = list(data)
        if not frames:
            raise ContractViolationError("Cannot write a trajectory with zero frames.")
        shape = frames[0].shape
        if any(f.shape != shape for f in frames):
            raise ContractViolationError("All trajectory frames must share one shape.")
        include_time = 1
        n_spatial = frames[0].n_spatial
        extents = (len(frames),) + shape
        payload = np.stack([f.data for f in frames])
    if any(e > _MAX_EXTENT for e in extents):
        raise ExtentOverflowError(f"Extents {extents} do not fit in u32.")

    target = ensure_parent_dir(path)
    blob = (
        _HEADER.pack(MAGIC, n_spatial, include_time)
        + struct.pack(f"<{len(extents)}I", *extents)
        + np.ascontiguousarray(payload, dtype="<f4").tobytes()
    )
    try:
        with open(target, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise OSError(f"Failed to write field file '{target}': {e}") from e
    logger.debug(f"Wrote field file '{target}' with extents {extents}.")
    return target


def read_field_file(path: Union[str, Path]) -> Union[FieldTensor, List[FieldTensor]]:
    """读取场文件并校验魔数、维度与载荷长度；数值提升为 f64。"""
    with open(require_readable(path), "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"Field file '{path}' is shorter than its header.")
    magic, n_spatial, include_time = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"'{path}' is not a field file (magic {magic!r}).")
    if not 1 <= n_spatial <= 3:
        raise FormatError(f"Field file '{path}' declares {n_spatial} spatial dims.")
    if include_time not in (0, 1):
        raise FormatError(f"Field file '{path}' has an invalid time flag {include_time}.")

    n_extents = n_spatial + 1 + include_time
    offset = _HEADER.size
    if len(blob) < offset + 4 * n_extents:
        raise TruncatedFileError(f"Field file '{path}' is truncated inside its extents.")
    extents = struct.unpack_from(f"<{n_extents}I", blob, offset)
    offset += 4 * n_extents
    if any(e == 0 for e in extents):
        raise FormatError(f"Field file '{path}' has a zero extent: {extents}.")
    total = 1
    for e in extents:
        total *= e
        if total > _MAX_VALUES:
            raise ExtentOverflowError(f"Field file '{path}' extents {extents} overflow.")

    payload_len = len(blob) - offset
    if payload_len < 4 * total:
        raise TruncatedFileError(
            f"Field file '{path}' payload has {payload_len} bytes, extents need {4 * total}."
        )
    if payload_len > 4 * total:
        raise FormatError(f"Field file '{path}' has {payload_len - 4 * total} trailing bytes.")

    values = np.frombuffer(blob, dtype="<f4", count=total, offset=offset)
    values = values.astype(np.float64).reshape(extents)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"Field file '{path}' holds non-finite values.")
    if include_time:
        return [FieldTensor.from_external(frame) for frame in values]
    return FieldTensor.from_external(values)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def write_manifest(
    directory: Union[str, Path],
    settings: Dict[str, str],
    entries: Sequence[Tuple[str, int]],
) -> Path:
    """
    清单为纯文本: 先是全局 key=value 行，然后每条轨迹一行 `file=<name> seed=<seed>`。
    """
    out_dir = ensure_output_dir(directory)
    lines = [f"{key}={value}" for key, value in settings.items()]
    lines.extend(f"file={name} seed={seed}" for name, seed in entries)
    path = out_dir / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


def read_manifest(directory: Union[str, Path]) -> Tuple[Dict[str, str], List[Tuple[str, int]]]:
    path = Path(directory)
    if path.is_dir():
        path = path / MANIFEST_NAME
    settings: Dict[str, str] = {}
    entries: List[Tuple[str, int]] = []
    with open(require_readable(path), "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = dict(_split_token(tok, path, line_no) for tok in line.split())
            if "file" in tokens:
                seed_text = tokens.get("seed", "0")
                try:
                    seed = int(seed_text)
                except ValueError:
                    raise FormatError(
                        f"{path}:{line_no}: seed must be an integer, got '{seed_text}'."
                    ) from None
                entries.append((tokens["file"], seed))
            else:
                settings.update(tokens)
    return settings, entries


def _split_token(token: str, path: Path, line_no: int) -> Tuple[str, str]:
    if "=" not in token:
        raise FormatError(f"{path}:{line_no}: expected key=value, got '{token}'.")
    key, value = token.split("=", 1)
    return key.strip(), value.strip()


def load_dataset(directory: Union[str, Path]) -> List[TrajectoryDataset]:
    """按清单顺序读取目录下的全部轨迹。"""
    base = Path(directory)
    if base.is_file():
        base = base.parent
    settings, entries = read_manifest(base)
    dt = float(settings.get("dt", "1.0"))
    datasets: List[TrajectoryDataset] = []
    for name, seed in entries:
        frames = read_field_file(base / name)
        if isinstance(frames, FieldTensor):
            frames = [frames]
        metadata = dict(settings)
        metadata["seed"] = str(seed)
        datasets.append(TrajectoryDataset(frames, dt, metadata, base / name))
    logger.info(f"Loaded {len(datasets)} trajectories from '{base}'.")
    return datasets
