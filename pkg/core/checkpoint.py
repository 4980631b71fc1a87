# core/checkpoint.py

import logging
import struct
from pathlib import Path
from typing import List, Set, Tuple, Union

import numpy as np

from utils.paths import ensure_parent_dir
from .errors import BadMagicError, FormatError, TruncatedFileError, VersionMismatchError
from .model import FactFormerConfig, FactFormerModel

logger = logging.getLogger(__name__)


class CheckpointHandler:
    """
    负责模型检查点的二进制读写。

    文件布局 (小端):
    - 魔数 "FFCKPT01" (8 字节) + 格式版本 (u8)
    - 配置块: u32 条目数，每条 u16 键长、键、u32 值长、值 (UTF-8 文本)
    - 参数块: u32 参数个数，每个参数 u16 名字长度、名字、u8 秩、秩个 u32 维度、f64 数据

    写入顺序固定，因此 保存→读取→保存 得到逐字节相同的文件。
    """

    _MAGIC: bytes = b"FFCKPT01"
    _VERSION: int = 1

    @staticmethod
    def encode(model: FactFormerModel) -> bytes:
        chunks: List[bytes] = [CheckpointHandler._MAGIC, struct.pack("<B", CheckpointHandler._VERSION)]
        items = model.config.to_items()
        chunks.append(struct.pack("<I", len(items)))
        for key, value in items:
            key_bytes, value_bytes = key.encode("utf-8"), value.encode("utf-8")
            chunks.append(struct.pack("<H", len(key_bytes)) + key_bytes)
            chunks.append(struct.pack("<I", len(value_bytes)) + value_bytes)
        params = model.parameters()
        chunks.append(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            chunks.append(struct.pack("<H", len(name)) + name)
            chunks.append(struct.pack("<B", p.value.ndim))
            chunks.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return b"".join(chunks)

    @staticmethod
    def decode(blob: bytes) -> FactFormerModel:
        reader = _Reader(blob)
        magic = reader.take(len(CheckpointHandler._MAGIC))
        if magic != CheckpointHandler._MAGIC:
            raise BadMagicError(f"Not a checkpoint file (magic {magic!r}).")
        (version,) = reader.unpack("<B")
        if version != CheckpointHandler._VERSION:
            raise VersionMismatchError(
                f"Checkpoint format version {version} is not supported "
                f"(expected {CheckpointHandler._VERSION})."
            )
        (n_items,) = reader.unpack("<I")
        items: List[Tuple[str, str]] = []
        for _ in range(n_items):
            (key_len,) = reader.unpack("<H")
            key = reader.text(key_len)
            (value_len,) = reader.unpack("<I")
            items.append((key, reader.text(value_len)))
        try:
            config = FactFormerConfig.from_items(items)
        except ValueError as e:
            # 嵌入的配置本身属于文件内容，坏值按格式错误处理
            raise FormatError(f"Checkpoint config block is invalid: {e}") from e
        model = FactFormerModel(config)
        expected = model.named_parameters()

        (n_params,) = reader.unpack("<I")
        if n_params != len(expected):
            raise FormatError(
                f"Checkpoint holds {n_params} parameters, the embedded config defines {len(expected)}."
            )
        seen: Set[str] = set()
        for _ in range(n_params):
            (name_len,) = reader.unpack("<H")
            name = reader.text(name_len)
            if name in seen:
                raise FormatError(f"Checkpoint parameter '{name}' appears more than once.")
            seen.add(name)
            (rank,) = reader.unpack("<B")
            shape = reader.unpack(f"<{rank}I") if rank else ()
            param = expected.get(name)
            if param is None:
                raise FormatError(f"Checkpoint parameter '{name}' is unknown to the embedded config.")
            if tuple(shape) != param.shape:
                raise FormatError(
                    f"Parameter '{name}' has shape {tuple(shape)} in the file, "
                    f"config expects {param.shape}."
                )
            count = int(np.prod(shape)) if shape else 1
            payload = reader.take(8 * count)
            param.value[...] = np.frombuffer(payload, dtype="<f8").reshape(param.shape)
        missing = sorted(set(expected) - seen)
        if missing:
            raise FormatError(f"Checkpoint is missing parameters: {missing}.")
        if not reader.at_end():
            raise FormatError(f"Checkpoint has {reader.remaining()} trailing bytes.")
        return model


class _Reader:
    def __init__(self, blob: bytes):
        self._blob = blob
        self._offset = 0

    def take(self, count: int) -> bytes:
        end = self._offset + count
        if end > len(self._blob):
            raise TruncatedFileError(
                f"Checkpoint truncated: needed {count} bytes at offset {self._offset}, "
                f"file has {len(self._blob)}."
            )
        chunk = self._blob[self._offset:end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, count: int) -> str:
        start = self._offset
        try:
            return self.take(count).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"Checkpoint has invalid UTF-8 text at offset {start}.") from e

    def remaining(self) -> int:
        return len(self._blob) - self._offset

    def at_end(self) -> bool:
        return self._offset == len(self._blob)


def save_checkpoint(model: FactFormerModel, path: Union[str, Path]) -> Path:
    target = ensure_parent_dir(path)
    blob = CheckpointHandler.encode(model)
    try:
        with open(target, "wb") as f:
            f.write(blob)
    except IOError as e:
        logger.error(f"Failed to write checkpoint '{target}': {e}", exc_info=True)
        raise
    logger.info(f"Checkpoint saved to '{target}' ({len(blob)} bytes).")
    return target


def load_checkpoint(path: Union[str, Path]) -> FactFormerModel:
    with open(path, "rb") as f:
        blob = f.read()
    model = CheckpointHandler.decode(blob)
    logger.info(f"Checkpoint loaded from '{path}'.")
    return model
