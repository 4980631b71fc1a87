# utils/paths.py

import os
from pathlib import Path
from typing import Union

PathLike = Union[str, Path]


def ensure_output_dir(directory: PathLike) -> Path:
    """
    创建输出目录 (若不存在) 并确认可写。

    Raises:
        OSError: 目录无法创建或不可写，信息中包含路径。
    """
    path = Path(directory)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"Cannot create output directory '{path}': {e}") from e
    if not os.access(path, os.W_OK):
        raise OSError(f"Output directory '{path}' is not writable.")
    return path


def ensure_parent_dir(file_path: PathLike) -> Path:
    """确保文件的父目录存在，返回文件路径本身。"""
    path = Path(file_path)
    ensure_output_dir(path.parent if str(path.parent) else Path("."))
    return path


def require_readable(file_path: PathLike) -> Path:
    path = Path(file_path)
    if not path.exists():
        raise OSError(f"Path '{path}' does not exist.")
    if not os.access(path, os.R_OK):
        raise OSError(f"Path '{path}' is not readable.")
    return path
