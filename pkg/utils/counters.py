# utils/counters.py

import logging
import threading
from contextlib import contextmanager
from typing import Dict, Iterator

logger = logging.getLogger(__name__)


class OpCounter:
    """
    一个单例，用于统计各类核心运算的乘加次数 (multiply-add)。

    基准测试和复杂度检查依赖这些计数器，而不是墙钟时间。
    计数在多线程下由锁保护。
    """

    _instance = None

    _counts: Dict[str, int]
    _lock: threading.Lock
    _initialized: bool

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(OpCounter, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._counts = {}
        self._lock = threading.Lock()
        self._initialized = True

    def add(self, category: str, count: int) -> None:
        with self._lock:
            self._counts[category] = self._counts.get(category, 0) + int(count)

    def get(self, category: str) -> int:
        with self._lock:
            return self._counts.get(category, 0)

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()

    @contextmanager
    def measuring(self) -> Iterator[Dict[str, int]]:
        """
        在 with 块内从零开始计数，退出时把结果写入返回的字典。
        """
        result: Dict[str, int] = {}
        self.reset()
        try:
            yield result
        finally:
            result.update(self.snapshot())
            logger.debug(f"Counted multiply-adds: {result}")


# 全局实例
op_counter = OpCounter()
