# utils/workers.py

import logging
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def resolve_worker_count(requested: Optional[int] = None) -> int:
    """
    决定线程数: 显式参数 > 环境变量 FACT_THREADS > 1。
    """
    if requested is not None and requested > 0:
        return requested
    env_value = os.getenv("FACT_THREADS", "").strip()
    if env_value:
        try:
            value = int(env_value)
            if value > 0:
                return value
        except ValueError:
            logger.warning(f"Ignoring invalid FACT_THREADS value '{env_value}'.")
    return 1


def run_tasks(
    task: Callable[[T], R],
    items: Sequence[T],
    max_workers: Optional[int] = None,
) -> List[R]:
    """
    在线程池中对每个输入执行 task，结果顺序与输入顺序一致。

    任何一个任务失败时记录完整的 traceback 并把异常重新抛出。
    """
    workers = resolve_worker_count(max_workers)
    name = getattr(task, "__name__", repr(task))
    if workers == 1 or len(items) <= 1:
        results: List[R] = []
        for item in items:
            results.append(_run_one(task, name, item))
        return results

    logger.debug(f"Running '{name}' on {len(items)} items with {workers} workers.")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(_run_one, task, name, item) for item in items]
        return [f.result() for f in futures]


def _run_one(task: Callable[[T], R], name: str, item: T) -> R:
    try:
        return task(item)
    except Exception:
        tb_str = traceback.format_exc()
        logger.error(f"An error occurred in worker task '{name}':\n{tb_str}")
        raise
