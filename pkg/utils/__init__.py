# utils/__init__.py

from .paths import ensure_output_dir, ensure_parent_dir, require_readable
from .counters import op_counter
from .workers import run_tasks, resolve_worker_count
