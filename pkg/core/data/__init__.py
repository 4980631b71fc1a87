# core/data/__init__.py

# 导出玩具 PDE 数据的生成函数
from .advection import (
    DatasetConfig,
    SpectralField,
    evolve_spectrum,
    exact_solution,
    generate_dataset,
    generate_trajectory,
    sample_initial,
)

# 导出场文件与清单的读写函数
from .field_file import (
    TrajectoryDataset,
    load_dataset,
    read_field_file,
    read_manifest,
    write_field_file,
    write_manifest,
)
