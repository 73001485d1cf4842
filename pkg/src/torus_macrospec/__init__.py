"""Homogenization, stable norms and macroscopic spectra of periodic metrics on tori."""

__version__ = "0.1.0"

from .metric_field import MetricField, make_metric, read_grid_file, write_grid_file  # noqa: E402
from .cell_solver import HomogenizedTensor, homogenize  # noqa: E402

__all__ = ["MetricField", "make_metric", "read_grid_file", "write_grid_file", "HomogenizedTensor", "homogenize"]
