"""Measurement backends: an analytical synthetic device and a tiled CPU executor."""

from typing import Protocol

import numpy as np

from ..param_space import ProblemInput, Tuning
from .analytical import AnalyticalBackend, analytical_measure, occupancy
from .cpu import (
    CpuBackend,
    IllegalTuning,
    IndirectionTable,
    ShapeError,
    build_indirection_table,
    cpu_execute_conv,
    cpu_execute_gemm,
)
from .tensorio import read_tensor, write_tensor


class MeasurementBackend(Protocol):
    name: str

    def measure(self, inp: ProblemInput, tuning: Tuning) -> float:
        ...

    def measure_batch(self, inp: ProblemInput, params: np.ndarray) -> np.ndarray:
        ...


def make_backend(name: str, hw, seed: int = 0) -> MeasurementBackend:
    if name == "analytical":
        return AnalyticalBackend(hw)
    if name == "cpu":
        return CpuBackend(seed=seed)
    raise ValueError(f"unknown backend {name!r} (expected analytical or cpu)")


__all__ = [
    "AnalyticalBackend",
    "CpuBackend",
    "IllegalTuning",
    "IndirectionTable",
    "MeasurementBackend",
    "ShapeError",
    "analytical_measure",
    "build_indirection_table",
    "cpu_execute_conv",
    "cpu_execute_gemm",
    "make_backend",
    "occupancy",
    "read_tensor",
    "write_tensor",
]
