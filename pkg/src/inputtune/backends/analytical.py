"""Deterministic latency/throughput performance model of a synthetic GPU.

Per multiprocessor, the time to retire a kernel is

    cycles = warps_per_sm * max(t_arith(n) * i_arith, t_mem(n) * i_mem)
    t_arith(n) = max(alu_latency / n, alu_throughput)
    t_mem(n)   = max(mem_latency / n, mem_throughput)

where ``i_arith``/``i_mem`` are per-thread instruction counts and ``n`` the mean
occupancy in warps per multiprocessor. Latency hiding also benefits from
independent instructions inside a thread, so ``n`` in the latency terms is
multiplied by the thread's instruction-level parallelism (independent
accumulator chains for arithmetic, independent tile loads per stage for
memory). ``warps_per_sm / n`` is the (fractional) number of thread waves.

Instruction accounting, GEMM (CONV is the implicit-GEMM analog over N*P*Q x K
with a C*R*S reduction):

* the block stages a u-deep slice of A and B per iteration, for
  ``ceil(K / (u * k_g))`` iterations; its k_l thread groups each take u/k_l of
  the slice, so a thread issues ``m_s * n_s * u / k_l`` FMAs per iteration;
* k_s interleaved accumulators cost ``m_s * n_s * (k_s - 1)`` merge adds;
* a k_l > 1 block reduces partials through shared memory,
  ``REDUCTION_COST * m_s * n_s * log2(k_l)`` instructions;
* global loads: the staged slice spread across the block's threads; stores
  ``m_s * n_s`` per thread, ``ATOMIC_COST`` times more expensive when k_g > 1;
* an operand declared transposed is transposed while staged, one extra
  instruction per element the thread loads for it.

Memory instructions are scaled by element size (relative to 4 bytes) and f64
arithmetic runs at half rate. Only global loads/stores are counted as memory
instructions.
"""

from __future__ import annotations

from typing import Dict

import numpy as np

from ..param_space import (
    PARAM_NAMES,
    GemmInput,
    HardwareDescriptor,
    ProblemInput,
    ResourceUsage,
    Tuning,
    _resource_arrays,
)

REDUCTION_COST = 4.0
ATOMIC_COST = 4.0
ALU_FACTOR = {"f16": 1.0, "f32": 1.0, "f64": 2.0}


def _ceil_div(a, b):
    return -(-a // b)


def _blocks_resident(shared, regs, threads, hw: HardwareDescriptor):
    warps_per_block = _ceil_div(threads, hw.warp_size)
    by_shared = hw.max_shared_bytes_per_block // np.maximum(shared, 1)
    by_regs = hw.registers_per_multiprocessor // np.maximum(regs * warps_per_block * hw.warp_size, 1)
    by_warps = hw.max_warps_per_multiprocessor // warps_per_block
    return np.minimum(np.minimum(by_shared, by_regs), by_warps), warps_per_block


def occupancy(res: ResourceUsage, hw: HardwareDescriptor) -> float:
    """Resident warps per multiprocessor for a kernel with this resource usage.

    As many whole blocks as the shared memory, register file and warp slots
    allow, capped at ``max_warps_per_multiprocessor``.
    """
    blocks, wpb = _blocks_resident(
        np.int64(res.shared_bytes), np.int64(res.registers_per_thread), np.int64(res.threads_per_block), hw
    )
    return float(min(blocks * wpb, hw.max_warps_per_multiprocessor))


def occupancy_array(shared, regs, threads, hw: HardwareDescriptor) -> np.ndarray:
    blocks, wpb = _blocks_resident(shared, regs, threads, hw)
    return np.minimum(blocks * wpb, hw.max_warps_per_multiprocessor).astype(np.float64)


def t_arith(n, hw: HardwareDescriptor, ilp=1.0):
    """Cycles per arithmetic warp instruction at occupancy ``n``."""
    return np.maximum(hw.alu_latency / (np.asarray(n, dtype=np.float64) * ilp), hw.alu_throughput)


def t_mem(n, hw: HardwareDescriptor, mlp=1.0):
    """Cycles per memory warp instruction at occupancy ``n``."""
    return np.maximum(hw.mem_latency / (np.asarray(n, dtype=np.float64) * mlp), hw.mem_throughput)


def _as_columns(inp: ProblemInput, params: np.ndarray) -> Dict[str, np.ndarray]:
    params = np.atleast_2d(np.asarray(params, dtype=np.int64))
    return {name: params[:, i] for i, name in enumerate(PARAM_NAMES[inp.kind])}


def instruction_counts(inp: ProblemInput, params: np.ndarray, hw: HardwareDescriptor) -> Dict[str, np.ndarray]:
    """Per-thread instruction counts and launch geometry for each tuning row."""
    t = _as_columns(inp, params)
    shared, regs, threads = _resource_arrays(inp, t)
    if isinstance(inp, GemmInput):
        tile_s = t["m_s"] * t["n_s"]
        rows_l, cols_l = t["m_l"], t["n_l"]
        blocks = _ceil_div(inp.m, t["m_l"]) * _ceil_div(inp.n, t["n_l"]) * t["k_g"]
        reduction, split_l, split_g, split_s = inp.k, t["k_l"], t["k_g"], t["k_s"]
        transposed_a, transposed_b = inp.trans_a, inp.trans_b
        gather_cost = 0.0
    else:
        tile_s = t["k_s"] * t["p_s"] * t["q_s"] * t["n_s"]
        rows_l, cols_l = t["n_l"] * t["p_l"] * t["q_l"], t["k_l"]
        blocks = (
            _ceil_div(inp.n, t["n_l"]) * _ceil_div(inp.p, t["p_l"])
            * _ceil_div(inp.q, t["q_l"]) * _ceil_div(inp.k, t["k_l"]) * t["c_g"]
        )
        reduction, split_l, split_g, split_s = inp.c * inp.r * inp.s, t["c_l"], t["c_g"], t["c_s"]
        transposed_a = transposed_b = False
        # one indirection-table lookup per image element loaded
        gather_cost = 1.0

    u = t["u"].astype(np.float64)
    n_iter = _ceil_div(reduction, t["u"] * split_g).astype(np.float64)
    threads_f = threads.astype(np.float64)
    loads_a = rows_l * u / threads_f
    loads_b = cols_l * u / threads_f

    fma = tile_s * (u / split_l) * n_iter
    extra = tile_s * (split_s - 1) + REDUCTION_COST * tile_s * np.log2(split_l)
    extra = extra + n_iter * (loads_a * (transposed_a + gather_cost) + loads_b * transposed_b)
    i_arith = ALU_FACTOR[inp.dtype] * (fma + extra)

    stores = tile_s * np.where(split_g > 1, ATOMIC_COST, 1.0)
    i_mem = (inp.dtype_size / 4.0) * (n_iter * (loads_a + loads_b) + stores)

    return {
        "fma": fma,
        "i_arith": i_arith,
        "i_mem": i_mem,
        "ilp": (tile_s * split_s).astype(np.float64),
        "mlp": np.maximum(loads_a + loads_b, 1.0),
        "blocks": blocks.astype(np.int64),
        "threads_per_block": threads.astype(np.int64),
        "shared_bytes": shared,
        "registers": regs,
    }


def cycles_batch(inp: ProblemInput, params: np.ndarray, hw: HardwareDescriptor) -> np.ndarray:
    c = instruction_counts(inp, params, hw)
    occ = occupancy_array(c["shared_bytes"], c["registers"], c["threads_per_block"], hw)
    wpb = _ceil_div(c["threads_per_block"], hw.warp_size)
    total_warps = (c["blocks"] * wpb).astype(np.float64)
    sm_active = np.minimum(hw.num_multiprocessors, c["blocks"]).astype(np.float64)
    warps_per_sm = total_warps / sm_active
    n = np.minimum(occ, warps_per_sm)
    arith = t_arith(n, hw, c["ilp"]) * c["i_arith"]
    mem = t_mem(n, hw, c["mlp"]) * c["i_mem"]
    return warps_per_sm * np.maximum(arith, mem)


def measure_batch(inp: ProblemInput, params: np.ndarray, hw: HardwareDescriptor) -> np.ndarray:
    """GFLOPS for every tuning row (rows are assumed legal)."""
    seconds = cycles_batch(inp, params, hw) / hw.clock_hz
    return inp.flops / seconds / 1e9


def analytical_measure(inp: ProblemInput, tuning: Tuning, hw: HardwareDescriptor) -> float:
    return float(measure_batch(inp, np.asarray([tuning.as_tuple()]), hw)[0])


class AnalyticalBackend:
    """Noise-free synthetic device; the ground truth for pipeline tests."""

    name = "analytical"
    deterministic = True

    def __init__(self, hw: HardwareDescriptor):
        self.hw = hw

    def measure(self, inp: ProblemInput, tuning: Tuning) -> float:
        return analytical_measure(inp, tuning, self.hw)

    def measure_batch(self, inp: ProblemInput, params: np.ndarray) -> np.ndarray:
        return measure_batch(inp, params, self.hw)
