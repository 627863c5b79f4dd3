"""Input and tuning spaces for GEMM and CONV kernels, resource estimates and legality.

A tuning vector is legal for a device when its estimated resource usage fits the
device's limits and the tile/split factors line up. Everything here is pure and
operates either on one (input, tuning) pair or, for the hot paths, on an integer
array with one tuning vector per row.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE_SIZES = {"f16": 2, "f32": 4, "f64": 8}
NUMPY_DTYPES = {"f16": np.float16, "f32": np.float32, "f64": np.float64}

GEMM_PARAMS = ("m_s", "n_s", "m_l", "n_l", "u", "k_s", "k_l", "k_g")
CONV_PARAMS = ("k_s", "p_s", "q_s", "n_s", "k_l", "p_l", "q_l", "n_l", "u", "c_s", "c_l", "c_g")

# (thread tile, block tile) pairs that must divide
_GEMM_TILE_PAIRS = (("m_s", "m_l"), ("n_s", "n_l"))
_CONV_TILE_PAIRS = (("k_s", "k_l"), ("p_s", "p_l"), ("q_s", "q_l"), ("n_s", "n_l"))

FEATURE_VERSIONS = {"gemm": "gemm-v1", "conv": "conv-v1"}
GEMM_FEATURES = ("m", "n", "k", "dtype_size", "trans_a", "trans_b") + GEMM_PARAMS
CONV_FEATURES = ("n", "p", "q", "k", "c", "r", "s", "dtype_size") + CONV_PARAMS

# fixed per-thread register overhead (indices, pointers, loop counters)
REGISTER_OVERHEAD = 8
MAX_TUNING_VALUE = 256

REJECTION_ORDER = ("divisibility", "shared-memory", "registers", "threads", "warp-granularity")


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


def _check_dtype(dtype: str) -> None:
    if dtype not in DTYPE_SIZES:
        raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPE_SIZES)}")


@dataclass(frozen=True)
class GemmInput:
    """C = op(A) op(B) with op(A) of shape m x k and op(B) of shape k x n."""

    m: int
    n: int
    k: int
    dtype: str = "f32"
    trans_a: bool = False
    trans_b: bool = False

    kind = "gemm"

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise ValueError(f"GEMM dimensions must be >= 1, got {(self.m, self.n, self.k)}")
        _check_dtype(self.dtype)

    @property
    def dtype_size(self) -> int:
        return DTYPE_SIZES[self.dtype]

    @property
    def flops(self) -> float:
        return 2.0 * self.m * self.n * self.k

    def key(self) -> str:
        return (
            f"gemm-{self.m}x{self.n}x{self.k}-{self.dtype}"
            f"-{'T' if self.trans_a else 'N'}{'T' if self.trans_b else 'N'}"
        )


@dataclass(frozen=True)
class ConvInput:
    """Valid-mode, unit-stride multi-channel convolution.

    Images are C x H x W x N, filters C x R x S x K and the output K x P x Q x N,
    with H = P + R - 1 and W = Q + S - 1.
    """

    n: int
    p: int
    q: int
    k: int
    c: int
    r: int
    s: int
    dtype: str = "f32"

    kind = "conv"

    def __post_init__(self):
        dims = (self.n, self.p, self.q, self.k, self.c, self.r, self.s)
        if min(dims) < 1:
            raise ValueError(f"CONV dimensions must be >= 1, got {dims}")
        _check_dtype(self.dtype)

    @property
    def h(self) -> int:
        return self.p + self.r - 1

    @property
    def w(self) -> int:
        return self.q + self.s - 1

    @property
    def dtype_size(self) -> int:
        return DTYPE_SIZES[self.dtype]

    @property
    def flops(self) -> float:
        return 2.0 * self.n * self.p * self.q * self.k * self.c * self.r * self.s

    def key(self) -> str:
        return (
            f"conv-n{self.n}p{self.p}q{self.q}k{self.k}c{self.c}r{self.r}s{self.s}-{self.dtype}"
        )


class _TuningMixin:
    PARAMS: Tuple[str, ...] = ()

    def __post_init__(self):
        for name in self.PARAMS:
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise TypeError(f"{name} must be an integer, got {v!r}")
            if not _is_pow2(int(v)) or v > MAX_TUNING_VALUE:
                raise ValueError(f"{name}={v} must be a power of two in [1, {MAX_TUNING_VALUE}]")
            object.__setattr__(self, name, int(v))

    def as_tuple(self) -> Tuple[int, ...]:
        return tuple(getattr(self, p) for p in self.PARAMS)

    def as_dict(self) -> Dict[str, int]:
        return {p: getattr(self, p) for p in self.PARAMS}

    @classmethod
    def from_sequence(cls, values: Sequence[int]):
        return cls(*(int(v) for v in values))

    @classmethod
    def ones(cls):
        return cls(*([1] * len(cls.PARAMS)))


@dataclass(frozen=True)
class GemmTuning(_TuningMixin):
    m_s: int
    n_s: int
    m_l: int
    n_l: int
    u: int
    k_s: int
    k_l: int
    k_g: int

    PARAMS = GEMM_PARAMS

    def __post_init__(self):
        _TuningMixin.__post_init__(self)


@dataclass(frozen=True)
class ConvTuning(_TuningMixin):
    k_s: int
    p_s: int
    q_s: int
    n_s: int
    k_l: int
    p_l: int
    q_l: int
    n_l: int
    u: int
    c_s: int
    c_l: int
    c_g: int

    PARAMS = CONV_PARAMS

    def __post_init__(self):
        _TuningMixin.__post_init__(self)


ProblemInput = Union[GemmInput, ConvInput]
Tuning = Union[GemmTuning, ConvTuning]

TUNING_TYPES = {"gemm": GemmTuning, "conv": ConvTuning}
INPUT_TYPES = {"gemm": GemmInput, "conv": ConvInput}
PARAM_NAMES = {"gemm": GEMM_PARAMS, "conv": CONV_PARAMS}


def tuning_type(kind: str):
    try:
        return TUNING_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown problem kind {kind!r}") from None


@dataclass(frozen=True)
class HardwareDescriptor:
    """Resource limits and latency/throughput constants of a (possibly synthetic) device.

    Latencies and throughputs are in cycles per warp instruction on one
    multiprocessor. Registers per multiprocessor are taken to be
    ``max_registers_per_thread * max_threads_per_block`` and shared memory per
    multiprocessor equals the per-block limit, so any legal block fits on a
    multiprocessor at least once.
    """

    max_shared_bytes_per_block: int
    max_registers_per_thread: int
    max_threads_per_block: int
    max_warps_per_multiprocessor: int
    warp_size: int
    alu_latency: float
    alu_throughput: float
    mem_latency: float
    mem_throughput: float
    clock_hz: float
    num_multiprocessors: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                raise ValueError(f"hardware field {f.name} must be a positive number, got {v!r}")
        if self.alu_latency < self.alu_throughput:
            raise ValueError("alu_latency must be >= alu_throughput")
        if self.mem_latency < self.mem_throughput:
            raise ValueError("mem_latency must be >= mem_throughput")
        if self.max_threads_per_block > self.max_warps_per_multiprocessor * self.warp_size:
            raise ValueError("a maximal block must fit on one multiprocessor")

    @property
    def registers_per_multiprocessor(self) -> int:
        return self.max_registers_per_thread * self.max_threads_per_block

    @property
    def peak_gflops(self) -> float:
        return 2.0 * self.num_multiprocessors * self.warp_size * self.clock_hz / self.alu_throughput / 1e9

    @classmethod
    def from_dict(cls, doc: Mapping) -> "HardwareDescriptor":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        missing = names - set(doc)
        if unknown:
            raise ValueError(f"unknown hardware fields: {sorted(unknown)}")
        if missing:
            raise ValueError(f"missing hardware fields: {sorted(missing)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HardwareDescriptor":
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: hardware descriptor must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# Maxwell-class synthetic device: 22 SMs at 1.075 GHz, 128 FMA lanes per SM.
DEFAULT_HW = HardwareDescriptor(
    max_shared_bytes_per_block=49152,
    max_registers_per_thread=64,
    max_threads_per_block=1024,
    max_warps_per_multiprocessor=64,
    warp_size=32,
    alu_latency=6.0,
    alu_throughput=0.25,
    mem_latency=400.0,
    mem_throughput=1.0,
    clock_hz=1.075e9,
    num_multiprocessors=22,
)


@dataclass(frozen=True)
class ResourceUsage:
    shared_bytes: int
    registers_per_thread: int
    threads_per_block: int


def _resource_arrays(inp: ProblemInput, t: Mapping[str, np.ndarray]):
    d = inp.dtype_size
    if inp.kind == "gemm":
        shared = 2 * d * (t["m_l"] * t["u"] + t["u"] * t["n_l"])
        threads = (t["m_l"] // t["m_s"]) * (t["n_l"] // t["n_s"]) * t["k_l"]
        regs = t["m_s"] * t["n_s"] + t["m_s"] + t["n_s"] + REGISTER_OVERHEAD
    else:
        npq_l = t["n_l"] * t["p_l"] * t["q_l"]
        npq_s = t["n_s"] * t["p_s"] * t["q_s"]
        shared = 2 * d * (npq_l * t["u"] + t["u"] * t["k_l"])
        threads = (
            (t["k_l"] // t["k_s"]) * (t["p_l"] // t["p_s"])
            * (t["q_l"] // t["q_s"]) * (t["n_l"] // t["n_s"]) * t["c_l"]
        )
        regs = t["k_s"] * npq_s + npq_s + t["k_s"] + REGISTER_OVERHEAD
    return shared, regs, threads


def estimate_resources(inp: ProblemInput, tuning: Tuning) -> ResourceUsage:
    """Shared memory (double buffered), registers per thread and threads per block."""
    shared, regs, threads = _resource_arrays(inp, tuning.as_dict())
    return ResourceUsage(int(shared), int(regs), int(threads))


@dataclass(frozen=True)
class LegalityVerdict:
    accepted: bool
    reason: Optional[str] = None

    def __bool__(self):
        return self.accepted


ACCEPTED = LegalityVerdict(True)


def _divisibility_ok(kind: str, t: Mapping[str, np.ndarray]):
    pairs = _GEMM_TILE_PAIRS if kind == "gemm" else _CONV_TILE_PAIRS
    ok = True
    for small, large in pairs:
        ok = ok & (t[large] % t[small] == 0)
    # the staged u-deep slice is split across the block-level groups and then
    # across each thread's interleaved accumulators
    if kind == "gemm":
        split = t["k_s"] * t["k_l"]
    else:
        split = t["c_s"] * t["c_l"]
    return ok & (t["u"] % split == 0)


def tiles_divide(inp: ProblemInput, tuning: Tuning) -> bool:
    """Structural check alone: thread tiles divide block tiles and splits divide u."""
    if tuning.PARAMS != PARAM_NAMES[inp.kind]:
        raise TypeError(f"{type(tuning).__name__} does not match a {inp.kind} input")
    return bool(_divisibility_ok(inp.kind, tuning.as_dict()))


def _verdict_arrays(inp: ProblemInput, t: Mapping[str, np.ndarray], hw: HardwareDescriptor):
    """Per-constraint pass masks in rejection order."""
    shared, regs, threads = _resource_arrays(inp, t)
    return (
        ("divisibility", _divisibility_ok(inp.kind, t)),
        ("shared-memory", shared <= hw.max_shared_bytes_per_block),
        ("registers", regs <= hw.max_registers_per_thread),
        ("threads", threads <= hw.max_threads_per_block),
        ("warp-granularity", threads % hw.warp_size == 0),
    )


def is_legal(inp: ProblemInput, tuning: Tuning, hw: HardwareDescriptor) -> LegalityVerdict:
    """Accept the pair or name the first failing constraint (see ``REJECTION_ORDER``)."""
    if tuning.PARAMS != PARAM_NAMES[inp.kind]:
        raise TypeError(f"{type(tuning).__name__} does not match a {inp.kind} input")
    t = tuning.as_dict()
    for reason, ok in _verdict_arrays(inp, t, hw):
        if not bool(ok):
            return LegalityVerdict(False, reason)
    return ACCEPTED


def legal_mask(inp: ProblemInput, params: np.ndarray, hw: HardwareDescriptor) -> np.ndarray:
    """Vectorised legality over an (n, n_params) integer array of tuning vectors."""
    params = np.asarray(params, dtype=np.int64)
    names = PARAM_NAMES[inp.kind]
    if params.ndim != 2 or params.shape[1] != len(names):
        raise ValueError(f"expected shape (n, {len(names)}), got {params.shape}")
    t = {name: params[:, i] for i, name in enumerate(names)}
    mask = np.ones(len(params), dtype=bool)
    for _, ok in _verdict_arrays(inp, t, hw):
        mask &= ok
    return mask


class Legality:
    """Legality predicate for a fixed input and device.

    Callable on one tuning vector (a dataclass or a plain sequence in parameter
    order); ``mask`` evaluates many at once.
    """

    def __init__(self, inp: ProblemInput, hw: HardwareDescriptor):
        self.input = inp
        self.hw = hw
        self.params = PARAM_NAMES[inp.kind]

    def __call__(self, tuning) -> bool:
        if not isinstance(tuning, (GemmTuning, ConvTuning)):
            tuning = tuning_type(self.input.kind).from_sequence(tuning)
        return is_legal(self.input, tuning, self.hw).accepted

    def mask(self, params: np.ndarray) -> np.ndarray:
        return legal_mask(self.input, params, self.hw)


Bounds = Dict[str, List[int]]


def default_bounds(kind: str, max_value: int = 16) -> Bounds:
    """Powers of two in [1, max_value] for every tuning parameter."""
    values = [1 << i for i in range(int(math.log2(max_value)) + 1)]
    return {name: list(values) for name in PARAM_NAMES[kind]}


def validate_bounds(kind: str, bounds: Mapping[str, Sequence[int]]) -> Bounds:
    names = PARAM_NAMES[kind]
    if set(bounds) != set(names):
        missing = sorted(set(names) - set(bounds))
        extra = sorted(set(bounds) - set(names))
        raise ValueError(f"bounds for {kind} must name exactly {list(names)} (missing {missing}, unknown {extra})")
    out = {}
    for name in names:
        vals = [int(v) for v in bounds[name]]
        if not vals:
            raise ValueError(f"bounds for {name} are empty")
        if vals != sorted(set(vals)):
            raise ValueError(f"bounds for {name} must be sorted and unique: {vals}")
        if not all(_is_pow2(v) and v <= MAX_TUNING_VALUE for v in vals):
            raise ValueError(f"bounds for {name} must be powers of two <= {MAX_TUNING_VALUE}: {vals}")
        out[name] = vals
    return out


def load_bounds(path: Union[str, Path], kind: str) -> Bounds:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: bounds must be a JSON object")
    return validate_bounds(kind, doc)


def _product_blocks(value_lists: Sequence[Sequence[int]], max_rows: int = 1 << 16) -> Iterator[np.ndarray]:
    """Cartesian product in lexicographic order, yielded as row blocks.

    The trailing parameters are materialised together, the leading ones iterated.
    """
    split = len(value_lists)
    rows = 1
    while split > 0 and rows * len(value_lists[split - 1]) <= max_rows:
        split -= 1
        rows *= len(value_lists[split])
    tail = value_lists[split:]
    if tail:
        grids = np.meshgrid(*[np.asarray(v, dtype=np.int64) for v in tail], indexing="ij")
        tail_block = np.stack([g.ravel() for g in grids], axis=1)
    else:
        tail_block = np.zeros((1, 0), dtype=np.int64)
    for head in itertools.product(*value_lists[:split]):
        block = np.empty((len(tail_block), len(value_lists)), dtype=np.int64)
        block[:, :split] = head
        block[:, split:] = tail_block
        yield block


def enumerate_legal_array(inp: ProblemInput, hw: HardwareDescriptor, bounds: Mapping[str, Sequence[int]]) -> np.ndarray:
    """All legal tuning vectors within ``bounds`` as rows, in lexicographic order."""
    bounds = validate_bounds(inp.kind, bounds)
    lists = [bounds[name] for name in PARAM_NAMES[inp.kind]]
    chunks = [b[legal_mask(inp, b, hw)] for b in _product_blocks(lists)]
    if not chunks:
        return np.zeros((0, len(lists)), dtype=np.int64)
    return np.concatenate(chunks, axis=0)


def enumerate_legal(inp: ProblemInput, hw: HardwareDescriptor, bounds: Mapping[str, Sequence[int]]) -> Iterator[Tuning]:
    cls = tuning_type(inp.kind)
    bounds = validate_bounds(inp.kind, bounds)
    lists = [bounds[name] for name in PARAM_NAMES[inp.kind]]
    for block in _product_blocks(lists):
        for row in block[legal_mask(inp, block, hw)]:
            yield cls.from_sequence(row)


def input_features(inp: ProblemInput) -> np.ndarray:
    if inp.kind == "gemm":
        return np.array(
            [inp.m, inp.n, inp.k, inp.dtype_size, int(inp.trans_a) + 1, int(inp.trans_b) + 1],
            dtype=np.float64,
        )
    return np.array([inp.n, inp.p, inp.q, inp.k, inp.c, inp.r, inp.s, inp.dtype_size], dtype=np.float64)


def encode_features(inp: ProblemInput, tuning: Tuning) -> np.ndarray:
    """Input characteristics followed by the tuning vector; every entry is >= 1.

    Transposition flags are offset to {1, 2} so the log transform stays finite.
    """
    return np.concatenate([input_features(inp), np.asarray(tuning.as_tuple(), dtype=np.float64)])


def encode_batch(inp: ProblemInput, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    head = np.broadcast_to(input_features(inp), (len(params), len(input_features(inp))))
    return np.concatenate([head, params], axis=1)


def feature_length(kind: str) -> int:
    return len(GEMM_FEATURES) if kind == "gemm" else len(CONV_FEATURES)
