"""Dataset generation, runtime inference and persistence.

Generation samples an input from an input distribution, a legal tuning from the
categorical sampler, measures the pair on a backend and records it. Inference
ranks every legal tuning of one input with a performance model and re-measures
the best few.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .param_space import (
    DEFAULT_HW,
    FEATURE_VERSIONS,
    INPUT_TYPES,
    PARAM_NAMES,
    ConvInput,
    GemmInput,
    HardwareDescriptor,
    Legality,
    ProblemInput,
    Tuning,
    encode_batch,
    enumerate_legal_array,
    input_features,
    tuning_type,
)
from .sampler import CategoricalModel, sample_many

log = logging.getLogger(__name__)

SCHEMA_VERSION = "dataset-v1"
RESULT_VERSION = "result-v1"
CACHE_ENV = "INPUTTUNE_CACHE_DIR"
DEFAULT_TOP_K = 100
REBENCH_REPEATS = 3

INPUT_COLUMNS = {
    "gemm": ("m", "n", "k", "dtype", "trans_a", "trans_b"),
    "conv": ("n", "p", "q", "k", "c", "r", "s", "dtype"),
}
COLUMNS = {kind: INPUT_COLUMNS[kind] + PARAM_NAMES[kind] + ("gflops", "backend") for kind in INPUT_COLUMNS}


class DatasetFormatError(ValueError):
    pass


class EmptySearchSpace(RuntimeError):
    pass


class GenerationStalled(RuntimeError):
    """The input distribution and sampler cannot supply enough distinct pairs."""


# ---------------------------------------------------------------- inputs


def input_to_dict(inp: ProblemInput) -> Dict[str, object]:
    return {"kind": inp.kind, **{c: getattr(inp, c) for c in INPUT_COLUMNS[inp.kind]}}


def input_from_dict(doc: Mapping, kind: Optional[str] = None) -> ProblemInput:
    kind = doc.get("kind", kind)
    if kind not in INPUT_TYPES:
        raise ValueError(f"unknown problem kind {kind!r}")
    fields = {c: doc[c] for c in INPUT_COLUMNS[kind] if c in doc}
    for c in INPUT_COLUMNS[kind]:
        if c in ("dtype", "trans_a", "trans_b"):
            continue
        if c not in fields:
            raise ValueError(f"{kind} input is missing {c!r}")
        fields[c] = int(fields[c])
    return INPUT_TYPES[kind](**fields)


def _log_uniform_int(rng: np.random.Generator, lo: float, hi: float, size: int) -> np.ndarray:
    return np.rint(np.exp(rng.uniform(math.log(lo), math.log(hi), size=size))).astype(np.int64)


class InputDistribution:
    """Something that draws a list of problem inputs."""

    kind: str

    def draw(self, rng: np.random.Generator, size: int) -> List[ProblemInput]:
        raise NotImplementedError


@dataclass
class WeightedInputs(InputDistribution):
    inputs: Sequence[ProblemInput]
    weights: Optional[Sequence[float]] = None

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("need at least one input")
        kinds = {i.kind for i in self.inputs}
        if len(kinds) != 1:
            raise ValueError("inputs must all be of one kind")
        self.kind = kinds.pop()
        if self.weights is not None and len(self.weights) != len(self.inputs):
            raise ValueError("one weight per input")

    def draw(self, rng, size):
        p = None
        if self.weights is not None:
            p = np.asarray(self.weights, dtype=np.float64)
            p = p / p.sum()
        idx = rng.choice(len(self.inputs), size=size, p=p)
        return [self.inputs[i] for i in idx]


@dataclass
class GemmFamilies(InputDistribution):
    """GEMM shapes with the aspect ratios of common workloads.

    ``square``: M = N = K; ``skinny``: large M and K, small N (training batch);
    ``deep``: small M = N, very deep K; ``panel``: large M = N, thin K;
    ``loguniform``: every dimension independently log-uniform.
    """

    families: Tuple[str, ...] = ("square", "skinny", "deep", "panel", "loguniform")
    dtypes: Tuple[str, ...] = ("f32",)
    dtype_weights: Optional[Tuple[float, ...]] = None
    kind: str = "gemm"

    FAMILIES = ("square", "skinny", "deep", "panel", "loguniform")

    def __post_init__(self):
        unknown = set(self.families) - set(self.FAMILIES)
        if unknown:
            raise ValueError(f"unknown GEMM families {sorted(unknown)}")

    def _one(self, rng: np.random.Generator, family: str) -> GemmInput:
        u = lambda lo, hi: int(_log_uniform_int(rng, lo, hi, 1)[0])
        flip = lambda: bool(rng.integers(0, 2))
        if family == "square":
            s = u(128, 4096)
            m, n, k, ta, tb = s, s, s, False, True
        elif family == "skinny":
            m, n, k, ta, tb = u(512, 4096), u(8, 256), u(512, 4096), flip(), False
        elif family == "deep":
            s = u(16, 512)
            m, n, k, ta, tb = s, s, u(8192, 131072), False, True
        elif family == "panel":
            s = u(256, 8192)
            m, n, k, ta, tb = s, s, u(16, 128), False, True
        else:
            m, n, k, ta, tb = u(1, 8192), u(1, 8192), u(1, 65536), flip(), flip()
        p = None if self.dtype_weights is None else np.asarray(self.dtype_weights) / np.sum(self.dtype_weights)
        dtype = self.dtypes[rng.choice(len(self.dtypes), p=p)]
        return GemmInput(m, n, k, dtype, ta, tb)

    def draw(self, rng, size):
        fam = rng.integers(0, len(self.families), size=size)
        return [self._one(rng, self.families[f]) for f in fam]


@dataclass
class ConvLogUniform(InputDistribution):
    """Convolution shapes with every dimension log-uniform in its range."""

    ranges: Mapping[str, Tuple[int, int]] = field(
        default_factory=lambda: {
            "n": (1, 32), "p": (4, 256), "q": (4, 256), "k": (1, 512),
            "c": (1, 1024), "r": (1, 7), "s": (1, 7),
        }
    )
    dtypes: Tuple[str, ...] = ("f32",)
    kind: str = "conv"

    def draw(self, rng, size):
        cols = {d: _log_uniform_int(rng, *self.ranges[d], size) for d in ("n", "p", "q", "k", "c", "r", "s")}
        dt = rng.integers(0, len(self.dtypes), size=size)
        return [
            ConvInput(*(int(cols[d][i]) for d in ("n", "p", "q", "k", "c", "r", "s")), dtype=self.dtypes[dt[i]])
            for i in range(size)
        ]


@dataclass
class Mixture(InputDistribution):
    parts: Sequence[Tuple[InputDistribution, float]]

    def __post_init__(self):
        kinds = {d.kind for d, _ in self.parts}
        if len(kinds) != 1:
            raise ValueError("mixture components must share one kind")
        self.kind = kinds.pop()

    def draw(self, rng, size):
        w = np.asarray([p for _, p in self.parts], dtype=np.float64)
        which = rng.choice(len(self.parts), size=size, p=w / w.sum())
        drawn = [iter(d.draw(rng, int(np.sum(which == j)))) for j, (d, _) in enumerate(self.parts)]
        return [next(drawn[j]) for j in which]


def _data_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def load_tasks(path: Union[str, Path, None] = None, kind: str = "gemm") -> List[Tuple[str, ProblemInput]]:
    """Named inputs from a task file; the bundled benchmark shapes by default."""
    path = Path(path) if path is not None else _data_path(f"{kind}_tasks.json")
    doc = json.loads(path.read_text())
    kind = doc.get("kind", kind)
    return [(t.get("name", f"task{i}"), input_from_dict(t, kind)) for i, t in enumerate(doc["tasks"])]


def training_distribution(kind: str, dtypes: Tuple[str, ...] = ("f32",)) -> InputDistribution:
    """Workload families plus the bundled benchmark shapes."""
    fixtures = [inp for _, inp in load_tasks(kind=kind)]
    if kind == "gemm":
        fixtures = [GemmInput(i.m, i.n, i.k, d, i.trans_a, i.trans_b) for i in fixtures for d in dtypes]
        return Mixture([(GemmFamilies(dtypes=dtypes), 0.95), (WeightedInputs(fixtures), 0.05)])
    fixtures = [ConvInput(i.n, i.p, i.q, i.k, i.c, i.r, i.s, d) for i in fixtures for d in dtypes]
    return Mixture([(ConvLogUniform(dtypes=dtypes), 0.95), (WeightedInputs(fixtures), 0.05)])


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Sample:
    input: ProblemInput
    tuning: Tuning
    gflops: float
    backend: str

    def __post_init__(self):
        if not (math.isfinite(self.gflops) and self.gflops > 0):
            raise ValueError(f"measured GFLOPS must be finite and positive, got {self.gflops}")

    def key(self) -> Tuple:
        return (self.input, self.tuning.as_tuple())


@dataclass
class Dataset:
    kind: str
    samples: List[Sample] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in COLUMNS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        keys = set()
        for s in self.samples:
            if s.input.kind != self.kind:
                raise ValueError(f"{s.input.kind} sample in a {self.kind} dataset")
            k = s.key()
            if k in keys:
                raise ValueError(f"duplicate (input, tuning) row {k}")
            keys.add(k)

    def __len__(self) -> int:
        return len(self.samples)

    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(COLUMNS[self.kind]) - 2))
        return np.array(
            [np.concatenate([input_features(s.input), s.tuning.as_tuple()]) for s in self.samples]
        )

    def targets(self) -> np.ndarray:
        """Natural log of the measured GFLOPS."""
        return np.log(np.array([s.gflops for s in self.samples], dtype=np.float64))

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.kind, self.samples[:n], self.schema_version)


def generate_dataset(
    backend,
    sampler_model: CategoricalModel,
    input_distribution: InputDistribution,
    n_samples: int,
    rng_seed: int = 0,
    hw: HardwareDescriptor = DEFAULT_HW,
    max_rejections: Optional[int] = None,
    max_stalled_rounds: int = 100,
) -> Dataset:
    """Exactly ``n_samples`` distinct legal measured pairs.

    Inputs are drawn in rounds; each drawn input gets one tuning from the
    sampler. Pairs already present are discarded and redrawn in a later round.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    kind = input_distribution.kind
    rng = np.random.default_rng(rng_seed)
    tcls = tuning_type(kind)
    kw = {} if max_rejections is None else {"max_rejections": max_rejections}
    samples: List[Sample] = []
    seen = set()
    legality: Dict[ProblemInput, Legality] = {}
    stalled = 0
    while len(samples) < n_samples:
        before = len(samples)
        need = n_samples - len(samples)
        groups: Dict[ProblemInput, int] = {}
        for inp in input_distribution.draw(rng, need):
            groups[inp] = groups.get(inp, 0) + 1
        for inp, count in groups.items():
            leg = legality.get(inp)
            if leg is None:
                leg = legality[inp] = Legality(inp, hw)
            params = sample_many(sampler_model, leg, count, rng, **kw)
            fresh = []
            for row in params:
                key = (inp, tuple(int(v) for v in row))
                if key not in seen:
                    seen.add(key)
                    fresh.append(key[1])
            if not fresh:
                continue
            gflops = backend.measure_batch(inp, np.asarray(fresh, dtype=np.int64))
            for t, g in zip(fresh, gflops):
                samples.append(Sample(inp, tcls(*t), float(g), backend.name))
        stalled = stalled + 1 if len(samples) == before else 0
        if stalled >= max_stalled_rounds:
            raise GenerationStalled(
                f"only {len(samples)} distinct pairs after {max_stalled_rounds} rounds without progress"
            )
        if len(legality) > 50_000:
            legality.clear()
    return Dataset(kind, samples[:n_samples])


def _bool_text(v: bool) -> str:
    return "1" if v else "0"


def _parse_bool(text: str) -> bool:
    if text not in ("0", "1"):
        raise ValueError(f"expected 0 or 1, got {text!r}")
    return text == "1"


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    cols = COLUMNS[ds.kind]
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={ds.schema_version} kind={ds.kind}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for s in ds.samples:
            row = []
            for c in INPUT_COLUMNS[ds.kind]:
                v = getattr(s.input, c)
                row.append(_bool_text(v) if isinstance(v, bool) else str(v))
            row.extend(str(v) for v in s.tuning.as_tuple())
            row.extend([repr(float(s.gflops)), s.backend])
            w.writerow(row)


def load_dataset(path: Union[str, Path], kind: Optional[str] = None) -> Dataset:
    """Read a dataset CSV; ``kind`` (when given) must match the file's kind."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        meta = dict(tok.split("=", 1) for tok in first.lstrip("#").split() if "=" in tok)
        if not first.startswith("#") or meta.get("schema") != SCHEMA_VERSION:
            raise DatasetFormatError(f"{path}: missing or unsupported schema line {first!r}")
        file_kind = meta.get("kind")
        if file_kind not in COLUMNS:
            raise DatasetFormatError(f"{path}: unknown kind {file_kind!r}")
        if kind is not None and kind != file_kind:
            raise DatasetFormatError(f"{path}: holds a {file_kind} dataset, expected {kind}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != COLUMNS[file_kind]:
            raise DatasetFormatError(f"{path}: header {header} does not match {list(COLUMNS[file_kind])}")
        icols = INPUT_COLUMNS[file_kind]
        tcls = tuning_type(file_kind)
        samples = []
        inputs: Dict[Tuple, ProblemInput] = {}
        for lineno, row in enumerate(reader, start=3):
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                raw = tuple(row[: len(icols)])
                inp = inputs.get(raw)
                if inp is None:
                    vals = {}
                    for c, v in zip(icols, raw):
                        if c == "dtype":
                            vals[c] = v
                        elif c in ("trans_a", "trans_b"):
                            vals[c] = _parse_bool(v)
                        else:
                            vals[c] = int(v)
                    inp = inputs[raw] = INPUT_TYPES[file_kind](**vals)
                tuning = tcls(*(int(v) for v in row[len(icols):-2]))
                samples.append(Sample(inp, tuning, float(row[-2]), row[-1]))
            except (ValueError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    try:
        return Dataset(file_kind, samples)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- inference


@dataclass(frozen=True)
class RankedCandidate:
    tuning: Tuple[int, ...]
    predicted: float
    measured: float


@dataclass(frozen=True)
class InferenceResult:
    input: ProblemInput
    tuning: Tuning
    predicted: float
    gflops: float
    ranked: Tuple[RankedCandidate, ...]
    n_legal: int

    def to_dict(self) -> dict:
        return {
            "version": RESULT_VERSION,
            "encoding_version": FEATURE_VERSIONS[self.input.kind],
            "input": input_to_dict(self.input),
            "tuning": self.tuning.as_dict(),
            "predicted_log_gflops": self.predicted,
            "gflops": self.gflops,
            "n_legal": self.n_legal,
            "ranked": [
                {"tuning": list(c.tuning), "predicted": c.predicted, "measured": c.measured}
                for c in self.ranked
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "InferenceResult":
        if doc.get("version") != RESULT_VERSION:
            raise ValueError(f"unsupported result version {doc.get('version')!r}")
        inp = input_from_dict(doc["input"])
        if doc.get("encoding_version") != FEATURE_VERSIONS[inp.kind]:
            raise ValueError("result was produced for a different feature encoding")
        tcls = tuning_type(inp.kind)
        return cls(
            input=inp,
            tuning=tcls(**{k: int(v) for k, v in doc["tuning"].items()}),
            predicted=float(doc["predicted_log_gflops"]),
            gflops=float(doc["gflops"]),
            ranked=tuple(
                RankedCandidate(tuple(int(v) for v in c["tuning"]), float(c["predicted"]), float(c["measured"]))
                for c in doc["ranked"]
            ),
            n_legal=int(doc["n_legal"]),
        )


def rebenchmark(backend, inp: ProblemInput, params: np.ndarray, repeats: int = REBENCH_REPEATS) -> np.ndarray:
    """Best of ``repeats`` measurements per row (a single pass for deterministic backends)."""
    if getattr(backend, "deterministic", False):
        repeats = 1
    best = backend.measure_batch(inp, params)
    for _ in range(repeats - 1):
        best = np.maximum(best, backend.measure_batch(inp, params))
    return best


def rank_candidates(predicted: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` largest predictions; ties keep the original (lexicographic) order."""
    return np.argsort(-np.asarray(predicted), kind="stable")[:top_k]


def infer(
    model,
    inp: ProblemInput,
    hw: HardwareDescriptor,
    bounds: Mapping[str, Sequence[int]],
    top_k: int = DEFAULT_TOP_K,
    backend=None,
    legal: Optional[np.ndarray] = None,
) -> InferenceResult:
    """Exhaustive model ranking of the legal space, then re-measurement of the best ``top_k``.

    ``model`` needs ``predict(features)`` and ``encoding_version``. ``legal`` may
    pass a precomputed legal-tuning array to skip enumeration.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if backend is None:
        raise ValueError("a measurement backend is required for re-benchmarking")
    expected = FEATURE_VERSIONS[inp.kind]
    if getattr(model, "encoding_version", expected) != expected:
        from .perf_model import ModelFormatError

        raise ModelFormatError(f"model uses {model.encoding_version} features; {inp.kind} needs {expected}")
    params = enumerate_legal_array(inp, hw, bounds) if legal is None else np.asarray(legal, dtype=np.int64)
    if len(params) == 0:
        raise EmptySearchSpace(f"no legal tuning for {inp.key()} within the given bounds")
    predicted = np.asarray(model.predict(encode_batch(inp, params)), dtype=np.float64)
    order = rank_candidates(predicted, top_k)
    measured = rebenchmark(backend, inp, params[order])
    # argmax keeps the best-ranked candidate among equal measurements
    best = int(np.argmax(measured))
    tcls = tuning_type(inp.kind)
    ranked = tuple(
        RankedCandidate(tuple(int(v) for v in params[i]), float(predicted[i]), float(g))
        for i, g in zip(order, measured)
    )
    return InferenceResult(
        input=inp,
        tuning=tcls.from_sequence(params[order[best]]),
        predicted=float(predicted[order[best]]),
        gflops=float(measured[best]),
        ranked=ranked,
        n_legal=len(params),
    )


# ---------------------------------------------------------------- cache


def cache_dir(path: Union[str, Path, None] = None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "inputtune"


def cache_key(inp: ProblemInput, namespace: str = "") -> str:
    doc = {"input": input_to_dict(inp), "encoding": FEATURE_VERSIONS[inp.kind], "namespace": namespace}
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
    return f"{inp.key()}-{digest[:16]}"


def cache_result(
    result: InferenceResult, directory: Union[str, Path, None] = None, namespace: str = ""
) -> Path:
    """Store ``result`` under its input's key; ``namespace`` separates models or devices."""
    d = cache_dir(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{cache_key(result.input, namespace)}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(result.to_dict(), indent=1) + "\n")
    os.replace(tmp, path)
    return path


def lookup_cache(
    inp: ProblemInput, directory: Union[str, Path, None] = None, namespace: str = ""
) -> Optional[InferenceResult]:
    path = cache_dir(directory) / f"{cache_key(inp, namespace)}.json"
    if not path.exists():
        return None
    try:
        result = InferenceResult.from_dict(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        warnings.warn(f"ignoring corrupt cache entry {path}: {exc}", RuntimeWarning)
        return None
    if result.input != inp:
        warnings.warn(f"ignoring cache entry {path}: it belongs to {result.input.key()}", RuntimeWarning)
        return None
    return result
