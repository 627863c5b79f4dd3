"""Categorical generative model for legal tuning vectors.

Each tuning parameter is modelled as an independent categorical variable whose
probabilities are the (prior-smoothed) frequencies of its values among legal
vectors drawn uniformly during a short calibration phase. Sampling draws every
parameter independently and rejects whole vectors until one is legal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Mapping, Sequence, Tuple, Union

import numpy as np

DEFAULT_ALPHA = 100.0
DEFAULT_N_UNIFORM = 100_000
MAX_REJECTIONS = 1_000_000

_BATCH = 256


class RetryExhausted(RuntimeError):
    """No legal vector found within the rejection budget: the model and the space disagree."""


@dataclass(frozen=True)
class CategoricalModel:
    names: Tuple[str, ...]
    values: Tuple[Tuple[int, ...], ...]
    counts: Tuple[Tuple[float, ...], ...]
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not (len(self.names) == len(self.values) == len(self.counts)):
            raise ValueError("names, values and counts must have the same length")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name, vals, cnts in zip(self.names, self.values, self.counts):
            if len(vals) == 0 or len(vals) != len(cnts):
                raise ValueError(f"{name}: values and counts must be nonempty and aligned")
            if min(cnts) < self.alpha or sum(cnts) <= 0:
                raise ValueError(f"{name}: every count must be >= alpha and the total positive")

    @classmethod
    def uniform(cls, bounds: Mapping[str, Sequence[int]], alpha: float = DEFAULT_ALPHA) -> "CategoricalModel":
        names = tuple(bounds)
        values = tuple(tuple(int(v) for v in bounds[n]) for n in names)
        counts = tuple(tuple(float(max(alpha, 1.0)) for _ in v) for v in values)
        return cls(names, values, counts, alpha)

    def probabilities(self) -> Dict[str, np.ndarray]:
        return {n: np.asarray(c) / np.sum(c) for n, c in zip(self.names, self.counts)}

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` unconstrained draws, one tuning vector per row."""
        out = np.empty((size, len(self.names)), dtype=np.int64)
        for j, (vals, cnts) in enumerate(zip(self.values, self.counts)):
            p = np.asarray(cnts) / np.sum(cnts)
            out[:, j] = np.asarray(vals)[rng.choice(len(vals), size=size, p=p)]
        return out

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "parameters": [
                {"name": n, "values": list(v), "counts": list(c)}
                for n, v, c in zip(self.names, self.values, self.counts)
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CategoricalModel":
        try:
            params = doc["parameters"]
            return cls(
                names=tuple(p["name"] for p in params),
                values=tuple(tuple(int(v) for v in p["values"]) for p in params),
                counts=tuple(tuple(float(c) for c in p["counts"]) for p in params),
                alpha=float(doc["alpha"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed categorical model: {exc}") from exc

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CategoricalModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _legal_rows(legality: Callable, params: np.ndarray) -> np.ndarray:
    mask = getattr(legality, "mask", None)
    if mask is not None:
        return np.asarray(mask(params), dtype=bool)
    return np.fromiter((bool(legality(tuple(int(x) for x in row))) for row in params), dtype=bool, count=len(params))


def _uniform_draws(bounds: Mapping[str, Sequence[int]], rng: np.random.Generator, size: int) -> np.ndarray:
    cols = [np.asarray(bounds[n], dtype=np.int64)[rng.integers(0, len(bounds[n]), size=size)] for n in bounds]
    return np.stack(cols, axis=1)


def model_from_counts(
    bounds: Mapping[str, Sequence[int]],
    accepted: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
) -> CategoricalModel:
    """Pseudo-counts start at ``alpha`` and gain one per accepted occurrence of a value."""
    names = tuple(bounds)
    accepted = np.asarray(accepted, dtype=np.int64).reshape(-1, len(names))
    values, counts = [], []
    for j, name in enumerate(names):
        vals = tuple(int(v) for v in bounds[name])
        idx = {v: i for i, v in enumerate(vals)}
        c = np.full(len(vals), float(alpha))
        for v, n in zip(*np.unique(accepted[:, j], return_counts=True)):
            c[idx[int(v)]] += n
        if c.sum() == 0:
            c[:] = 1.0
        values.append(vals)
        counts.append(tuple(float(x) for x in c))
    return CategoricalModel(names, tuple(values), tuple(counts), float(alpha))


def calibrate(
    legality: Callable,
    bounds: Mapping[str, Sequence[int]],
    n_uniform: int = DEFAULT_N_UNIFORM,
    rng_seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
) -> CategoricalModel:
    """Fit per-parameter categoricals from the legal fraction of uniform draws.

    With no accepted draw the result is the pure prior, i.e. uniform.
    """
    if n_uniform < 1:
        raise ValueError("n_uniform must be >= 1")
    rng = np.random.default_rng(rng_seed)
    draws = _uniform_draws(bounds, rng, n_uniform)
    accepted = draws[_legal_rows(legality, draws)]
    return model_from_counts(bounds, accepted, alpha)


def sample_many(
    model: CategoricalModel,
    legality: Callable,
    n: int,
    rng: np.random.Generator,
    max_rejections: int = MAX_REJECTIONS,
) -> np.ndarray:
    """``n`` legal vectors (rows, in draw order) by whole-vector rejection."""
    out = []
    got = rejected = 0
    while got < n:
        batch = model.draw(rng, max(_BATCH, 2 * (n - got)))
        ok = _legal_rows(legality, batch)
        # count rejections only up to the last vector we keep
        idx = np.flatnonzero(ok)[: n - got]
        used = (idx[-1] + 1) if len(idx) else len(batch)
        rejected += used - len(idx)
        if rejected > max_rejections:
            raise RetryExhausted(f"more than {max_rejections} rejections while sampling")
        out.append(batch[idx])
        got += len(idx)
    return np.concatenate(out, axis=0) if out else np.zeros((0, len(model.names)), dtype=np.int64)


def sample(model: CategoricalModel, legality: Callable, rng: np.random.Generator, max_rejections: int = MAX_REJECTIONS):
    """One legal tuning vector as a tuple in parameter order."""
    return tuple(int(v) for v in sample_many(model, legality, 1, rng, max_rejections)[0])


def acceptance_rate(
    model_or_uniform: Union[CategoricalModel, Mapping[str, Sequence[int]]],
    legality: Callable,
    n_trials: int,
    rng_seed: int = 0,
) -> float:
    """Fraction of first-attempt draws that are legal.

    Pass a :class:`CategoricalModel` or a bounds mapping (uniform sampling).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    if isinstance(model_or_uniform, CategoricalModel):
        draws = model_or_uniform.draw(rng, n_trials)
    else:
        draws = _uniform_draws(model_or_uniform, rng, n_trials)
    return float(np.mean(_legal_rows(legality, draws)))
