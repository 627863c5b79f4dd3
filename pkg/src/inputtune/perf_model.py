"""Multi-layer perceptron regressor for log-performance.

Features are log-transformed (and standardised with statistics frozen at
training time), hidden layers use relu and the output layer is linear. Weights
are stored per layer as ``W`` of shape (next_dim, prev_dim) plus a bias vector.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

MODEL_FORMAT = "inputtune-mlp/1"


class ModelFormatError(ValueError):
    """A model file could not be parsed or does not match the expected encoding."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    hidden_sizes: Tuple[int, ...]
    input_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a nonempty list of positive integers")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.activation != "relu":
            raise ValueError("only relu activations are supported")

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_sizes, 1]

    @property
    def n_weights(self) -> int:
        d = self.layer_dims
        return sum(d[i + 1] * d[i] + d[i + 1] for i in range(len(d) - 1))


# list of (W, b) per layer
MlpWeights = List[Tuple[np.ndarray, np.ndarray]]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    rng_seed: int = 0
    validation_fraction: float = 0.1
    momentum: float = 0.9
    log_features: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def init_weights(arch: MlpArchitecture, rng: np.random.Generator) -> MlpWeights:
    """Glorot-uniform weights, zero biases."""
    dims = arch.layer_dims
    out = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        out.append((rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return out


def _forward_layers(weights: MlpWeights, a0: np.ndarray):
    """Batched pass over rows of ``a0``; returns the pre-activations and activations."""
    zs, acts = [], [a0]
    a = a0
    last = len(weights) - 1
    for n, (W, b) in enumerate(weights):
        z = a @ W.T + b
        a = z if n == last else np.maximum(z, 0.0)
        zs.append(z)
        acts.append(a)
    return zs, acts


def _log_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError("features must be strictly positive for the log transform")
    return np.log(x)


def forward(weights: MlpWeights, features) -> float:
    """Predicted log-performance for one feature vector (log applied to the raw features)."""
    a0 = _log_features(features).reshape(1, -1)
    _, acts = _forward_layers(weights, a0)
    return float(acts[-1][0, 0])


def _backprop(weights: MlpWeights, a0: np.ndarray, y: np.ndarray):
    """Gradient of mean((y_hat - y)^2) with respect to every W and b."""
    zs, acts = _forward_layers(weights, a0)
    batch = len(a0)
    delta = (2.0 / batch) * (acts[-1][:, 0] - y)[:, None]
    grads = [None] * len(weights)
    for n in range(len(weights) - 1, -1, -1):
        W, _ = weights[n]
        grads[n] = (delta.T @ acts[n], delta.sum(axis=0))
        if n > 0:
            delta = (delta @ W) * (zs[n - 1] > 0)
    return grads


def backward(weights: MlpWeights, features, targets) -> MlpWeights:
    """Exact MSE gradient over a batch of raw (positive) feature rows."""
    a0 = _log_features(np.atleast_2d(features))
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(a0) == 0 or len(a0) != len(y):
        raise ValueError("need a nonempty batch with one target per feature row")
    return _backprop(weights, a0, y)


@dataclass
class PerfModel:
    """Trained regressor plus everything needed to apply it to raw features."""

    arch: MlpArchitecture
    weights: MlpWeights
    encoding_version: str
    log_features: bool = True
    feature_shift: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None
    history: List[dict] = field(default_factory=list)

    def transform(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.arch.input_dim:
            raise ModelFormatError(
                f"model expects {self.arch.input_dim} features ({self.encoding_version}), got {x.shape[1]}"
            )
        a0 = _log_features(x) if self.log_features else x
        if self.feature_shift is not None:
            a0 = (a0 - self.feature_shift) / self.feature_scale
        return a0

    def predict(self, features, chunk: int = 65536) -> np.ndarray:
        a0 = self.transform(features)
        out = np.empty(len(a0))
        for lo in range(0, len(a0), chunk):
            _, acts = _forward_layers(self.weights, a0[lo:lo + chunk])
            out[lo:lo + chunk] = acts[-1][:, 0]
        return out

    def check_encoding(self, encoding_version: str) -> None:
        if encoding_version != self.encoding_version:
            raise ModelFormatError(
                f"model was trained on {self.encoding_version} features, not {encoding_version}"
            )


def evaluate(model: PerfModel, features, targets) -> float:
    """Mean squared error of the model's predictions."""
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean((model.predict(features) - y) ** 2))


def _split(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * fraction)))
    return perm[n_val:], perm[:n_val]


def train(
    features,
    targets,
    arch: MlpArchitecture,
    cfg: TrainConfig = TrainConfig(),
    encoding_version: str = "",
    validation: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[PerfModel, List[dict]]:
    """Minibatch SGD with momentum on the MSE loss.

    Unless an explicit ``validation`` set is given, ``cfg.validation_fraction``
    of the rows is held out. The returned model carries the weights with the
    lowest validation MSE seen at the end of any epoch.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != arch.input_dim or len(x) != len(y):
        raise ValueError(f"features must be (n, {arch.input_dim}) with one target per row")
    rng = np.random.default_rng(cfg.rng_seed)
    if validation is None:
        tr, va = _split(len(x), cfg.validation_fraction, rng)
        x_tr, y_tr, x_va, y_va = x[tr], y[tr], x[va], y[va]
    else:
        x_tr, y_tr = x, y
        x_va = np.asarray(validation[0], dtype=np.float64)
        y_va = np.asarray(validation[1], dtype=np.float64).reshape(-1)
    if len(x_tr) < 10 * cfg.batch_size:
        raise ValueError(f"need at least {10 * cfg.batch_size} training rows, got {len(x_tr)}")

    a_tr = _log_features(x_tr) if cfg.log_features else x_tr
    shift = a_tr.mean(axis=0)
    scale = a_tr.std(axis=0)
    scale[scale == 0] = 1.0
    a_tr = (a_tr - shift) / scale

    weights = init_weights(arch, rng)
    # start the regression head at the mean target
    W_last, _ = weights[-1]
    weights[-1] = (W_last, np.array([y_tr.mean()]))
    model = PerfModel(arch, weights, encoding_version, cfg.log_features, shift, scale)
    velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights]

    best_mse, best_weights = math.inf, [(W.copy(), b.copy()) for W, b in weights]
    history = []
    lr, mu = cfg.learning_rate, cfg.momentum
    # overflow shows up as a non-finite validation error, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(a_tr))
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                grads = _backprop(weights, a_tr[idx], y_tr[idx])
                for (W, b), (gW, gb), (vW, vb) in zip(weights, grads, velocity):
                    vW *= mu
                    vW -= lr * gW
                    vb *= mu
                    vb -= lr * gb
                    W += vW
                    b += vb
            val_mse = evaluate(model, x_va, y_va)
            if not math.isfinite(val_mse):
                raise TrainingDiverged(
                    f"validation MSE became {val_mse} at epoch {epoch}; lower the learning rate (now {lr})"
                )
            train_mse = float(np.mean((model.predict(x_tr[:10000]) - y_tr[:10000]) ** 2))
            history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
            if val_mse < best_mse:
                best_mse = val_mse
                best_weights = [(W.copy(), b.copy()) for W, b in weights]
            log.debug("epoch %d train %.5f val %.5f", epoch, train_mse, val_mse)

    model.weights = best_weights
    model.history = history
    return model, history


def save_model(model: PerfModel, path: Union[str, Path]) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "encoding_version": model.encoding_version,
        "architecture": {
            "hidden_sizes": list(model.arch.hidden_sizes),
            "input_dim": model.arch.input_dim,
            "activation": model.arch.activation,
        },
        "log_features": model.log_features,
        "feature_shift": None if model.feature_shift is None else model.feature_shift.tolist(),
        "feature_scale": None if model.feature_scale is None else model.feature_scale.tolist(),
        "layers": [
            {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in model.weights
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_model(path: Union[str, Path], encoding_version: Optional[str] = None) -> PerfModel:
    """Read a model file; with ``encoding_version`` given, a mismatch is an error."""
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} file")
        a = doc["architecture"]
        arch = MlpArchitecture(tuple(a["hidden_sizes"]), int(a["input_dim"]), a["activation"])
        weights = []
        for layer in doc["layers"]:
            W = np.asarray(layer["weights"], dtype=np.float64).reshape(layer["shape"])
            b = np.asarray(layer["bias"], dtype=np.float64)
            weights.append((W, b))
        dims = arch.layer_dims
        if [w.shape for w, _ in weights] != [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]:
            raise ModelFormatError(f"{path}: layer shapes do not match the architecture")
        if not all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in weights):
            raise ModelFormatError(f"{path}: non-finite weights")
        shift = doc.get("feature_shift")
        scale = doc.get("feature_scale")
        model = PerfModel(
            arch,
            weights,
            doc["encoding_version"],
            bool(doc["log_features"]),
            None if shift is None else np.asarray(shift, dtype=np.float64),
            None if scale is None else np.asarray(scale, dtype=np.float64),
        )
    except ModelFormatError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: cannot parse model file ({exc})") from exc
    if encoding_version is not None:
        model.check_encoding(encoding_version)
    return model
