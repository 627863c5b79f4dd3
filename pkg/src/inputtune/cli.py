"""Command-line front end: calibrate, generate, train, infer, bench, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every artifact is
written to a temporary file and renamed into place, so a failed run leaves no
partial output behind.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import pipeline
from .backends import make_backend
from .backends.analytical import measure_batch
from .param_space import (
    DEFAULT_HW,
    FEATURE_VERSIONS,
    PARAM_NAMES,
    ConvInput,
    GemmInput,
    HardwareDescriptor,
    Legality,
    default_bounds,
    enumerate_legal_array,
    feature_length,
    load_bounds,
)
from .perf_model import MlpArchitecture, ModelFormatError, TrainConfig, TrainingDiverged, load_model, save_model, train
from .sampler import DEFAULT_ALPHA, DEFAULT_N_UNIFORM, CategoricalModel, RetryExhausted, acceptance_rate, calibrate

log = logging.getLogger("inputtune")

DATA_DIR = Path(__file__).parent / "data"
ACCEPTANCE_TRIALS = 10_000
# reference input for legality during calibration; only its dtype matters
_REFERENCE = {"gemm": lambda dt: GemmInput(512, 512, 512, dt), "conv": lambda dt: ConvInput(16, 12, 120, 64, 32, 3, 3, dt)}


class UsageError(Exception):
    """Bad flags or missing/invalid input files (exit code 2)."""


# ---------------------------------------------------------------- helpers


def _atomic_write(path: Path, write: Callable[[Path], None]) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _write_json(path: Path, doc) -> None:
    _atomic_write(path, lambda p: p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n"))


_PRODUCERS = {"dataset": "generate", "model": "train", "sampler model": "calibrate"}


def _existing(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        hint = f"; create one with `inputtune {_PRODUCERS[what]}`" if what in _PRODUCERS else ""
        raise UsageError(f"{what} file not found: {p}{hint}")
    return p


def _load_hw(args) -> HardwareDescriptor:
    p = _existing(args.hw, "hardware descriptor")
    if p is None:
        return DEFAULT_HW
    try:
        return HardwareDescriptor.load(p)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid hardware descriptor {p}: {exc}") from exc


def _load_bounds(args, kind: str, search: bool = False):
    p = _existing(args.bounds, "bounds")
    if p is None:
        if search and kind == "conv":
            p = DATA_DIR / "conv_search_bounds.json"
        else:
            return default_bounds(kind)
    try:
        return load_bounds(p, kind)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid bounds file {p}: {exc}") from exc


def _load_perf_model(args, kind: str):
    p = _existing(args.model, "model")
    if p is None:
        raise UsageError("--model is required; create one with `inputtune train`")
    try:
        return load_model(p, FEATURE_VERSIONS[kind])
    except ModelFormatError as exc:
        raise UsageError(str(exc)) from exc


def _file_digest(*paths: Optional[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(b"-" if p is None else Path(p).read_bytes())
    return h.hexdigest()[:16]


def _parse_input(args) -> pipeline.ProblemInput:
    try:
        dims = [int(v) for v in args.shape.split(",")]
    except ValueError:
        raise UsageError(f"--shape must be comma-separated integers, got {args.shape!r}") from None
    try:
        if args.kind == "gemm":
            if len(dims) != 3:
                raise UsageError("GEMM --shape needs M,N,K")
            return GemmInput(*dims, dtype=args.dtype, trans_a=args.trans_a, trans_b=args.trans_b)
        if len(dims) != 7:
            raise UsageError("CONV --shape needs N,P,Q,K,C,R,S")
        return ConvInput(*dims, dtype=args.dtype)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _tuning_row(names: Sequence[str], values: Sequence[int]) -> str:
    return " ".join(f"{v:>4d}" for v in values)


# ---------------------------------------------------------------- subcommands


def cmd_calibrate(args) -> dict:
    hw = _load_hw(args)
    bounds = _load_bounds(args, args.kind)
    if args.samples is not None and args.samples < 1:
        raise UsageError("--samples must be >= 1")
    legality = Legality(_REFERENCE[args.kind](args.dtype), hw)
    n_uniform = args.samples or DEFAULT_N_UNIFORM
    model = calibrate(legality, bounds, n_uniform, args.seed, args.alpha)
    cat = acceptance_rate(model, legality, ACCEPTANCE_TRIALS, args.seed + 1)
    uni = acceptance_rate(bounds, legality, ACCEPTANCE_TRIALS, args.seed + 1)
    _write_json(Path(args.out), model.to_dict())
    print(f"{'':8s}{'Categorical':>14s}{'Uniform':>12s}")
    print(f"{args.kind.upper():8s}{100 * cat:>13.1f}%{100 * uni:>11.1f}%")
    print(f"sampler model written to {args.out}")
    return {
        "command": "calibrate",
        "kind": args.kind,
        "n_uniform": n_uniform,
        "trials": ACCEPTANCE_TRIALS,
        "acceptance": {"categorical": cat, "uniform": uni},
        "sampler": str(args.out),
    }


def _input_distribution(args, kind: str):
    if args.inputs is None:
        return pipeline.training_distribution(kind)
    p = _existing(args.inputs, "input task")
    try:
        tasks = pipeline.load_tasks(p, kind)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid task file {p}: {exc}") from exc
    if any(inp.kind != kind for _, inp in tasks):
        raise UsageError(f"{p} holds inputs of another kind than {kind}")
    return pipeline.WeightedInputs([inp for _, inp in tasks])


def cmd_generate(args) -> dict:
    hw = _load_hw(args)
    bounds = _load_bounds(args, args.kind)
    if args.samples is None or args.samples < 1:
        raise UsageError("--samples must be given and >= 1")
    sp = _existing(args.sampler, "sampler model")
    if sp is None:
        model = calibrate(Legality(_REFERENCE[args.kind]("f32"), hw), bounds, DEFAULT_N_UNIFORM, args.seed)
    else:
        try:
            model = CategoricalModel.load(sp)
        except (ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"invalid sampler model {sp}: {exc}") from exc
        if tuple(model.names) != PARAM_NAMES[args.kind]:
            raise UsageError(f"sampler model {sp} is not a {args.kind} model")
    dist = _input_distribution(args, args.kind)
    backend = make_backend(args.backend, hw, args.seed)
    t0 = time.perf_counter()
    ds = pipeline.generate_dataset(backend, model, dist, args.samples, args.seed, hw)
    elapsed = time.perf_counter() - t0
    _atomic_write(Path(args.out), lambda p: pipeline.save_dataset(ds, p))
    g = np.array([s.gflops for s in ds.samples])
    print(f"generated {len(ds)} {args.kind} samples on the {args.backend} backend in {elapsed:.1f}s -> {args.out}")
    print(f"GFLOPS min {g.min():.3g}  median {np.median(g):.3g}  max {g.max():.3g}")
    return {
        "command": "generate",
        "kind": args.kind,
        "backend": args.backend,
        "samples": len(ds),
        "dataset": str(args.out),
        "gflops": {"min": float(g.min()), "median": float(np.median(g)), "max": float(g.max())},
        "timing": {"seconds": elapsed},
    }


def cmd_train(args) -> dict:
    dp = _existing(args.dataset, "dataset")
    if dp is None:
        raise UsageError("--dataset is required; create one with `inputtune generate`")
    try:
        hidden = tuple(int(h) for h in args.hidden.split(","))
        arch_ok = all(h > 0 for h in hidden)
    except ValueError:
        arch_ok = False
    if not arch_ok:
        raise UsageError(f"--hidden must be positive comma-separated integers, got {args.hidden!r}")
    try:
        cfg = TrainConfig(
            learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
            rng_seed=args.seed, validation_fraction=args.validation_fraction,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        ds = pipeline.load_dataset(dp)
    except pipeline.DatasetFormatError as exc:
        raise UsageError(str(exc)) from exc
    arch = MlpArchitecture(hidden, feature_length(ds.kind))
    if len(ds) < 10 * cfg.batch_size / (1 - cfg.validation_fraction):
        raise UsageError(
            f"dataset has {len(ds)} rows; training needs about {int(10 * cfg.batch_size / (1 - cfg.validation_fraction)) + 1}"
            " (generate more samples or lower --batch-size)"
        )
    t0 = time.perf_counter()
    model, history = train(ds.features(), ds.targets(), arch, cfg, FEATURE_VERSIONS[ds.kind])
    elapsed = time.perf_counter() - t0
    _atomic_write(Path(args.out), lambda p: save_model(model, p))
    best = min(history, key=lambda h: h["val_mse"])
    print(f"trained {list(hidden)} on {len(ds)} {ds.kind} samples in {elapsed:.1f}s -> {args.out}")
    print(f"best validation MSE {best['val_mse']:.5f} (epoch {best['epoch']}), final train MSE {history[-1]['train_mse']:.5f}")
    return {
        "command": "train",
        "kind": ds.kind,
        "hidden_sizes": list(hidden),
        "samples": len(ds),
        "best_val_mse": best["val_mse"],
        "best_epoch": best["epoch"],
        "history": history,
        "model": str(args.out),
        "timing": {"seconds": elapsed},
    }


def cmd_infer(args) -> dict:
    hw = _load_hw(args)
    inp = _parse_input(args)
    bounds = _load_bounds(args, inp.kind, search=True)
    model = _load_perf_model(args, inp.kind)
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    namespace = "|".join([
        _file_digest(Path(args.model)), json.dumps(hw.to_dict(), sort_keys=True),
        json.dumps(bounds, sort_keys=True), args.backend, str(args.top_k),
    ])
    directory = args.cache_dir
    t0 = time.perf_counter()
    result = None if args.no_cache else pipeline.lookup_cache(inp, directory, namespace)
    cached = result is not None
    if result is None:
        result = pipeline.infer(model, inp, hw, bounds, args.top_k, make_backend(args.backend, hw, args.seed))
        if not args.no_cache:
            pipeline.cache_result(result, directory, namespace)
    elapsed = time.perf_counter() - t0
    names = PARAM_NAMES[inp.kind]
    print(f"{inp.key()}  ({'cache hit' if cached else f'{result.n_legal} legal tunings ranked'})")
    print("  " + " ".join(f"{n:>4s}" for n in names))
    print("  " + _tuning_row(names, result.tuning.as_tuple()) + f"   {result.gflops:.1f} GFLOPS")
    doc = result.to_dict()
    doc.update({"command": "infer", "cached": cached, "timing": {"seconds": elapsed}})
    if args.out:
        _write_json(Path(args.out), {k: v for k, v in doc.items() if k not in ("cached", "timing")})
    return doc


def _exhaustive(inp, hw, bounds):
    params = enumerate_legal_array(inp, hw, bounds)
    if len(params) == 0:
        raise pipeline.EmptySearchSpace(f"no legal tuning for {inp.key()}")
    g = measure_batch(inp, params, hw)
    i = int(np.argmax(g))
    return params[i], float(g[i]), len(params)


def cmd_bench(args) -> dict:
    hw = _load_hw(args)
    kind = args.kind
    tp = _existing(args.tasks, "task")
    try:
        tasks = pipeline.load_tasks(tp, kind)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid task file {tp}: {exc}") from exc
    kind = tasks[0][1].kind if tasks else kind
    bounds = _load_bounds(args, kind, search=True)
    model = None
    if args.model is not None:
        model = _load_perf_model(args, kind)
    elif args.backend != "analytical":
        raise UsageError("bench without --model searches exhaustively and needs --backend analytical")
    if args.only:
        wanted = set(args.only.split(","))
        tasks = [(n, i) for n, i in tasks if n in wanted]
        if not tasks:
            raise UsageError(f"no task named any of {sorted(wanted)}")
    backend = make_backend(args.backend, hw, args.seed)
    names = PARAM_NAMES[kind]
    label = "model + re-benchmark" if model is not None else "exhaustive analytical search"
    width = max(len(n) for n, _ in tasks) + 2
    print(f"Chosen tunings ({label})")
    print(f"{'Problem':<{width}s}" + " ".join(f"{n:>4s}" for n in names) + f"{'GFLOPS':>10s}")
    rows = []
    t0 = time.perf_counter()
    for name, inp in tasks:
        if model is None:
            tuning, gflops, n_legal = _exhaustive(inp, hw, bounds)
        else:
            r = pipeline.infer(model, inp, hw, bounds, args.top_k, backend)
            tuning, gflops, n_legal = r.tuning.as_tuple(), r.gflops, r.n_legal
        tuning = [int(v) for v in tuning]
        print(f"{name:<{width}s}" + _tuning_row(names, tuning) + f"{gflops:>10.1f}")
        rows.append({
            "name": name, "input": pipeline.input_to_dict(inp),
            "tuning": dict(zip(names, tuning)), "gflops": gflops, "n_legal": n_legal,
        })
    doc = {
        "command": "bench", "kind": kind, "mode": "model" if model is not None else "exhaustive",
        "backend": args.backend, "results": rows, "timing": {"seconds": time.perf_counter() - t0},
    }
    if args.out:
        _write_json(Path(args.out), {k: v for k, v in doc.items() if k != "timing"})
    return doc


def cmd_report(args) -> dict:
    doc: Dict[str, object] = {"command": "report"}
    if args.dataset is None and args.model is None:
        raise UsageError("report needs --dataset and/or --model")
    if args.dataset is not None:
        dp = _existing(args.dataset, "dataset")
        try:
            ds = pipeline.load_dataset(dp)
        except pipeline.DatasetFormatError as exc:
            raise UsageError(str(exc)) from exc
        g = np.array([s.gflops for s in ds.samples])
        n_inputs = len({s.input for s in ds.samples})
        backends = sorted({s.backend for s in ds.samples})
        print(f"dataset {dp}: {len(ds)} {ds.kind} samples over {n_inputs} inputs, backends {backends}")
        if len(g):
            q = np.percentile(g, [0, 25, 50, 75, 100])
            print("GFLOPS quartiles " + " ".join(f"{v:.3g}" for v in q))
        doc["dataset"] = {
            "path": str(dp), "kind": ds.kind, "samples": len(ds), "inputs": n_inputs, "backends": backends,
            "gflops_quartiles": [float(v) for v in np.percentile(g, [0, 25, 50, 75, 100])] if len(g) else [],
        }
    if args.model is not None:
        mp = _existing(args.model, "model")
        try:
            doc_model = json.loads(mp.read_text())
            model = load_model(mp)
        except (ModelFormatError, json.JSONDecodeError) as exc:
            raise UsageError(f"invalid model {mp}: {exc}") from exc
        print(
            f"model {mp}: hidden {list(model.arch.hidden_sizes)}, {model.arch.n_weights} weights, "
            f"features {model.encoding_version} ({'log' if model.log_features else 'raw'})"
        )
        doc["model"] = {
            "path": str(mp), "hidden_sizes": list(model.arch.hidden_sizes), "weights": model.arch.n_weights,
            "encoding_version": model.encoding_version, "format": doc_model.get("format"),
        }
    return doc


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, *, kind=True, hw=True, bounds=True, seed=True):
    if kind:
        p.add_argument("--kind", choices=("gemm", "conv"), default="gemm", help="problem kind (default gemm)")
    if hw:
        p.add_argument("--hw", help="hardware descriptor JSON (default: bundled synthetic device)")
    if bounds:
        p.add_argument("--bounds", help="parameter bounds JSON (default: powers of two in [1,16])")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--report", help="also write the machine-readable report to this JSON file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inputtune", description="Input-aware kernel auto-tuning pipeline.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the categorical sampler and report acceptance rates")
    _common(p)
    p.add_argument("--dtype", choices=("f16", "f32", "f64"), default="f32")
    p.add_argument("--samples", type=int, help=f"uniform calibration draws (default {DEFAULT_N_UNIFORM})")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="prior pseudo-count (default 100)")
    p.add_argument("--out", default="sampler.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("generate", help="sample, measure and record a training dataset")
    _common(p)
    p.add_argument("--sampler", help="calibrated sampler JSON (default: calibrate on the fly)")
    p.add_argument("--inputs", help="task JSON restricting inputs (default: workload families + fixtures)")
    p.add_argument("--backend", choices=("analytical", "cpu"), default="analytical")
    p.add_argument("--samples", type=int, help="number of samples")
    p.add_argument("--out", default="dataset.csv")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the performance model on a dataset")
    _common(p, kind=False, hw=False, bounds=False)
    p.add_argument("--dataset", help="dataset CSV")
    p.add_argument("--hidden", default="32,64,32", help="hidden layer sizes (default 32,64,32)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--out", default="model.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="pick a tuning for one input")
    _common(p)
    p.add_argument("--shape", required=True, help="GEMM: M,N,K  CONV: N,P,Q,K,C,R,S")
    p.add_argument("--dtype", choices=("f16", "f32", "f64"), default="f32")
    p.add_argument("--trans-a", action="store_true")
    p.add_argument("--trans-b", action="store_true")
    p.add_argument("--model", help="trained model JSON")
    p.add_argument("--backend", choices=("analytical", "cpu"), default="analytical")
    p.add_argument("--top-k", type=int, default=pipeline.DEFAULT_TOP_K)
    p.add_argument("--cache-dir", help=f"result cache directory (default ${pipeline.CACHE_ENV} or ~/.cache/inputtune)")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--out", help="write the inference result JSON here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="choose tunings for the bundled benchmark shapes")
    _common(p)
    p.add_argument("--tasks", help="task JSON (default: bundled shapes for --kind)")
    p.add_argument("--only", help="comma-separated task names to run")
    p.add_argument("--model", help="trained model JSON (default: exhaustive analytical search)")
    p.add_argument("--backend", choices=("analytical", "cpu"), default="analytical")
    p.add_argument("--top-k", type=int, default=pipeline.DEFAULT_TOP_K)
    p.add_argument("--out", help="write the results JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summarise a dataset and/or model")
    _common(p, kind=False, hw=False, bounds=False, seed=False)
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        doc = args.func(args)
        if args.report:
            _write_json(Path(args.report), {k: v for k, v in doc.items() if k != "timing"})
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RetryExhausted, TrainingDiverged, pipeline.EmptySearchSpace, pipeline.GenerationStalled) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
