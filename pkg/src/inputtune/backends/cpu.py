"""Cache-blocked CPU executors that follow the GPU kernels' loop structure.

GEMM: a grid of (M/m_l x N/n_l x k_g) blocks. Each block stages u-deep slices
of op(A) and op(B) into local buffers (zero padded at the matrix edges, which
plays the role of predication), splits every slice between k_l thread groups,
and each "thread" owns an m_s x n_s register tile with k_s interleaved
accumulators. Partials are merged per thread (k_s), per block (k_l) and
finally across the grid (k_g).

CONV runs as an implicit GEMM of shape (N*P*Q) x K x (C*R*S): image rows are
gathered into the staging buffer through an indirection table, so the inner
loops only see table lookups plus a per-output base offset.

Half precision is computed in single precision and rounded on output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numba import njit

from ..param_space import (
    NUMPY_DTYPES,
    ConvInput,
    ConvTuning,
    GemmInput,
    GemmTuning,
    tiles_divide,
)


class ShapeError(ValueError):
    pass


class IllegalTuning(ValueError):
    pass


@njit(cache=True)
def _gemm_blocked(A, B, ms, ns, ml, nl, u, ks, kl, kg):
    M, K = A.shape
    N = B.shape[1]
    dt = A.dtype
    k_chunk = (K + kg - 1) // kg
    sub = u // kl
    partial = np.zeros((kg, M, N), dtype=dt)
    As = np.empty((ml, u), dtype=dt)
    Bs = np.empty((u, nl), dtype=dt)
    acc = np.empty((kl, ks, ml, nl), dtype=dt)
    for bi in range((M + ml - 1) // ml):
        r0 = bi * ml
        for bj in range((N + nl - 1) // nl):
            c0 = bj * nl
            for g in range(kg):
                k_lo = g * k_chunk
                k_hi = min(K, k_lo + k_chunk)
                acc[:] = 0
                for kk in range(k_lo, k_hi, u):
                    # stage the slice, zero padded past the matrix edges
                    for i in range(ml):
                        for t in range(u):
                            if r0 + i < M and kk + t < k_hi:
                                As[i, t] = A[r0 + i, kk + t]
                            else:
                                As[i, t] = 0
                    for t in range(u):
                        for j in range(nl):
                            if kk + t < k_hi and c0 + j < N:
                                Bs[t, j] = B[kk + t, c0 + j]
                            else:
                                Bs[t, j] = 0
                    for grp in range(kl):
                        for ti in range(0, ml, ms):
                            for tj in range(0, nl, ns):
                                for t in range(grp * sub, grp * sub + sub):
                                    s = t % ks
                                    for i in range(ms):
                                        a = As[ti + i, t]
                                        for j in range(ns):
                                            acc[grp, s, ti + i, tj + j] += a * Bs[t, tj + j]
                # thread-level (k_s), then block-level (k_l) reduction
                for i in range(ml):
                    if r0 + i >= M:
                        break
                    for j in range(nl):
                        if c0 + j >= N:
                            break
                        v = acc[0, 0, i, j]
                        for s in range(1, ks):
                            v += acc[0, s, i, j]
                        for grp in range(1, kl):
                            w = acc[grp, 0, i, j]
                            for s in range(1, ks):
                                w += acc[grp, s, i, j]
                            v += w
                        partial[g, r0 + i, c0 + j] = v
    # grid-level reduction
    C = partial[0].copy()
    for g in range(1, kg):
        C += partial[g]
    return C


@njit(cache=True)
def _conv_blocked(img, flt, tab_off, Nb, W, P, Q,
                  ks, ps, qs, ns, kl, pl, ql, nl, u, cs, cl, cg):
    CRS, K = flt.shape
    dt = flt.dtype
    t_chunk = (CRS + cg - 1) // cg
    sub = u // cl
    partial = np.zeros((cg, K, P, Q, Nb), dtype=dt)
    As = np.empty((pl, ql, nl, u), dtype=dt)
    Bs = np.empty((u, kl), dtype=dt)
    acc = np.empty((cl, cs, kl, pl, ql, nl), dtype=dt)
    for bp in range((P + pl - 1) // pl):
        p0 = bp * pl
        for bq in range((Q + ql - 1) // ql):
            q0 = bq * ql
            for bn in range((Nb + nl - 1) // nl):
                n0 = bn * nl
                for bk in range((K + kl - 1) // kl):
                    k0 = bk * kl
                    for g in range(cg):
                        t_lo = g * t_chunk
                        t_hi = min(CRS, t_lo + t_chunk)
                        acc[:] = 0
                        for tt in range(t_lo, t_hi, u):
                            # gather image rows through the indirection table
                            for a in range(pl):
                                for b in range(ql):
                                    for c in range(nl):
                                        p = p0 + a
                                        q = q0 + b
                                        n = n0 + c
                                        inside = p < P and q < Q and n < Nb
                                        base = p * W * Nb + q * Nb + n
                                        for t in range(u):
                                            if inside and tt + t < t_hi:
                                                As[a, b, c, t] = img[base + tab_off[tt + t]]
                                            else:
                                                As[a, b, c, t] = 0
                            for t in range(u):
                                for j in range(kl):
                                    if tt + t < t_hi and k0 + j < K:
                                        Bs[t, j] = flt[tt + t, k0 + j]
                                    else:
                                        Bs[t, j] = 0
                            for grp in range(cl):
                                for tk in range(0, kl, ks):
                                    for tp in range(0, pl, ps):
                                        for tq in range(0, ql, qs):
                                            for tn in range(0, nl, ns):
                                                for t in range(grp * sub, grp * sub + sub):
                                                    s = t % cs
                                                    for i in range(ps):
                                                        for j in range(qs):
                                                            for l in range(ns):
                                                                x = As[tp + i, tq + j, tn + l, t]
                                                                for kk in range(ks):
                                                                    acc[grp, s, tk + kk, tp + i, tq + j, tn + l] += x * Bs[t, tk + kk]
                        for kk in range(kl):
                            if k0 + kk >= K:
                                break
                            for a in range(pl):
                                if p0 + a >= P:
                                    break
                                for b in range(ql):
                                    if q0 + b >= Q:
                                        break
                                    for c in range(nl):
                                        if n0 + c >= Nb:
                                            break
                                        v = acc[0, 0, kk, a, b, c]
                                        for s in range(1, cs):
                                            v += acc[0, s, kk, a, b, c]
                                        for grp in range(1, cl):
                                            w = acc[grp, 0, kk, a, b, c]
                                            for s in range(1, cs):
                                                w += acc[grp, s, kk, a, b, c]
                                            v += w
                                        partial[g, k0 + kk, p0 + a, q0 + b, n0 + c] = v
    out = partial[0].copy()
    for g in range(1, cg):
        out += partial[g]
    return out


def _compute_dtype(dtype: str):
    return np.float32 if dtype == "f16" else NUMPY_DTYPES[dtype]


def _timed(fn, repeats: int, warmup: bool):
    if warmup:
        fn()
    best = float("inf")
    result = None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return result, best


def cpu_execute_gemm(
    inp: GemmInput,
    tuning: GemmTuning,
    a: np.ndarray,
    b: np.ndarray,
    repeats: int = 1,
    warmup: bool = False,
) -> Tuple[np.ndarray, float, float]:
    """C = op(A) op(B) with the tiled loop nest; returns (C, best seconds, GFLOPS).

    ``a`` is M x K (K x M when ``trans_a``), ``b`` is K x N (N x K when ``trans_b``).
    """
    if not tiles_divide(inp, tuning):
        raise IllegalTuning(f"tile sizes of {tuning} do not divide")
    want_a = (inp.k, inp.m) if inp.trans_a else (inp.m, inp.k)
    want_b = (inp.n, inp.k) if inp.trans_b else (inp.k, inp.n)
    if a.shape != want_a or b.shape != want_b:
        raise ShapeError(f"expected A {want_a} and B {want_b}, got {a.shape} and {b.shape}")
    ct = _compute_dtype(inp.dtype)
    opa = (a.T if inp.trans_a else a).astype(ct, copy=False)
    opb = (b.T if inp.trans_b else b).astype(ct, copy=False)
    t = tuning
    c, secs = _timed(
        lambda: _gemm_blocked(opa, opb, t.m_s, t.n_s, t.m_l, t.n_l, t.u, t.k_s, t.k_l, t.k_g),
        repeats, warmup,
    )
    return c.astype(NUMPY_DTYPES[inp.dtype], copy=False), secs, inp.flops / secs / 1e9


@dataclass(frozen=True)
class IndirectionTable:
    """Flat image offsets for every reduction index t = (c * R + r) * S + s.

    Element (c, p + r, q + s, n) of a C x H x W x N image lives at
    ``base(p, q, n) + offsets[t]`` with ``base = (p * W + q) * N + n``.
    """

    c: np.ndarray
    r: np.ndarray
    s: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return len(self.offsets)

    @staticmethod
    def base(inp: ConvInput, p: int, q: int, n: int) -> int:
        return (p * inp.w + q) * inp.n + n


def build_indirection_table(inp: ConvInput) -> IndirectionTable:
    c, r, s = np.meshgrid(np.arange(inp.c), np.arange(inp.r), np.arange(inp.s), indexing="ij")
    c, r, s = c.ravel(), r.ravel(), s.ravel()
    n_img = inp.n
    offsets = ((c * inp.h + r) * inp.w + s) * n_img
    return IndirectionTable(c.astype(np.int64), r.astype(np.int64), s.astype(np.int64), offsets.astype(np.int64))


def cpu_execute_conv(
    inp: ConvInput,
    tuning: ConvTuning,
    images: np.ndarray,
    filters: np.ndarray,
    repeats: int = 1,
    warmup: bool = False,
) -> Tuple[np.ndarray, float, float]:
    """Valid-mode convolution via implicit GEMM; returns (K x P x Q x N output, seconds, GFLOPS)."""
    if not tiles_divide(inp, tuning):
        raise IllegalTuning(f"tile sizes of {tuning} do not divide")
    want_i = (inp.c, inp.h, inp.w, inp.n)
    want_f = (inp.c, inp.r, inp.s, inp.k)
    if images.shape != want_i or filters.shape != want_f:
        raise ShapeError(f"expected images {want_i} and filters {want_f}, got {images.shape} and {filters.shape}")
    ct = _compute_dtype(inp.dtype)
    img = np.ascontiguousarray(images, dtype=ct).ravel()
    flt = np.ascontiguousarray(filters, dtype=ct).reshape(inp.c * inp.r * inp.s, inp.k)
    table = build_indirection_table(inp)
    t = tuning
    out, secs = _timed(
        lambda: _conv_blocked(
            img, flt, table.offsets, inp.n, inp.w, inp.p, inp.q,
            t.k_s, t.p_s, t.q_s, t.n_s, t.k_l, t.p_l, t.q_l, t.n_l, t.u, t.c_s, t.c_l, t.c_g,
        ),
        repeats, warmup,
    )
    return out.astype(NUMPY_DTYPES[inp.dtype], copy=False), secs, inp.flops / secs / 1e9


def _random_operands(rng: np.random.Generator, shape, dtype: str) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape).astype(NUMPY_DTYPES[dtype])


class CpuBackend:
    """Measures real wall-clock GFLOPS of the CPU executors on random operands.

    Timing is best of ``repeats`` runs after one warm-up run. Measurements are
    meant to run one at a time per process.
    """

    name = "cpu"
    deterministic = False

    def __init__(self, repeats: int = 5, seed: int = 0):
        self.repeats = repeats
        self.seed = seed

    def measure(self, inp, tuning) -> float:
        rng = np.random.default_rng(self.seed)
        if isinstance(inp, GemmInput):
            a = _random_operands(rng, (inp.k, inp.m) if inp.trans_a else (inp.m, inp.k), inp.dtype)
            b = _random_operands(rng, (inp.n, inp.k) if inp.trans_b else (inp.k, inp.n), inp.dtype)
            _, _, gflops = cpu_execute_gemm(inp, tuning, a, b, repeats=self.repeats, warmup=True)
        else:
            images = _random_operands(rng, (inp.c, inp.h, inp.w, inp.n), inp.dtype)
            filters = _random_operands(rng, (inp.c, inp.r, inp.s, inp.k), inp.dtype)
            _, _, gflops = cpu_execute_conv(inp, tuning, images, filters, repeats=self.repeats, warmup=True)
        return gflops

    def measure_batch(self, inp, params: np.ndarray) -> np.ndarray:
        cls = GemmTuning if isinstance(inp, GemmInput) else ConvTuning
        return np.array([self.measure(inp, cls.from_sequence(row)) for row in params], dtype=np.float64)
