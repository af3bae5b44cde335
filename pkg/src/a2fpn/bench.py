"""Operation-count and memory models for dot-product vs. linear attention, plus a timing harness.

Counting convention: one MACC is one multiply plus one add.  Softmax
exponentiation and normalisation are charged one MACC per matrix element.
The Q/K/V projections are identical for both mechanisms and are reported in a
separate ``proj_macc`` column rather than folded into ``macc``.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
import tracemalloc
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import (
    AttentionConfig,
    dot_product_attention,
    linear_attention,
    linear_attention_oracle,
)
from .autodiff import Tensor, no_grad
from .autodiff.init import make_rng
from .errors import CapacityError, ConfigurationError, PropertyFailure, UsageError

VARIANTS = ("dot_product", "linear")
CSV_COLUMNS = ("variant", "N", "D_k", "D_v", "macc", "peak_elements", "median_ns", "proj_macc")
CSV_COMMENT = (
    "# 1 MACC = 1 multiply + 1 add; softmax exp and normalisation cost 1 MACC per element; "
    "Q/K/V projections excluded from macc and listed in proj_macc; peak_elements counts 8-byte floats"
)
DEFAULT_DOT_CAP_N = 8192


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ConfigurationError(f"benchmark variant must be one of {VARIANTS}, got {variant!r}")


def macc_model(n: int, d_k: int, d_v: int, variant: str) -> int:
    _check_variant(variant)
    if variant == "dot_product":
        # similarity, weighting, exp, normalise
        return n * n * d_k + n * n * d_v + 2 * n * n
    # K^T V, Q S, key-sum terms, numerator add/divide, two row normalisations
    return 2 * n * d_k * d_v + n * d_k + n * d_v + 2 * n * d_k


def projection_macc(n: int, d_x: int, d_k: int, d_v: int) -> int:
    return n * d_x * (2 * d_k + d_v)


def memory_model(n: int, d_k: int, d_v: int, variant: str) -> int:
    """Peak intermediate float count, excluding the Q, K, V inputs themselves.

    Dot-product: the N x N score matrix and its softmax coexist, plus the output.
    Linear: the N-independent state (K^T V, key sum, value sum) plus normalised
    Q and K, numerator and output buffers, and two per-row scalars.
    """
    _check_variant(variant)
    if variant == "dot_product":
        return 2 * n * n + n * d_v
    return linear_state_elements(d_k, d_v) + n * (2 * d_k + 2 * d_v + 2)


def linear_state_elements(d_k: int, d_v: int) -> int:
    return d_k * d_v + d_k + d_v


def operand_baseline(n: int, d_k: int, d_v: int) -> int:
    return n * max(d_k, d_v)


def crossover_n(d_k: int, d_v: int) -> int:
    """Smallest N from which the linear MACC count stays below the dot-product count."""
    # dot/N = N (d_k + d_v + 2); linear/N is constant, so the crossover is a single threshold
    per_row_linear = 2 * d_k * d_v + 3 * d_k + d_v
    return per_row_linear // (d_k + d_v + 2) + 1


def measure_peak_bytes(fn: Callable[[], object]) -> int:
    """Peak bytes allocated (as seen by tracemalloc) while ``fn`` runs, above the starting level."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    result = fn()
    peak = tracemalloc.get_traced_memory()[1]
    del result
    if not was_tracing:
        tracemalloc.stop()
    return peak - base


def random_qkv(n: int, d_k: int, d_v: int, seed: int = 0):
    rng = make_rng(seed)
    return (
        Tensor(rng.standard_normal((n, d_k))),
        Tensor(rng.standard_normal((n, d_k))),
        Tensor(rng.standard_normal((n, d_v))),
    )


def _kernel(variant: str) -> Callable:
    return dot_product_attention if variant == "dot_product" else linear_attention


def sanity_gate(d_k: int, d_v: int, seed: int = 0, n: int = 24) -> None:
    """Check both kernels against their row-wise oracles before anything is timed."""
    q, k, v = random_qkv(n, d_k, d_v, seed)
    with no_grad():
        lin = linear_attention(q, k, v).data
        dot = dot_product_attention(q, k, v).data
    ref_lin = linear_attention_oracle(q, k, v)
    s = q.data @ k.data.T
    w = np.exp(s - s.max(axis=1, keepdims=True))
    ref_dot = (w @ v.data) / w.sum(axis=1, keepdims=True)
    for name, got, ref in (("linear", lin, ref_lin), ("dot_product", dot, ref_dot)):
        err = np.abs(got - ref).max() / np.abs(ref).max()
        if not err <= 1e-12:
            raise PropertyFailure(f"{name} attention disagrees with its oracle (rel err {err:.2e})")


@dataclass
class BenchRow:
    variant: str
    n: int
    d_k: int
    d_v: int
    macc: int
    peak_elements: int
    median_ns: Optional[int]
    proj_macc: int


def time_attention(
    variant: str,
    n: int,
    config: AttentionConfig,
    repetitions: int = 5,
    seed: int = 0,
    max_peak_elements: Optional[int] = None,
    d_x: int = 64,
) -> BenchRow:
    _check_variant(variant)
    if repetitions < 5:
        raise ConfigurationError("timing needs at least 5 repetitions for a stable median")
    cap = memory_model(DEFAULT_DOT_CAP_N, config.d_k, config.d_v, "dot_product") if max_peak_elements is None else max_peak_elements
    peak = memory_model(n, config.d_k, config.d_v, variant)
    if peak > cap:
        raise CapacityError(f"{variant} at N={n} needs {peak} elements, above the cap of {cap}")
    q, k, v = random_qkv(n, config.d_k, config.d_v, seed + n)
    fn = _kernel(variant)
    samples = []
    with no_grad():
        fn(q, k, v)  # warmup, discarded
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            fn(q, k, v)
            samples.append(time.perf_counter_ns() - t0)
    return BenchRow(
        variant,
        n,
        config.d_k,
        config.d_v,
        macc_model(n, config.d_k, config.d_v, variant),
        peak,
        int(statistics.median(samples)),
        projection_macc(n, d_x, config.d_k, config.d_v),
    )


def run_timing(
    variant: str,
    n_list: Sequence[int],
    config: Optional[AttentionConfig] = None,
    repetitions: int = 5,
    seed: int = 0,
    threads: int = 1,
    max_peak_elements: Optional[int] = None,
    on_capacity: Optional[Callable[[CapacityError], None]] = None,
) -> List[BenchRow]:
    """Median wall time per N, single-threaded, after an oracle sanity gate.

    Rows over the memory cap raise :class:`CapacityError`, or are skipped and
    reported through ``on_capacity`` when a handler is given.
    """
    if threads != 1:
        raise ConfigurationError("timing runs are single-threaded; threads must be 1")
    config = config or AttentionConfig.benchmark_default(variant)
    sanity_gate(config.d_k, config.d_v, seed)
    rows = []
    with threadpool_limits(limits=1):
        for n in n_list:
            try:
                rows.append(time_attention(variant, n, config, repetitions, seed, max_peak_elements))
            except CapacityError as exc:
                if on_capacity is None:
                    raise
                on_capacity(exc)
    return rows


def emit_curves(rows: Iterable[BenchRow], path=None) -> str:
    rows = list(rows)
    if not rows:
        raise UsageError("emit_curves needs at least one row")
    buf = io.StringIO()
    buf.write(CSV_COMMENT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.variant, r.n, r.d_k, r.d_v, r.macc, r.peak_elements, "" if r.median_ns is None else r.median_ns, r.proj_macc])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def model_rows(variants: Sequence[str], n_list: Sequence[int], d_k: int = 32, d_v: int = 64, d_x: int = 64) -> List[BenchRow]:
    """Analytic rows only (no timing); deterministic."""
    return [
        BenchRow(v, n, d_k, d_v, macc_model(n, d_k, d_v, v), memory_model(n, d_k, d_v, v), None, projection_macc(n, d_x, d_k, d_v))
        for v in variants
        for n in n_list
    ]
