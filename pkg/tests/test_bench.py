import numpy as np
import pytest

from a2fpn.attention import AttentionConfig, dot_product_attention, linear_attention
from a2fpn.autodiff import no_grad
from a2fpn.bench import (
    CSV_COLUMNS,
    DEFAULT_DOT_CAP_N,
    crossover_n,
    emit_curves,
    linear_state_elements,
    macc_model,
    measure_peak_bytes,
    memory_model,
    model_rows,
    operand_baseline,
    projection_macc,
    random_qkv,
    run_timing,
    sanity_gate,
    time_attention,
)
from a2fpn.errors import CapacityError, ConfigurationError, UsageError

D_K, D_V = 32, 64


def test_dot_leading_term_at_1024():
    n = 1024
    assert n * n * (D_K + D_V) == 100_663_296
    assert macc_model(n, D_K, D_V, "dot_product") == n * n * (D_K + D_V) + 2 * n * n


def test_linear_leading_term_at_1024():
    n = 1024
    lead = 2 * n * D_K * D_V
    assert lead == 4_194_304
    assert macc_model(n, D_K, D_V, "linear") == lead + n * D_K + n * D_V + 2 * n * D_K


def test_macc_ratios_at_2_16():
    n = 2**16
    dot = macc_model(2 * n, D_K, D_V, "dot_product") / macc_model(n, D_K, D_V, "dot_product")
    lin = macc_model(2 * n, D_K, D_V, "linear") / macc_model(n, D_K, D_V, "linear")
    assert abs(dot - 4) / 4 <= 0.01
    assert abs(lin - 2) / 2 <= 0.01


def test_crossover_is_brute_force_threshold_below_256():
    n0 = crossover_n(D_K, D_V)
    brute = next(n for n in range(1, 10_000) if all(
        macc_model(m, D_K, D_V, "linear") < macc_model(m, D_K, D_V, "dot_product") for m in range(n, n + 2000)
    ))
    assert n0 == brute
    assert n0 < 256
    assert macc_model(n0 - 1, D_K, D_V, "linear") >= macc_model(n0 - 1, D_K, D_V, "dot_product")


def test_dot_memory_includes_weight_matrix():
    assert memory_model(8192, D_K, D_V, "dot_product") >= 67_108_864


def test_linear_state_independent_of_n():
    assert linear_state_elements(D_K, D_V) == D_K * D_V + D_K + D_V
    a, b = memory_model(1000, D_K, D_V, "linear"), memory_model(2000, D_K, D_V, "linear")
    c = memory_model(3000, D_K, D_V, "linear")
    assert b - a == c - b  # affine in N
    assert a - 1000 * (b - a) // 1000 == linear_state_elements(D_K, D_V)


@pytest.mark.parametrize("n", [256, 1024, 4096])
def test_memory_gap_at_least_quadratic(n):
    gap = memory_model(n, D_K, D_V, "dot_product") - memory_model(n, D_K, D_V, "linear")
    c = 2 * D_K + 2 * D_V + 2 + D_K * D_V
    assert gap >= n * n - c * n


@pytest.mark.parametrize("n", [2048, 8192])
def test_linear_memory_model_matches_allocation_counter(n):
    q, k, v = random_qkv(n, D_K, D_V)
    with no_grad():
        measured = measure_peak_bytes(lambda: linear_attention(q, k, v)) / 8
    model = memory_model(n, D_K, D_V, "linear")
    assert abs(measured - model) <= operand_baseline(n, D_K, D_V)


def test_dot_memory_model_matches_allocation_counter():
    n = 1024
    q, k, v = random_qkv(n, D_K, D_V)
    with no_grad():
        measured = measure_peak_bytes(lambda: dot_product_attention(q, k, v)) / 8
    assert abs(measured - memory_model(n, D_K, D_V, "dot_product")) <= operand_baseline(n, D_K, D_V)


def test_unknown_variant():
    with pytest.raises(ConfigurationError):
        macc_model(10, 2, 2, "kernel")


def test_projection_macc():
    assert projection_macc(10, 64, D_K, D_V) == 10 * 64 * (2 * D_K + D_V)


def test_sanity_gate_passes():
    sanity_gate(D_K, D_V)


def test_sanity_gate_catches_fault():
    from a2fpn import attention
    from a2fpn.errors import PropertyFailure

    attention.set_fault_injection(True)
    try:
        with pytest.raises(PropertyFailure):
            sanity_gate(D_K, D_V)
    finally:
        attention.set_fault_injection(False)


def test_timing_rows_and_csv():
    rows = run_timing("linear", [64, 128], repetitions=5)
    rows += run_timing("dot_product", [64, 128], repetitions=5)
    assert len(rows) == 2 * 2
    text = emit_curves(rows)
    lines = text.splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == ",".join(CSV_COLUMNS)
    assert len(lines) == 2 + 4
    for r in rows:
        assert r.macc == macc_model(r.n, r.d_k, r.d_v, r.variant)
        assert r.median_ns > 0


def test_deterministic_columns_repeat():
    def strip_time(text):
        return [line.split(",")[:6] for line in text.splitlines()[1:]]

    a = emit_curves(run_timing("linear", [64, 256], repetitions=5, seed=3))
    b = emit_curves(run_timing("linear", [64, 256], repetitions=5, seed=3))
    assert strip_time(a) == strip_time(b)


def test_emit_curves_rejects_empty(tmp_path):
    with pytest.raises(UsageError):
        emit_curves([], tmp_path / "x.csv")
    assert not (tmp_path / "x.csv").exists()


def test_model_rows_count():
    rows = model_rows(("dot_product", "linear"), [256, 512, 1024])
    assert len(rows) == 6
    assert all(r.median_ns is None for r in rows)


def test_parallel_timing_rejected():
    with pytest.raises(ConfigurationError):
        run_timing("linear", [64], threads=2)


def test_too_few_repetitions_rejected():
    with pytest.raises(ConfigurationError):
        time_attention("linear", 64, AttentionConfig(D_K, D_V), repetitions=3)


def test_capacity_error_and_handler():
    cfg = AttentionConfig(D_K, D_V, "dot_product")
    with pytest.raises(CapacityError):
        time_attention("dot_product", 2 * DEFAULT_DOT_CAP_N, cfg)
    skipped = []
    rows = run_timing("dot_product", [64, 2 * DEFAULT_DOT_CAP_N], repetitions=5, on_capacity=skipped.append)
    assert [r.n for r in rows] == [64] and len(skipped) == 1


def test_linear_reaches_beyond_dot_cap():
    cap = memory_model(DEFAULT_DOT_CAP_N, D_K, D_V, "dot_product")
    assert memory_model(65536, D_K, D_V, "linear") <= cap
    assert memory_model(2 * DEFAULT_DOT_CAP_N, D_K, D_V, "dot_product") > cap


def test_bench_uses_library_kernel():
    q, k, v = random_qkv(50, 4, 6, seed=2)
    from a2fpn import bench

    assert bench._kernel("linear") is linear_attention
    np.testing.assert_array_equal(bench._kernel("linear")(q, k, v).data, linear_attention(q, k, v).data)
