import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deltasnap import quant
from deltasnap.errors import ConfigError, DataError, FormatError, ShapeError

ALL_N = (2, 3, 4, 8)


# --- independent reference implementations --------------------------------
# These re-derive the arithmetic from the documented formulas instead of
# calling back into the library, so they can catch systematic mistakes.


def ref_quantize_row(x, x_min, x_max, bitwidth):
    """Uniform codes for one row: round-half-away((clip(x)-min)/scale)."""
    x = np.asarray(x, dtype=np.float32).reshape(1, -1)
    lo = np.float32(x_min)
    hi = np.float32(x_max)
    levels = 2**bitwidth - 1
    scale = (np.float64(hi) - np.float64(lo)) / levels
    if scale <= 0:
        return np.zeros(x.shape, dtype=np.uint8)[0]
    v = (np.clip(x, lo, hi).astype(np.float64) - np.float64(lo)) / scale
    q = np.floor(v + 0.5)
    return np.clip(q, 0, levels).astype(np.uint8)[0]


def ref_dequantize_row(codes, x_min, x_max, bitwidth):
    lo = np.float32(x_min)
    hi = np.float32(x_max)
    scale = (np.float64(hi) - np.float64(lo)) / (2**bitwidth - 1)
    out = scale * np.asarray(codes, dtype=np.float64) + np.float64(lo)
    return out.astype(np.float32)


def ref_me(x_row, x_min, x_max, bitwidth):
    """Reconstruction L2 for one row, shaped like the library's row math."""
    x = np.asarray(x_row, dtype=np.float32).reshape(1, -1)
    codes = ref_quantize_row(x[0], x_min, x_max, bitwidth).reshape(1, -1)
    deq = ref_dequantize_row(codes[0], x_min, x_max, bitwidth).reshape(1, -1)
    return float(np.linalg.norm(x.astype(np.float64) - deq.astype(np.float64), axis=1)[0])


def ref_greedy(x_row, bitwidth, num_bins, ratio):
    """Literal greedy range search: shrink from the end that reduces the
    reconstruction error, ties shrink the min end, keep the best seen."""
    x = np.asarray(x_row, dtype=np.float32)
    lo0 = np.float32(x.min())
    hi0 = np.float32(x.max())
    best = (lo0, hi0)
    best_me = ref_me(x, lo0, hi0, bitwidth)
    step = (np.float64(hi0) - np.float64(lo0)) / num_bins
    cur_lo = np.float64(lo0)
    cur_hi = np.float64(hi0)
    if step <= 0:
        return best
    for _ in range(int(np.floor(num_bins * ratio + 1e-9))):
        if not (cur_hi - cur_lo - step > 0):
            break
        a = (np.float32(cur_lo + step), np.float32(cur_hi))
        b = (np.float32(cur_lo), np.float32(cur_hi - step))
        me_a = ref_me(x, *a, bitwidth)
        me_b = ref_me(x, *b, bitwidth)
        if me_a <= me_b:
            cur_lo = cur_lo + step
            cand, cand_me = a, me_a
        else:
            cur_hi = cur_hi - step
            cand, cand_me = b, me_b
        if cand_me < best_me:
            best, best_me = cand, cand_me
    return best


# --- uniform quantization -------------------------------------------------


def test_symmetric_worked_example():
    x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
    p = quant.uniform_params(x, 2, mode="symmetric")
    assert (p.x_min, p.x_max) == (-2.0, 2.0)
    assert p.scale == pytest.approx(4.0 / 3.0)
    assert p.zero_point == -2.0
    qv = quant.quantize(x, p)
    assert qv.codes.tolist() == [1, 2, 3]
    deq = quant.dequantize(qv)
    assert deq.dtype == np.float32
    assert np.allclose(deq, [-2 / 3, 2 / 3, 2], atol=1e-6)


def test_asymmetric_worked_example():
    x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
    p = quant.uniform_params(x, 2, mode="asymmetric")
    assert (p.x_min, p.x_max) == (-1.0, 2.0)
    assert p.scale == 1.0
    qv = quant.quantize(x, p)
    assert qv.codes.tolist() == [0, 1, 3]
    assert np.array_equal(quant.dequantize(qv), x)


def test_rounds_half_away_from_zero():
    # scale 1 with zero point 0: midpoints must round up, not to even.
    p = quant.QuantParams(2, 0.0, 3.0)
    qv = quant.quantize(np.array([0.5, 1.5, 2.5], dtype=np.float32), p)
    assert qv.codes.tolist() == [1, 2, 3]


def test_scale_and_zero_point_formulas():
    for n in ALL_N:
        p = quant.QuantParams(n, -0.75, 1.25)
        assert p.scale == (np.float32(1.25) - np.float32(-0.75)) / (2**n - 1)
        assert p.zero_point == np.float32(-0.75)


def test_params_are_float32_precision():
    p = quant.QuantParams(4, -1.0000000001, 0.30000000000001)
    assert p.x_min == float(np.float32(-1.0000000001))
    assert p.x_max == float(np.float32(0.30000000000001))


def test_degenerate_range_reconstructs_zero_point_exactly():
    x = np.full(9, 0.123, dtype=np.float32)
    p = quant.uniform_params(x, 3)
    assert p.scale == 0.0
    qv = quant.quantize(x, p)
    assert not qv.codes.any()
    assert np.array_equal(quant.dequantize(qv), x)


def test_out_of_range_values_are_clipped():
    p = quant.QuantParams(4, -1.0, 1.0)
    qv = quant.quantize(np.array([-5.0, 5.0], dtype=np.float32), p)
    assert qv.codes.tolist() == [0, 15]


def test_codes_fit_bitwidth():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 3, (50, 17)).astype(np.float32)
    for n in ALL_N:
        codes = quant.quantize_rows(x, x.min(axis=1), x.max(axis=1), n)
        assert codes.dtype == np.uint8
        assert codes.max() < 2**n


def test_matches_reference_row_implementation():
    rng = np.random.default_rng(7)
    for n in ALL_N:
        x = (rng.normal(0, 2, (40, 9)) * rng.lognormal(0, 1, (40, 1))).astype(np.float32)
        mins = x.min(axis=1)
        maxs = x.max(axis=1)
        codes = quant.quantize_rows(x, mins, maxs, n)
        deq = quant.dequantize_rows(codes, mins, maxs, n)
        for i in range(x.shape[0]):
            assert np.array_equal(codes[i], ref_quantize_row(x[i], mins[i], maxs[i], n))
            assert np.array_equal(deq[i], ref_dequantize_row(codes[i], mins[i], maxs[i], n))


@given(
    data=st.lists(
        st.floats(-1e4, 1e4, allow_nan=False, width=32), min_size=1, max_size=40
    ),
    n=st.sampled_from(ALL_N),
)
@settings(max_examples=200, deadline=None)
def test_round_trip_error_bound(data, n):
    x = np.array(data, dtype=np.float32)
    p = quant.uniform_params(x, n)
    deq = quant.dequantize(quant.quantize(x, p))
    tol = p.scale / 2 + np.spacing(np.maximum(np.abs(x), np.abs(deq)))
    assert (np.abs(x.astype(np.float64) - deq.astype(np.float64)) <= tol).all()


def test_dequantize_rejects_out_of_range_codes():
    codes = np.array([[0, 4]], dtype=np.uint8)
    with pytest.raises(FormatError):
        quant.dequantize_rows(codes, np.zeros(1, np.float32), np.ones(1, np.float32), 2)


def test_input_validation():
    with pytest.raises(DataError):
        quant.uniform_params(np.array([np.nan]), 4)
    with pytest.raises(DataError):
        quant.uniform_params(np.array([np.inf, 0.0]), 4)
    with pytest.raises(DataError):
        quant.uniform_params(np.array([]), 4)
    with pytest.raises(ConfigError):
        quant.uniform_params(np.array([1.0]), 5)
    with pytest.raises(ConfigError):
        quant.uniform_params(np.array([1.0]), 4, mode="sideways")
    with pytest.raises(DataError):
        quant.QuantParams(4, 1.0, -1.0)


# --- adaptive range search ------------------------------------------------


def test_adaptive_defaults_table():
    assert quant.default_adaptive_config(2) == quant.AdaptiveConfig(25, 0.5)
    assert quant.default_adaptive_config(3) == quant.AdaptiveConfig(25, 0.2)
    assert quant.default_adaptive_config(4) == quant.AdaptiveConfig(45, 0.2)
    assert quant.default_adaptive_config(8) is None


def test_adaptive_matches_greedy_reference():
    rng = np.random.default_rng(5)
    configs = [(25, 0.5), (25, 0.2), (45, 0.2), (10, 0.3), (2, 1.0), (1, 1.0)]
    x = rng.normal(0, 1, (30, 16)).astype(np.float32)
    x[:, 0] *= 10  # outliers so trimming pays off
    for n in (2, 3, 4):
        for bins, ratio in configs:
            mins, maxs = quant.adaptive_params_rows(x, n, quant.AdaptiveConfig(bins, ratio))
            for i in range(x.shape[0]):
                lo, hi = ref_greedy(x[i], n, bins, ratio)
                assert mins[i] == lo and maxs[i] == hi, (n, bins, ratio, i)


@given(
    data=st.lists(st.floats(-100, 100, allow_nan=False, width=32), min_size=2, max_size=24),
    n=st.sampled_from([2, 3, 4]),
)
@settings(max_examples=150, deadline=None)
def test_adaptive_never_beaten_by_naive(data, n):
    x = np.array(data, dtype=np.float32).reshape(1, -1)
    cfg = quant.default_adaptive_config(n)
    mins, maxs = quant.adaptive_params_rows(x, n, cfg)
    me_adaptive = quant.reconstruction_errors(x, mins, maxs, n)[0]
    me_naive = quant.reconstruction_errors(x, x.min(axis=1), x.max(axis=1), n)[0]
    assert me_adaptive <= me_naive


def test_adaptive_improves_on_outlier_vector():
    rng = np.random.default_rng(11)
    x = rng.normal(0, 0.1, (1, 64)).astype(np.float32)
    x[0, 3] = 5.0
    cfg = quant.default_adaptive_config(2)
    mins, maxs = quant.adaptive_params_rows(x, 2, cfg)
    me_adaptive = quant.reconstruction_errors(x, mins, maxs, 2)[0]
    me_naive = quant.reconstruction_errors(x, x.min(axis=1), x.max(axis=1), 2)[0]
    assert me_adaptive < me_naive


def test_adaptive_single_vector_wrapper():
    x = np.array([0.0, 0.1, 0.2, 8.0], dtype=np.float32)
    p = quant.adaptive_params(x, 2)
    lo, hi = ref_greedy(x, 2, 25, 0.5)
    assert (p.x_min, p.x_max) == (float(lo), float(hi))
    # 8-bit falls back to the naive asymmetric range
    p8 = quant.adaptive_params(x, 8)
    assert (p8.x_min, p8.x_max) == (0.0, 8.0)


def test_adaptive_constant_vector_stops_immediately():
    x = np.full((1, 6), 2.5, dtype=np.float32)
    mins, maxs = quant.adaptive_params_rows(x, 2, quant.AdaptiveConfig(25, 0.5))
    assert mins[0] == 2.5 and maxs[0] == 2.5


def test_adaptive_config_validation():
    with pytest.raises(ConfigError):
        quant.AdaptiveConfig(0, 0.5)
    with pytest.raises(ConfigError):
        quant.AdaptiveConfig(10, 0.0)
    with pytest.raises(ConfigError):
        quant.AdaptiveConfig(10, 1.5)


# --- mean L2 --------------------------------------------------------------


def test_mean_l2_loss_hand_computed():
    a = np.array([[3.0, 0.0], [0.0, 0.0]])
    b = np.array([[0.0, 4.0], [0.0, 1.0]])
    assert quant.mean_l2_loss(a, b) == pytest.approx((5.0 + 1.0) / 2)
    assert quant.mean_l2_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ShapeError):
        quant.mean_l2_loss(np.zeros((2, 3)), np.zeros((2, 4)))


# --- k-means codec --------------------------------------------------------


def test_kmeans_sse_never_increases():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(-2, 0.3, 200), rng.normal(5, 1.0, 300)])
    _, _, history = quant.scalar_kmeans_1d(x, 8, 15, np.random.default_rng(0))
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_kmeans_exact_when_few_distinct_values():
    x = np.array([1.0, -3.0, 1.0, 7.0, -3.0, 7.0, 1.0], dtype=np.float32)
    codebook, codes, _ = quant.scalar_kmeans_1d(x, 4, 15, np.random.default_rng(0))
    assert codebook.shape == (4,)
    assert np.array_equal(codebook[codes], x.astype(np.float32))


def test_kmeans_reconstruction_beats_uniform_on_clustered_data():
    rng = np.random.default_rng(9)
    # two tight value clusters: a 2-bit uniform grid wastes codes between them
    x = np.where(rng.random((20, 32)) < 0.5,
                 rng.normal(-4, 0.05, (20, 32)), rng.normal(4, 0.05, (20, 32))).astype(np.float32)
    result = quant.kmeans_quantize(x, 2, granularity="per_vector", seed=1)
    km = quant.mean_l2_loss(x, result.reconstruct())
    uni = float(quant.reconstruction_errors(x, x.min(axis=1), x.max(axis=1), 2).mean())
    assert km < uni


def test_kmeans_deterministic_for_fixed_seed():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 1, (12, 10)).astype(np.float32)
    a = quant.kmeans_quantize(x, 3, granularity="per_vector", seed=5)
    b = quant.kmeans_quantize(x, 3, granularity="per_vector", seed=5)
    assert np.array_equal(a.codes, b.codes)
    assert np.array_equal(a.codebooks, b.codebooks)


def test_kmeans_granularities():
    rng = np.random.default_rng(4)
    x = rng.normal(0, 1, (10, 6)).astype(np.float32)
    per = quant.kmeans_quantize(x, 2, granularity="per_vector")
    assert per.codebooks.shape == (10, 4)
    assert per.row_unit.tolist() == list(range(10))

    blocks = quant.kmeans_quantize(x, 2, granularity="contiguous_blocks", num_blocks=3)
    assert blocks.codebooks.shape == (3, 4)
    assert blocks.row_unit.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
    assert np.array_equal(np.unique(blocks.row_unit), [0, 1, 2])

    clustered = quant.kmeans_quantize(x, 2, granularity="clustered_blocks", num_blocks=3)
    assert clustered.codebooks.shape == (3, 4)
    assert set(clustered.row_unit.tolist()) <= {0, 1, 2}

    for result in (per, blocks, clustered):
        assert result.reconstruct().shape == x.shape
        assert result.codes.max() < 4

    with pytest.raises(ConfigError):
        quant.kmeans_quantize(x, 2, granularity="spiral")


# --- bit packing ----------------------------------------------------------


def test_pack_worked_example():
    assert quant.pack_codes([0, 1, 2, 3], 2) == b"\xe4"


def test_packed_size_formula():
    assert quant.packed_size(3, 2) == 1
    assert quant.packed_size(5, 2) == 2
    assert quant.packed_size(3, 3) == 2
    assert quant.packed_size(16, 4) == 8
    assert quant.packed_size(1, 8) == 1


def test_pack_unpack_round_trip_all_widths_and_dims():
    rng = np.random.default_rng(0)
    for n in ALL_N:
        for dim in list(range(1, 20)) + [31, 32, 33, 64, 65]:
            codes = rng.integers(0, 2**n, size=dim)
            data = quant.pack_codes(codes, n)
            assert len(data) == quant.packed_size(dim, n)
            assert np.array_equal(quant.unpack_codes(data, n, dim), codes)


def test_pack_row_matrix_round_trip():
    rng = np.random.default_rng(8)
    for n in ALL_N:
        codes = rng.integers(0, 2**n, size=(13, 21)).astype(np.uint8)
        packed = quant.pack_code_rows(codes, n)
        assert packed.shape == (13, quant.packed_size(21, n))
        assert np.array_equal(quant.unpack_code_rows(packed, n, 21), codes)


def test_pack_rejects_out_of_range():
    with pytest.raises(DataError):
        quant.pack_codes([4], 2)
    with pytest.raises(DataError):
        quant.pack_codes([-1], 2)


def test_unpack_rejects_bad_sizes_and_padding():
    with pytest.raises(FormatError):
        quant.unpack_codes(b"\x00\x00", 2, 3)
    with pytest.raises(FormatError):
        quant.unpack_codes(b"", 2, 3)
    # 3 codes x 2 bits leaves 2 padding bits; set one of them
    with pytest.raises(FormatError):
        quant.unpack_codes(b"\xc0", 2, 3)


# --- benchmark corpus -----------------------------------------------------


def test_benchmark_corpus_shape_and_determinism():
    a = quant.benchmark_corpus(50, 16, seed=3)
    b = quant.benchmark_corpus(50, 16, seed=3)
    assert a.shape == (50, 16) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert not np.array_equal(a, quant.benchmark_corpus(50, 16, seed=4))
    # per-vector scales should span a wide range
    spread = np.abs(a).max(axis=1)
    assert spread.max() / spread.min() > 10
