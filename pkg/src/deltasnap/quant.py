"""Per-vector lossy codecs for embedding rows.

Uniform quantization maps a clipped element x to an integer code

    code = round((clip(x) - zero_point) / scale),  scale = (x_max - x_min) / (2^N - 1)

with zero_point = x_min and rounding half away from zero. Range selection is
either naive (vector min/max, or symmetric about zero), or adaptive: a greedy
search that repeatedly shrinks the range from whichever end lowers the
reconstruction error. A scalar k-means codec (per vector or per block) is
included for comparison benchmarks; it is not part of the checkpoint wire
format.

All codecs are pure functions of their inputs and operate row-independently,
so chunking rows in any way yields identical per-row output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

VALID_BITWIDTHS = (2, 3, 4, 8)

# Greedy-search defaults per bitwidth: (num_bins, ratio). 8-bit checkpoints
# use naive asymmetric ranges instead of the search.
DEFAULT_ADAPTIVE = {2: (25, 0.5), 3: (25, 0.2), 4: (45, 0.2)}


@dataclass(frozen=True)
class QuantParams:
    """Uniform quantization range for one vector.

    x_min/x_max are stored at float32 precision, exactly as they appear on
    the wire.
    """

    bitwidth: int
    x_min: float
    x_max: float

    def __post_init__(self):
        if self.bitwidth not in VALID_BITWIDTHS:
            raise ConfigError(f"bitwidth must be one of {VALID_BITWIDTHS}")
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)):
            raise DataError("quantization range must be finite")
        if self.x_min > self.x_max:
            raise DataError("x_min must not exceed x_max")
        object.__setattr__(self, "x_min", float(np.float32(self.x_min)))
        object.__setattr__(self, "x_max", float(np.float32(self.x_max)))

    @property
    def scale(self) -> float:
        return (self.x_max - self.x_min) / (2**self.bitwidth - 1)

    @property
    def zero_point(self) -> float:
        return self.x_min


@dataclass(frozen=True)
class QuantizedVector:
    params: QuantParams
    codes: np.ndarray  # (dim,) uint8, each < 2^bitwidth


def _check_finite(x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise DataError("vector contains NaN or Inf")


def uniform_params(vector, bitwidth: int, mode: str = "asymmetric") -> QuantParams:
    """Range selection: asymmetric uses (min, max); symmetric uses +-max|x|."""
    x = np.asarray(vector, dtype=np.float32)
    if x.size == 0:
        raise DataError("vector must be non-empty")
    _check_finite(x)
    if mode == "asymmetric":
        return QuantParams(bitwidth, float(x.min()), float(x.max()))
    if mode == "symmetric":
        m = float(np.abs(x).max())
        return QuantParams(bitwidth, -m, m)
    raise ConfigError(f"unknown mode {mode!r}")


def _scales(mins: np.ndarray, maxs: np.ndarray, bitwidth: int) -> np.ndarray:
    return (maxs.astype(np.float64) - mins.astype(np.float64)) / (2**bitwidth - 1)


def quantize_rows(x: np.ndarray, mins: np.ndarray, maxs: np.ndarray, bitwidth: int) -> np.ndarray:
    """Vectorized uniform quantization with per-row ranges.

    Returns a (rows, dim) uint8 code matrix. A degenerate range (scale 0)
    yields all-zero codes.
    """
    levels = 2**bitwidth - 1
    scale = _scales(mins, maxs, bitwidth)
    safe = np.where(scale > 0, scale, 1.0)
    clipped = np.clip(x, mins[:, None], maxs[:, None]).astype(np.float64)
    v = (clipped - mins.astype(np.float64)[:, None]) / safe[:, None]
    q = np.floor(v + 0.5)
    np.clip(q, 0, levels, out=q)
    return q.astype(np.uint8)


def dequantize_rows(codes: np.ndarray, mins: np.ndarray, maxs: np.ndarray, bitwidth: int) -> np.ndarray:
    """Inverse of quantize_rows: scale * code + zero_point, as float32."""
    if codes.size and int(codes.max()) >= 2**bitwidth:
        raise FormatError(f"code out of range for bitwidth {bitwidth}")
    scale = _scales(mins, maxs, bitwidth)
    out = scale[:, None] * codes.astype(np.float64) + mins.astype(np.float64)[:, None]
    return out.astype(np.float32)


def quantize(vector, params: QuantParams) -> QuantizedVector:
    x = np.asarray(vector, dtype=np.float32).reshape(1, -1)
    _check_finite(x)
    mins = np.array([params.x_min], dtype=np.float32)
    maxs = np.array([params.x_max], dtype=np.float32)
    codes = quantize_rows(x, mins, maxs, params.bitwidth)[0]
    return QuantizedVector(params, codes)


def dequantize(qv: QuantizedVector) -> np.ndarray:
    codes = np.asarray(qv.codes).reshape(1, -1)
    mins = np.array([qv.params.x_min], dtype=np.float32)
    maxs = np.array([qv.params.x_max], dtype=np.float32)
    return dequantize_rows(codes, mins, maxs, qv.params.bitwidth)[0]


def reconstruction_errors(x: np.ndarray, mins: np.ndarray, maxs: np.ndarray, bitwidth: int) -> np.ndarray:
    """Per-row Euclidean norm of (x - dequantize(quantize(x)))."""
    codes = quantize_rows(x, mins, maxs, bitwidth)
    deq = dequantize_rows(codes, mins, maxs, bitwidth)
    return np.linalg.norm(x.astype(np.float64) - deq.astype(np.float64), axis=1)


@dataclass(frozen=True)
class AdaptiveConfig:
    num_bins: int
    ratio: float

    def __post_init__(self):
        if self.num_bins < 1:
            raise ConfigError("num_bins must be >= 1")
        if not (0 < self.ratio <= 1):
            raise ConfigError("ratio must be in (0, 1]")


def default_adaptive_config(bitwidth: int) -> AdaptiveConfig | None:
    """Per-bitwidth search defaults; None means use naive asymmetric (8-bit)."""
    if bitwidth in DEFAULT_ADAPTIVE:
        return AdaptiveConfig(*DEFAULT_ADAPTIVE[bitwidth])
    return None


def adaptive_params_rows(
    x: np.ndarray, bitwidth: int, cfg: AdaptiveConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy range search, vectorized over rows.

    Starts from each row's (min, max) and performs floor(num_bins * ratio)
    steps; each step shrinks the range by step_size = full_range / num_bins
    from whichever end gives the lower reconstruction error (ties shrink the
    min end), stopping early for rows whose range would become non-positive.
    Returns the float32 (mins, maxs) with the lowest error seen, which is
    never worse than the starting naive asymmetric range.
    """
    x = np.asarray(x, dtype=np.float32)
    _check_finite(x)
    mins0 = x.min(axis=1)
    maxs0 = x.max(axis=1)
    full_range = maxs0.astype(np.float64) - mins0.astype(np.float64)
    step = full_range / cfg.num_bins

    best_min = mins0.copy()
    best_max = maxs0.copy()
    best_me = reconstruction_errors(x, best_min, best_max, bitwidth)

    cur_min = mins0.astype(np.float64)
    cur_max = maxs0.astype(np.float64)
    active = step > 0
    steps = int(np.floor(cfg.num_bins * cfg.ratio + 1e-9))
    for _ in range(steps):
        active = active & (cur_max - cur_min - step > 0)
        if not active.any():
            break
        a_min = (cur_min + step).astype(np.float32)
        a_max = cur_max.astype(np.float32)
        b_min = cur_min.astype(np.float32)
        b_max = (cur_max - step).astype(np.float32)
        me_a = reconstruction_errors(x, a_min, a_max, bitwidth)
        me_b = reconstruction_errors(x, b_min, b_max, bitwidth)

        take_a = me_a <= me_b
        cur_min = np.where(active & take_a, cur_min + step, cur_min)
        cur_max = np.where(active & ~take_a, cur_max - step, cur_max)
        me_cur = np.where(take_a, me_a, me_b)
        cand_min = np.where(take_a, a_min, b_min)
        cand_max = np.where(take_a, a_max, b_max)

        improved = active & (me_cur < best_me)
        best_min = np.where(improved, cand_min, best_min)
        best_max = np.where(improved, cand_max, best_max)
        best_me = np.where(improved, me_cur, best_me)
    return best_min.astype(np.float32), best_max.astype(np.float32)


def adaptive_params(vector, bitwidth: int, cfg: AdaptiveConfig | None = None) -> QuantParams:
    """Greedy-search range for one vector (see adaptive_params_rows)."""
    if cfg is None:
        cfg = default_adaptive_config(bitwidth)
        if cfg is None:
            return uniform_params(vector, bitwidth, "asymmetric")
    x = np.asarray(vector, dtype=np.float32).reshape(1, -1)
    if x.size == 0:
        raise DataError("vector must be non-empty")
    mins, maxs = adaptive_params_rows(x, bitwidth, cfg)
    return QuantParams(bitwidth, float(mins[0]), float(maxs[0]))


def mean_l2_loss(original, reconstructed) -> float:
    """Mean over rows of the Euclidean norm of the row difference."""
    a = np.atleast_2d(np.asarray(original, dtype=np.float64))
    b = np.atleast_2d(np.asarray(reconstructed, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=1).mean())


# --- k-means codec (benchmark only) ---------------------------------------


def scalar_kmeans_1d(
    elements, n_clusters: int, iterations: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm on scalars.

    Centroids start as a seeded sample (without replacement) of the distinct
    element values; if there are at most n_clusters distinct values the exact
    codebook is returned, padded with duplicates. Returns (codebook float32,
    codes, per-iteration SSE history).
    """
    x = np.asarray(elements, dtype=np.float64).ravel()
    distinct = np.unique(x)
    k = n_clusters
    if distinct.size <= k:
        codebook = np.concatenate([distinct, np.full(k - distinct.size, distinct[-1])])
        codes = np.searchsorted(distinct, x)
        return codebook.astype(np.float32), codes.astype(np.uint8), [0.0]

    centroids = np.sort(rng.choice(distinct, size=k, replace=False))
    history: list[float] = []
    prev_codes = None
    for _ in range(iterations):
        bounds = (centroids[1:] + centroids[:-1]) / 2
        codes = np.searchsorted(bounds, x)
        history.append(float(((x - centroids[codes]) ** 2).sum()))
        counts = np.bincount(codes, minlength=k)
        sums = np.bincount(codes, weights=x, minlength=k)
        centroids = np.where(counts > 0, sums / np.maximum(counts, 1), centroids)
        if prev_codes is not None and np.array_equal(codes, prev_codes):
            break
        prev_codes = codes
    bounds = (centroids[1:] + centroids[:-1]) / 2
    codes = np.searchsorted(bounds, x)
    return centroids.astype(np.float32), codes.astype(np.uint8), history


def _vector_kmeans(x: np.ndarray, n_clusters: int, iterations: int, rng: np.random.Generator) -> np.ndarray:
    """Cluster whole rows by Euclidean distance; returns a label per row."""
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] <= n_clusters:
        centroids = distinct.astype(np.float64)
    else:
        pick = rng.choice(distinct.shape[0], size=n_clusters, replace=False)
        centroids = distinct[np.sort(pick)].astype(np.float64)
    xd = x.astype(np.float64)
    x2 = (xd**2).sum(axis=1)
    labels = None
    for _ in range(iterations):
        c2 = (centroids**2).sum(axis=1)
        d2 = x2[:, None] - 2 * xd @ centroids.T + c2[None, :]
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for b in range(centroids.shape[0]):
            members = labels == b
            if members.any():
                centroids[b] = xd[members].mean(axis=0)
    return labels


@dataclass
class KMeansResult:
    """Codebook-quantized matrix: one codebook per unit, codes index into it."""

    granularity: str
    codebooks: np.ndarray  # (units, 2^N) float32
    codes: np.ndarray      # (rows, dim) uint8
    row_unit: np.ndarray   # (rows,) unit index per row

    def reconstruct(self) -> np.ndarray:
        return self.codebooks[self.row_unit[:, None], self.codes].astype(np.float32)


def kmeans_quantize(
    rows,
    bitwidth: int,
    granularity: str = "per_vector",
    num_blocks: int = 1,
    iterations: int = 15,
    seed: int = 0,
) -> KMeansResult:
    """Scalar k-means codec at one of three unit granularities.

    per_vector treats each row as its own unit; contiguous_blocks pools
    num_blocks groups of adjacent rows; clustered_blocks first groups similar
    rows (vector-level k-means), then builds one scalar codebook per group.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if bitwidth not in VALID_BITWIDTHS:
        raise ConfigError(f"bitwidth must be one of {VALID_BITWIDTHS}")
    x = np.asarray(rows, dtype=np.float32)
    if x.ndim != 2 or x.size == 0:
        raise ShapeError("rows must be a non-empty 2-D matrix")
    _check_finite(x)
    m, dim = x.shape
    k = 2**bitwidth
    rng = np.random.default_rng(seed)

    if granularity == "per_vector":
        codebooks = np.empty((m, k), dtype=np.float32)
        codes = np.empty((m, dim), dtype=np.uint8)
        for i in range(m):
            cb, cd, _ = scalar_kmeans_1d(x[i], k, iterations, rng)
            codebooks[i] = cb
            codes[i] = cd
        return KMeansResult(granularity, codebooks, codes, np.arange(m))

    if granularity not in ("contiguous_blocks", "clustered_blocks"):
        raise ConfigError(f"unknown granularity {granularity!r}")
    if not (1 <= num_blocks <= m):
        raise ConfigError("num_blocks must be in [1, rows]")

    if granularity == "contiguous_blocks":
        row_unit = np.repeat(np.arange(num_blocks), np.diff(np.linspace(0, m, num_blocks + 1).astype(int)))
    else:
        row_unit = _vector_kmeans(x, num_blocks, iterations, rng)

    units = int(row_unit.max()) + 1
    codebooks = np.zeros((units, k), dtype=np.float32)
    codes = np.empty((m, dim), dtype=np.uint8)
    for b in range(units):
        members = row_unit == b
        if not members.any():
            continue
        cb, cd, _ = scalar_kmeans_1d(x[members].ravel(), k, iterations, rng)
        codebooks[b] = cb
        codes[members] = cd.reshape(-1, dim)
    return KMeansResult(granularity, codebooks, codes, row_unit)


# --- bit packing ----------------------------------------------------------


def packed_size(dim: int, bitwidth: int) -> int:
    return (dim * bitwidth + 7) // 8


def pack_code_rows(codes: np.ndarray, bitwidth: int) -> np.ndarray:
    """Pack a (rows, dim) code matrix LSB-first into (rows, packed_size) bytes."""
    if codes.size and int(codes.max()) >= 2**bitwidth:
        raise DataError(f"code out of range for bitwidth {bitwidth}")
    rows, dim = codes.shape
    bits = ((codes[:, :, None].astype(np.uint8) >> np.arange(bitwidth, dtype=np.uint8)) & 1)
    return np.packbits(bits.reshape(rows, dim * bitwidth), axis=1, bitorder="little")


def unpack_code_rows(packed: np.ndarray, bitwidth: int, dim: int) -> np.ndarray:
    """Inverse of pack_code_rows; validates width and zero padding."""
    rows = packed.shape[0]
    if packed.shape[1] != packed_size(dim, bitwidth):
        raise FormatError("packed code block has the wrong size")
    bits = np.unpackbits(packed, axis=1, bitorder="little")
    if bits[:, dim * bitwidth:].any():
        raise FormatError("nonzero padding bits in packed codes")
    weights = (1 << np.arange(bitwidth)).astype(np.int64)
    codes = bits[:, : dim * bitwidth].reshape(rows, dim, bitwidth).astype(np.int64) @ weights
    return codes.astype(np.uint8)


def pack_codes(codes, bitwidth: int) -> bytes:
    """Bit-pack a code sequence LSB-first into little-endian bytes."""
    arr = np.asarray(codes, dtype=np.int64).reshape(1, -1)
    if arr.size and (arr.min() < 0 or arr.max() >= 2**bitwidth):
        raise DataError(f"code out of range for bitwidth {bitwidth}")
    return pack_code_rows(arr.astype(np.uint8), bitwidth).tobytes()


def unpack_codes(data: bytes, bitwidth: int, dim: int) -> np.ndarray:
    """Inverse of pack_codes. Rejects truncated or oversized byte strings."""
    expected = packed_size(dim, bitwidth)
    if len(data) != expected:
        raise FormatError(f"expected {expected} packed bytes, got {len(data)}")
    packed = np.frombuffer(data, dtype=np.uint8).reshape(1, expected)
    return unpack_code_rows(packed, bitwidth, dim)[0]


# --- benchmark corpus -----------------------------------------------------


def benchmark_corpus(num_vectors: int, dim: int, seed: int = 0) -> np.ndarray:
    """Synthetic embedding rows for codec comparisons.

    Per-vector scales span orders of magnitude, each vector carries an
    offset (so its value range is not centered on zero), and a few
    elements per vector are large outliers. This is the value shape that
    separates symmetric from asymmetric ranges and rewards range
    trimming.
    """
    if num_vectors < 1 or dim < 1:
        raise DataError("corpus needs at least one vector and one dimension")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1729)))
    scale = np.exp(rng.normal(0.0, 1.0, num_vectors))
    shift = rng.normal(0.4, 0.3, num_vectors) * scale
    x = rng.normal(0.0, 1.0, (num_vectors, dim)) * scale[:, None] + shift[:, None]
    n_out = max(1, dim // 32)
    cols = rng.integers(0, dim, (num_vectors, n_out))
    amp = rng.uniform(4.0, 8.0, (num_vectors, n_out)) * scale[:, None]
    signs = rng.choice([-1.0, 1.0], (num_vectors, n_out))
    np.add.at(x, (np.arange(num_vectors)[:, None], cols), signs * amp)
    return x.astype(np.float32)
