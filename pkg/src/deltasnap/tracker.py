"""Modified-row tracking.

One bit per embedding row, kept in two accumulation scopes: rows touched
during the current checkpoint interval, and rows touched since the governing
baseline checkpoint. The since-baseline view is the OR of the stored baseline
accumulator and the live interval bitmap, so the interval scope is a subset of
it at every instant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ShapeError


class DirtyBitmap:
    """Fixed-length bitset over the rows of one table (1 bit per row)."""

    def __init__(self, table_id: int, rows: int):
        self.table_id = table_id
        self.rows = rows
        self._words = np.zeros((rows + 7) // 8, dtype=np.uint8)

    def mark(self, indices) -> None:
        """Set the bits for the given row indices; repeats are idempotent."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= self.rows:
            raise BoundsError(
                f"row index out of range for table {self.table_id} ({self.rows} rows)"
            )
        np.bitwise_or.at(self._words, idx >> 3, np.uint8(1) << (idx & 7).astype(np.uint8))

    def merge_or(self, other: "DirtyBitmap") -> "DirtyBitmap":
        """Bitwise OR into a new bitmap; neither input is modified."""
        if other.table_id != self.table_id or other.rows != self.rows:
            raise ShapeError("bitmaps cover different tables or lengths")
        out = DirtyBitmap(self.table_id, self.rows)
        np.bitwise_or(self._words, other._words, out=out._words)
        return out

    def merge_in(self, other: "DirtyBitmap") -> None:
        if other.table_id != self.table_id or other.rows != self.rows:
            raise ShapeError("bitmaps cover different tables or lengths")
        self._words |= other._words

    def popcount(self) -> int:
        return int(np.bitwise_count(self._words).sum())

    def dirty_rows(self) -> tuple[np.ndarray, float]:
        """Sorted dirty row indices and the dirty fraction."""
        bits = np.unpackbits(self._words, bitorder="little")[: self.rows]
        idx = np.flatnonzero(bits).astype(np.int64)
        return idx, idx.size / self.rows

    def clear(self) -> None:
        self._words[:] = 0

    def copy(self) -> "DirtyBitmap":
        out = DirtyBitmap(self.table_id, self.rows)
        out._words[:] = self._words
        return out

    @property
    def nbytes(self) -> int:
        return self._words.nbytes


@dataclass(frozen=True)
class TrackerView:
    """Immutable per-table row index sets captured during the stall window."""

    interval_rows: dict[int, np.ndarray]
    baseline_rows: dict[int, np.ndarray]
    interval_fraction: float
    baseline_fraction: float


class ModelTracker:
    """Dirty-row bookkeeping for every table of a model."""

    def __init__(self, table_rows: dict[int, int]):
        self._interval = {tid: DirtyBitmap(tid, n) for tid, n in table_rows.items()}
        self._baseline = {tid: DirtyBitmap(tid, n) for tid, n in table_rows.items()}
        self._total_rows = sum(table_rows.values())

    def mark(self, table_id: int, indices) -> None:
        self._interval[table_id].mark(indices)

    def interval_bitmap(self, table_id: int) -> DirtyBitmap:
        return self._interval[table_id]

    def since_baseline(self, table_id: int) -> DirtyBitmap:
        return self._baseline[table_id].merge_or(self._interval[table_id])

    def capture(self) -> TrackerView:
        """Copy out both scopes as sorted index arrays (called inside the stall)."""
        interval: dict[int, np.ndarray] = {}
        baseline: dict[int, np.ndarray] = {}
        n_int = 0
        n_base = 0
        for tid in sorted(self._interval):
            rows, _ = self._interval[tid].dirty_rows()
            interval[tid] = rows
            n_int += rows.size
            rows_b, _ = self.since_baseline(tid).dirty_rows()
            baseline[tid] = rows_b
            n_base += rows_b.size
        return TrackerView(
            interval_rows=interval,
            baseline_rows=baseline,
            interval_fraction=n_int / self._total_rows,
            baseline_fraction=n_base / self._total_rows,
        )

    def reset_interval(self) -> None:
        """Fold the interval scope into the baseline scope and clear it."""
        for tid, bm in self._interval.items():
            self._baseline[tid].merge_in(bm)
            bm.clear()

    def reset_baseline(self) -> None:
        """Start a new baseline: both scopes become empty."""
        for tid in self._interval:
            self._interval[tid].clear()
            self._baseline[tid].clear()

    def mark_baseline(self, table_id: int, indices) -> None:
        """Used at restore time to rebuild the since-baseline scope."""
        self._baseline[table_id].mark(indices)

    def nbytes(self) -> int:
        return sum(b.nbytes for b in self._interval.values()) + sum(
            b.nbytes for b in self._baseline.values()
        )
