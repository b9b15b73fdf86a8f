"""Checkpoint sizing policies and bit-width selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .tracker import TrackerView

POLICY_KINDS = ("full_only", "one_shot_baseline", "consecutive_increment", "intermittent")

FULL = "full"
INCREMENTAL = "incremental"

# Max resumes each bit-width can absorb before accuracy degrades enough
# that the run should fall back to 8-bit.
FALLBACK_ALLOWANCE = {2: 1, 3: 3, 4: 20, 8: math.inf}


@dataclass
class IntervalHistory:
    """Relative sizes S_1..S_i of increments written since the last full
    checkpoint, each as a fraction of that full checkpoint's bytes.

    Sizes are clamped to 1.0: an increment that costs as much as a full
    checkpoint should make the predictor flip immediately, and larger
    values would only overstate the case.
    """

    sizes: list[float] = field(default_factory=list)

    def record(self, fraction: float) -> None:
        if not math.isfinite(fraction) or fraction < 0.0:
            raise DataError(f"invalid increment fraction {fraction!r}")
        self.sizes.append(min(fraction, 1.0))

    def reset(self) -> None:
        self.sizes.clear()

    def __len__(self) -> int:
        return len(self.sizes)


def intermittent_decide(history: IntervalHistory) -> str:
    """Decide the next checkpoint kind from increment size history.

    Compares the forward cost of writing a full checkpoint now and
    increments after (F = 1 + sum(S_1..S_i)) against continuing with
    increments of the current size (I = (i+1) * S_i), both over a window
    of i+1 checkpoints. Ties choose full. An empty history (the baseline
    was just written) stays incremental.
    """
    if not history.sizes:
        return INCREMENTAL
    i = len(history.sizes)
    full_cost = 1.0 + sum(history.sizes)
    incremental_cost = (i + 1) * history.sizes[-1]
    return FULL if full_cost <= incremental_cost else INCREMENTAL


@dataclass(frozen=True)
class CheckpointPlan:
    """What the next checkpoint should contain.

    rows maps table_id to the sorted row indices to write; None means
    every row (a full checkpoint).
    """

    kind: str
    rows: dict[int, np.ndarray] | None
    bitwidth: int | None


def plan_checkpoint(
    policy: str,
    view: TrackerView,
    history: IntervalHistory,
    bitwidth: int | None,
    has_baseline: bool,
) -> CheckpointPlan:
    """Choose full vs incremental and the row set for each table."""
    if policy not in POLICY_KINDS:
        raise ConfigError(f"unknown policy {policy!r}")

    if policy == "full_only" or not has_baseline:
        kind = FULL
    elif policy == "intermittent":
        kind = intermittent_decide(history)
    else:
        kind = INCREMENTAL

    if kind == FULL:
        return CheckpointPlan(kind=FULL, rows=None, bitwidth=bitwidth)
    if policy == "consecutive_increment":
        rows = dict(view.interval_rows)
    else:
        rows = dict(view.baseline_rows)
    return CheckpointPlan(kind=INCREMENTAL, rows=rows, bitwidth=bitwidth)


@dataclass(frozen=True)
class FailureModel:
    """Per-node-hour failure rate and the job's footprint."""

    failure_rate: float
    nodes: int
    duration_hours: float

    def __post_init__(self):
        if not (0.0 <= self.failure_rate <= 1.0):
            raise ConfigError("failure_rate must be in [0, 1]")
        if self.nodes < 1:
            raise ConfigError("nodes must be >= 1")
        if self.duration_hours < 0:
            raise ConfigError("duration_hours must be >= 0")


def expected_failures(model: FailureModel) -> float:
    return model.failure_rate * model.nodes * model.duration_hours


def select_bitwidth(expected: float) -> int:
    """Pick the smallest bit-width whose resume allowance covers the
    expected number of failures (rounded up)."""
    if not math.isfinite(expected) or expected < 0:
        raise DataError(f"invalid expected failure count {expected!r}")
    count = math.ceil(expected)
    if count <= 1:
        return 2
    if count <= 3:
        return 3
    if count <= 20:
        return 4
    return 8


def fallback_check(resumes_so_far: int, selected_bitwidth: int) -> int:
    """Return the bit-width to use after resumes_so_far restores.

    Once the observed resume count exceeds the selected width's
    allowance, all later checkpoints switch to 8-bit.
    """
    if selected_bitwidth not in FALLBACK_ALLOWANCE:
        raise ConfigError(f"invalid bitwidth {selected_bitwidth}")
    if resumes_so_far < 0:
        raise DataError("resume count cannot be negative")
    if resumes_so_far > FALLBACK_ALLOWANCE[selected_bitwidth]:
        return 8
    return selected_bitwidth
