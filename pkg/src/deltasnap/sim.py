"""Deterministic training workload and end-to-end run harness.

Batches are drawn from counter-based random streams keyed by (seed,
table_id, batch_index), so batch k can be regenerated at any time
without replaying batches 0..k-1. Row popularity follows a Zipf law
over row ranks (rank 0 hottest), which concentrates updates on a small
hot set the way recommendation traffic does.

run() wires the workload to a checkpoint engine, kills and restores
the trainer at scheduled points, and returns a metrics report. With a
fixed (workload, run config, schedule) everything in the report except
wall-clock timings is reproducible bit for bit.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, asdict
from functools import lru_cache
from io import StringIO

import numpy as np

from .engine import CheckpointEngine, RunConfig, restore as engine_restore
from .errors import ConfigError
from .model import ModelConfig, ModelSnapshot, ModelState, init_model
from .payload import HEADER_SIZE
from .policy import fallback_check
from .store import CheckpointStore
from .tracker import ModelTracker


@dataclass
class WorkloadConfig:
    model: ModelConfig
    batch_size: int = 512
    zipf_s: float = 1.05
    batches_per_interval: int = 50
    num_intervals: int = 20
    learning_rate: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.zipf_s <= 0:
            raise ConfigError("zipf_s must be > 0")
        if self.batches_per_interval < 1:
            raise ConfigError("batches_per_interval must be >= 1")
        if self.num_intervals < 1:
            raise ConfigError("num_intervals must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")

    @property
    def total_batches(self) -> int:
        return self.batches_per_interval * self.num_intervals


@dataclass(frozen=True)
class FailureSchedule:
    """Trainer deaths at (interval, batch_offset) points.

    The process dies right before consuming that batch. Points must be
    strictly increasing in global batch order; each fires once.
    """

    points: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        for i, (interval, offset) in enumerate(self.points):
            if interval < 0 or offset < 0:
                raise ConfigError(f"invalid failure point {self.points[i]}")
        if any(a >= b for a, b in zip(self.points, self.points[1:])):
            raise ConfigError("failure points must be strictly increasing")

    @classmethod
    def from_string(cls, text: str) -> "FailureSchedule":
        """Parse "7:43,12:10" into points ((7, 43), (12, 10))."""
        points = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                interval, offset = part.split(":")
                points.append((int(interval), int(offset)))
            except ValueError:
                raise ConfigError(f"bad failure point {part!r}, expected I:B") from None
        return cls(tuple(points))

    def global_batches(self, workload: WorkloadConfig) -> list[int]:
        bpi = workload.batches_per_interval
        out = []
        for interval, offset in self.points:
            if interval >= workload.num_intervals or offset >= bpi:
                raise ConfigError(
                    f"failure point ({interval}, {offset}) outside the run")
            out.append(interval * bpi + offset)
        return out


@lru_cache(maxsize=32)
def _zipf_cdf(rows: int, s: float) -> np.ndarray:
    weights = np.arange(1, rows + 1, dtype=np.float64) ** -s
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    cdf.setflags(write=False)
    return cdf


def _batch_rng(seed: int, stream: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream, batch_index)))


def generate_batch(workload: WorkloadConfig, batch_index: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Row indices and update deltas for every table of one batch."""
    cfg = workload.model
    cdf = _zipf_cdf(cfg.rows_per_table, workload.zipf_s)
    out = {}
    for tid in range(cfg.num_tables):
        rng = _batch_rng(workload.seed, tid, batch_index)
        ranks = np.searchsorted(cdf, rng.random(workload.batch_size), side="right")
        idx = ranks.astype(np.int64)
        delta = rng.normal(0.0, workload.learning_rate,
                           (workload.batch_size, cfg.dim)).astype(np.float32)
        out[tid] = (idx, delta)
    return out


def generate_dense_delta(workload: WorkloadConfig, batch_index: int) -> np.ndarray:
    rng = _batch_rng(workload.seed, workload.model.num_tables, batch_index)
    return rng.normal(0.0, workload.learning_rate,
                      workload.model.dense_dim).astype(np.float32)


def apply_batch(model: ModelState, tracker: ModelTracker | None,
                workload: WorkloadConfig) -> None:
    """Consume the next batch: scatter-add deltas, mark touched rows."""
    batch_index = model.reader.batches_consumed
    batch = generate_batch(workload, batch_index)
    for tid in sorted(batch):
        idx, delta = batch[tid]
        table = model.tables[tid]
        np.add.at(table.values, idx, delta)
        if table.aux is not None:
            np.add.at(table.aux, idx, delta * delta)
        if tracker is not None:
            tracker.mark(tid, idx)
    model.dense += generate_dense_delta(workload, batch_index)
    model.reader.batches_consumed = batch_index + 1
    model.reader.rng_cursor = batch_index + 1


def train_reference(workload: WorkloadConfig, num_batches: int | None = None) -> ModelState:
    """Run the workload start to finish with no checkpointing."""
    workload.validate()
    model = init_model(workload.model, workload.seed)
    total = workload.total_batches if num_batches is None else num_batches
    for _ in range(total):
        apply_batch(model, None, workload)
    return model


def full_fp32_payload_bytes(config: ModelConfig) -> int:
    """Bytes a naive full-precision full checkpoint writes per trigger."""
    per_table = HEADER_SIZE + config.rows_per_table * config.dim * 4 * (2 if config.has_aux_state else 1)
    return config.num_tables * per_table + config.dense_dim * 4


@dataclass
class IntervalRecord:
    """One checkpoint trigger, in trigger order (replays after a restore
    get their own rows)."""

    interval: int
    checkpoint_id: int | None
    kind: str
    state: str
    bitwidth: int | None
    payload_bytes: int
    payload_fraction: float
    live_bytes: int | None
    live_fraction: float | None
    dirty_interval_fraction: float
    dirty_baseline_fraction: float
    quant_mean_l2: float | None
    stall_seconds: float


CSV_COLUMNS = [
    "interval", "checkpoint_id", "kind", "state", "bitwidth",
    "payload_bytes", "payload_fraction", "live_bytes", "live_fraction",
    "dirty_interval_fraction", "dirty_baseline_fraction",
    "quant_mean_l2", "stall_seconds",
]


@dataclass
class MetricsReport:
    run_id: str
    policy: str
    bitwidth_initial: int | None
    workload: dict
    total_batches: int
    triggers: int
    committed: int
    aborted: int
    resumes: int
    overruns: int
    full_fp32_bytes: int
    total_payload_bytes: int
    max_live_bytes: int | None
    bandwidth_reduction: float | None
    capacity_reduction: float | None
    cumulative_restore_l2: float
    total_stall_seconds: float
    wall_seconds: float
    intervals: list[IntervalRecord]

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["intervals"] = [asdict(r) for r in self.intervals]
        return doc

    def deterministic_view(self) -> dict:
        """Report contents minus wall-clock timing, for reproducibility
        comparisons."""
        doc = self.to_dict()
        doc.pop("total_stall_seconds")
        doc.pop("wall_seconds")
        for row in doc["intervals"]:
            row.pop("stall_seconds")
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for rec in self.intervals:
            row = asdict(rec)
            cells = []
            for col in CSV_COLUMNS:
                v = row[col]
                cells.append("" if v is None else str(v))
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def summary_lines(self) -> list[str]:
        def ratio(x):
            return "n/a" if x is None else f"{x:.2f}x"
        return [
            f"run {self.run_id}: policy={self.policy} bitwidth={self.bitwidth_initial or 'fp32'}",
            f"  batches={self.total_batches} triggers={self.triggers} "
            f"committed={self.committed} aborted={self.aborted} "
            f"resumes={self.resumes} overruns={self.overruns}",
            f"  payload total={self.total_payload_bytes}B "
            f"(naive full-fp32 {self.full_fp32_bytes}B/trigger)",
            f"  bandwidth reduction={ratio(self.bandwidth_reduction)} "
            f"capacity reduction={ratio(self.capacity_reduction)}",
            f"  restore perturbation (mean L2)={self.cumulative_restore_l2:.6g} "
            f"stall={self.total_stall_seconds:.3f}s wall={self.wall_seconds:.3f}s",
        ]


def _restore_perturbation(restored: ModelState, shadow: ModelSnapshot) -> float:
    total = 0.0
    rows = 0
    for tid in sorted(restored.tables):
        a = restored.tables[tid].values.astype(np.float64)
        b = shadow.tables[tid].values.astype(np.float64)
        diff = a - b
        total += float(np.sqrt((diff * diff).sum(axis=1)).sum())
        rows += a.shape[0]
    return total / rows if rows else 0.0


def run(
    workload: WorkloadConfig,
    run_cfg: RunConfig,
    object_store,
    schedule: FailureSchedule | None = None,
    run_id: str = "run",
    return_final_model: bool = False,
) -> MetricsReport | tuple[MetricsReport, ModelState]:
    """Train under the workload with checkpointing and scheduled deaths.

    A death discards the live trainer and restores from the newest valid
    checkpoint; an in-flight background write is joined first so the
    outcome does not depend on thread timing. With return_final_model
    the surviving trainer state comes back alongside the report.
    """
    workload.validate()
    run_cfg.validate()
    schedule = schedule or FailureSchedule()
    failures = deque(schedule.global_batches(workload))

    model = init_model(workload.model, workload.seed)
    tracker = ModelTracker(
        {tid: t.rows for tid, t in model.tables.items()})
    cstore = CheckpointStore(object_store, run_id)
    engine = CheckpointEngine(model, tracker, cstore, run_cfg)
    bw0 = engine.bitwidth

    bpi = workload.batches_per_interval
    total = workload.total_batches
    all_jobs = []
    overruns = 0
    resumes = 0
    restore_l2 = 0.0
    shadow: ModelSnapshot | None = None
    t_start = time.perf_counter()

    def retire_engine(eng: CheckpointEngine):
        nonlocal overruns, shadow
        eng.drain()
        if eng.last_committed_snapshot is not None:
            shadow = eng.last_committed_snapshot
        all_jobs.extend(eng.jobs)
        overruns += eng.overrun_count
        eng.shutdown()

    try:
        while model.reader.batches_consumed < total:
            g = model.reader.batches_consumed
            if failures and failures[0] == g:
                failures.popleft()
                retire_engine(engine)
                engine = None
                restored = engine_restore(cstore, fallback=run_cfg.restore_fallback)
                resumes += 1
                if shadow is not None and shadow.snapshot_batch == restored.manifest.snapshot_batch:
                    restore_l2 += _restore_perturbation(restored.model, shadow)
                model = restored.model
                tracker = restored.tracker
                engine = CheckpointEngine(
                    model, tracker, cstore, run_cfg,
                    history=restored.history,
                    baseline_id=restored.baseline_id,
                    baseline_payload_bytes=restored.baseline_payload_bytes,
                )
                if bw0 is not None:
                    engine.set_bitwidth(fallback_check(resumes, bw0))
                continue
            apply_batch(model, tracker, workload)
            if model.reader.batches_consumed % bpi == 0:
                engine.on_interval_end()
    finally:
        if engine is not None:
            retire_engine(engine)
    wall = time.perf_counter() - t_start

    fp32_bytes = full_fp32_payload_bytes(workload.model)
    records = []
    committed = aborted = 0
    total_payload = 0
    max_live = None
    total_stall = 0.0
    for i, job in enumerate(all_jobs):
        if job.state == "committed":
            committed += 1
            total_payload += job.payload_bytes
        else:
            aborted += 1
        if job.live_bytes_after is not None:
            max_live = job.live_bytes_after if max_live is None else max(max_live, job.live_bytes_after)
        total_stall += job.stall_seconds
        records.append(IntervalRecord(
            interval=i,
            checkpoint_id=job.checkpoint_id,
            kind=job.kind,
            state=job.state,
            bitwidth=job.bitwidth,
            payload_bytes=job.payload_bytes,
            payload_fraction=job.payload_bytes / fp32_bytes,
            live_bytes=job.live_bytes_after,
            live_fraction=(None if job.live_bytes_after is None
                           else job.live_bytes_after / fp32_bytes),
            dirty_interval_fraction=job.dirty_interval_fraction,
            dirty_baseline_fraction=job.dirty_baseline_fraction,
            quant_mean_l2=job.quant_mean_l2,
            stall_seconds=job.stall_seconds,
        ))

    report = MetricsReport(
        run_id=run_id,
        policy=run_cfg.policy,
        bitwidth_initial=bw0,
        workload={
            "num_tables": workload.model.num_tables,
            "rows_per_table": workload.model.rows_per_table,
            "dim": workload.model.dim,
            "num_shards": workload.model.num_shards,
            "has_aux_state": workload.model.has_aux_state,
            "dense_dim": workload.model.dense_dim,
            "batch_size": workload.batch_size,
            "zipf_s": workload.zipf_s,
            "batches_per_interval": bpi,
            "num_intervals": workload.num_intervals,
            "learning_rate": workload.learning_rate,
            "seed": workload.seed,
        },
        total_batches=total,
        triggers=len(all_jobs),
        committed=committed,
        aborted=aborted,
        resumes=resumes,
        overruns=overruns,
        full_fp32_bytes=fp32_bytes,
        total_payload_bytes=total_payload,
        max_live_bytes=max_live,
        bandwidth_reduction=(committed * fp32_bytes / total_payload
                             if total_payload else None),
        capacity_reduction=(fp32_bytes / max_live if max_live else None),
        cumulative_restore_l2=restore_l2,
        total_stall_seconds=total_stall,
        wall_seconds=wall,
        intervals=records,
    )
    return (report, model) if return_final_model else report
