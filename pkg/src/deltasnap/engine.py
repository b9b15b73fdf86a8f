"""Checkpoint orchestration.

The engine owns the stall-snapshot / background-write cycle:

  1. on_interval_end() briefly stalls the caller: deep-copy the model,
     capture the dirty-row view, decide full vs incremental, reset
     tracker scopes.
  2. A background job quantizes, serializes and writes the payload,
     then commits by writing the manifest.

At most one job is in flight. If an interval ends while the previous
job is still writing, the trigger blocks until it finishes (counted as
an overrun). A storage failure aborts the job and leaves the previous
committed checkpoint as the recovery point; the rows the failed job
would have covered are folded back into the tracker so the next
checkpoint picks them up.
"""

from __future__ import annotations

import time
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import wait as futures_wait
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .errors import ConfigError, IntegrityError, FormatError, PreconditionError, StoreIOError
from .model import ModelConfig, ModelSnapshot, ModelState, EmbeddingTable, ReaderState
from .payload import TableSection, parse_shard_payload, serialize_section
from .policy import (
    FULL,
    INCREMENTAL,
    POLICY_KINDS,
    CheckpointPlan,
    FailureModel,
    IntervalHistory,
    expected_failures,
    plan_checkpoint,
    select_bitwidth,
)
from .store import CheckpointStore, CheckpointManifest, ManifestDraft, TableInfo
from .tracker import ModelTracker, TrackerView


@dataclass
class RunConfig:
    """Engine knobs for one training run."""

    checkpoint_interval: int                 # batches per checkpoint trigger
    policy: str = "intermittent"
    bitwidth: int | str | None = None        # 2/3/4/8, "auto", or None for fp32
    failure_model: FailureModel | None = None
    adaptive_overrides: dict[int, quant.AdaptiveConfig] | None = None
    chunk_rows: int = 1024
    keep_last_n: int = 1
    workers: int = 2
    restore_fallback: bool = False

    def validate(self) -> None:
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if self.policy not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if isinstance(self.bitwidth, str):
            if self.bitwidth != "auto":
                raise ConfigError(f"bitwidth must be a valid width, 'auto' or None")
            if self.failure_model is None:
                raise ConfigError("bitwidth 'auto' requires a failure_model")
        elif self.bitwidth is not None and self.bitwidth not in quant.VALID_BITWIDTHS:
            raise ConfigError(f"unsupported bitwidth {self.bitwidth}")
        if self.chunk_rows < 1:
            raise ConfigError("chunk_rows must be >= 1")
        if self.keep_last_n < 1:
            raise ConfigError("keep_last_n must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def resolve_bitwidth(self) -> int | None:
        if self.bitwidth == "auto":
            return select_bitwidth(expected_failures(self.failure_model))
        return self.bitwidth


@dataclass
class CheckpointJob:
    """Progress record for one checkpoint attempt."""

    interval_index: int
    kind: str
    bitwidth: int | None
    stall_seconds: float
    dirty_interval_fraction: float
    dirty_baseline_fraction: float
    state: str = "optimizing"            # optimizing -> writing -> committed|aborted
    checkpoint_id: int | None = None
    payload_bytes: int = 0
    quant_mean_l2: float | None = None
    live_bytes_after: int | None = None
    error: Exception | None = None
    future: Future | None = field(default=None, repr=False)

    def done(self) -> bool:
        return self.future is None or self.future.done()

    def wait(self) -> None:
        if self.future is not None:
            self.future.result()


def _adaptive_for(bitwidth: int, overrides) -> quant.AdaptiveConfig | None:
    if overrides and bitwidth in overrides:
        return overrides[bitwidth]
    return quant.default_adaptive_config(bitwidth)


def build_shard_payload(
    snap: ModelSnapshot,
    plan: CheckpointPlan,
    shard_id: int,
    chunk_rows: int,
    adaptive_overrides: dict[int, quant.AdaptiveConfig] | None = None,
) -> tuple[bytes, int, float]:
    """Serialize one shard of a snapshot under a plan.

    Rows are processed in chunks of chunk_rows so large tables never need
    a second full-size staging buffer; per-row quantization makes the
    output bytes independent of the chunk size. Returns (payload,
    quantized_row_count, summed_row_l2_error).
    """
    incremental = plan.kind == INCREMENTAL
    bitwidth = plan.bitwidth
    acfg = _adaptive_for(bitwidth, adaptive_overrides) if bitwidth is not None else None
    parts: list[bytes] = []
    q_rows = 0
    err_sum = 0.0

    for table in snap.shard_tables(shard_id):
        if incremental:
            sel = plan.rows.get(table.table_id)
            sel = np.zeros(0, dtype=np.int64) if sel is None else sel
            values = table.values[sel]
            aux = table.aux[sel] if table.aux is not None else None
        else:
            sel = None
            values = table.values
            aux = table.aux

        if bitwidth is None:
            section = TableSection(
                table_id=table.table_id, dim=table.dim, mode=0,
                row_indices=sel, values=values, aux=aux,
            )
            parts.append(serialize_section(section, incremental))
            continue

        n = values.shape[0]
        mins_parts, maxs_parts, packed_parts = [], [], []
        for lo in range(0, n, chunk_rows):
            chunk = values[lo:lo + chunk_rows]
            if acfg is None:
                mins = chunk.min(axis=1)
                maxs = chunk.max(axis=1)
            else:
                mins, maxs = quant.adaptive_params_rows(chunk, bitwidth, acfg)
            codes = quant.quantize_rows(chunk, mins, maxs, bitwidth)
            packed_parts.append(quant.pack_code_rows(codes, bitwidth))
            mins_parts.append(mins)
            maxs_parts.append(maxs)
            deq = quant.dequantize_rows(codes, mins, maxs, bitwidth)
            diff = chunk.astype(np.float64) - deq.astype(np.float64)
            err_sum += float(np.sqrt((diff * diff).sum(axis=1)).sum())
        q_rows += n

        params = np.empty((n, 2), dtype=np.float32)
        if n:
            params[:, 0] = np.concatenate(mins_parts)
            params[:, 1] = np.concatenate(maxs_parts)
            codes_packed = np.concatenate(packed_parts, axis=0)
        else:
            codes_packed = np.zeros((0, quant.packed_size(table.dim, bitwidth)), dtype=np.uint8)
        section = TableSection(
            table_id=table.table_id, dim=table.dim, mode=1, bitwidth=bitwidth,
            row_indices=sel, params=params, codes=codes_packed, aux=aux,
        )
        parts.append(serialize_section(section, incremental))

    return b"".join(parts), q_rows, err_sum


def dense_to_bytes(dense: np.ndarray) -> bytes:
    return np.ascontiguousarray(dense, dtype="<f4").tobytes()


def dense_from_bytes(data: bytes, dense_dim: int) -> np.ndarray:
    if len(data) != dense_dim * 4:
        raise FormatError(f"dense payload has {len(data)} bytes, expected {dense_dim * 4}")
    return np.frombuffer(data, dtype="<f4").astype(np.float32)


class CheckpointEngine:
    """Drives checkpointing for one training run."""

    def __init__(
        self,
        model: ModelState,
        tracker: ModelTracker,
        ckpt_store: CheckpointStore,
        cfg: RunConfig,
        *,
        history: IntervalHistory | None = None,
        baseline_id: int | None = None,
        baseline_payload_bytes: int | None = None,
    ):
        cfg.validate()
        self.model = model
        self.tracker = tracker
        self.ckpt_store = ckpt_store
        self.cfg = cfg
        self.history = history if history is not None else IntervalHistory()
        self.baseline_id = baseline_id
        self.baseline_payload_bytes = baseline_payload_bytes
        self.bitwidth = cfg.resolve_bitwidth()
        self.jobs: list[CheckpointJob] = []
        self.overrun_count = 0
        self.last_committed_snapshot: ModelSnapshot | None = None
        self._last_trigger_batch = model.reader.batches_consumed
        self._interval_index = 0
        self._job_pool = ThreadPoolExecutor(max_workers=1)
        self._shard_pool = (
            ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        )
        self._pending_remark: TrackerView | None = None

    # -- lifecycle -----------------------------------------------------

    @property
    def has_baseline(self) -> bool:
        return self.baseline_id is not None

    def current_job(self) -> CheckpointJob | None:
        return self.jobs[-1] if self.jobs else None

    def set_bitwidth(self, bitwidth: int | None) -> None:
        if bitwidth is not None and bitwidth not in quant.VALID_BITWIDTHS:
            raise ConfigError(f"unsupported bitwidth {bitwidth}")
        self.bitwidth = bitwidth

    def on_interval_end(self) -> CheckpointJob:
        """Trigger a checkpoint at an interval boundary.

        Blocks only for the stall (snapshot + tracker capture), plus the
        remaining write time of a still-running previous job.
        """
        prev = self.current_job()
        if prev is not None and not prev.done():
            self.overrun_count += 1
            prev.wait()
        elif prev is not None:
            prev.wait()  # surface crashes from the finished job
        self._apply_pending_remark()

        consumed = self.model.reader.batches_consumed
        if consumed - self._last_trigger_batch != self.cfg.checkpoint_interval:
            raise PreconditionError(
                f"expected trigger after {self.cfg.checkpoint_interval} batches, "
                f"got {consumed - self._last_trigger_batch}"
            )
        self._last_trigger_batch = consumed

        t0 = time.perf_counter()
        snap = self.model.snapshot()
        view = self.tracker.capture()
        plan = plan_checkpoint(
            self.cfg.policy, view, self.history, self.bitwidth, self.has_baseline
        )
        self.tracker.reset_interval()
        if plan.kind == FULL:
            self.tracker.reset_baseline()
        stall = time.perf_counter() - t0

        job = CheckpointJob(
            interval_index=self._interval_index,
            kind=plan.kind,
            bitwidth=plan.bitwidth,
            stall_seconds=stall,
            dirty_interval_fraction=view.interval_fraction,
            dirty_baseline_fraction=view.baseline_fraction,
        )
        self._interval_index += 1
        job.future = self._job_pool.submit(self._run_job, job, snap, view, plan)
        self.jobs.append(job)
        return job

    def drain(self) -> None:
        """Wait until no job is in flight (re-raises simulated crashes)."""
        job = self.current_job()
        if job is not None:
            job.wait()
        self._apply_pending_remark()

    def shutdown(self) -> None:
        self._job_pool.shutdown(wait=True)
        if self._shard_pool is not None:
            self._shard_pool.shutdown(wait=True)

    # -- internals -----------------------------------------------------

    def _apply_pending_remark(self) -> None:
        view = self._pending_remark
        if view is None:
            return
        self._pending_remark = None
        for tid, rows in view.interval_rows.items():
            self.tracker.mark(tid, rows)
        for tid, rows in view.baseline_rows.items():
            self.tracker.mark_baseline(tid, rows)

    def _build_draft(self, snap: ModelSnapshot, plan: CheckpointPlan) -> ManifestDraft:
        config = snap.config
        tables = {
            t.table_id: TableInfo(rows=t.rows, dim=t.dim, shard=config.shard_of(t.table_id))
            for t in snap.tables.values()
        }
        return ManifestDraft(
            kind=plan.kind,
            base_id=None if plan.kind == FULL else self.baseline_id,
            policy=self.cfg.policy,
            bitwidth=plan.bitwidth,
            snapshot_batch=snap.snapshot_batch,
            reader_batches=snap.reader.batches_consumed,
            reader_cursor=snap.reader.rng_cursor,
            tables=tables,
            aux=config.has_aux_state,
            shard_ids=tuple(range(config.num_shards)),
        )

    def _write_shard(self, handle, job: CheckpointJob, snap, plan, shard_id: int):
        payload, q_rows, err_sum = build_shard_payload(
            snap, plan, shard_id, self.cfg.chunk_rows, self.cfg.adaptive_overrides
        )
        job.state = "writing"
        self.ckpt_store.put_shard(handle, shard_id, payload)
        return q_rows, err_sum

    def _run_job(self, job: CheckpointJob, snap: ModelSnapshot,
                 view: TrackerView, plan: CheckpointPlan) -> None:
        handle = None
        try:
            draft = self._build_draft(snap, plan)
            handle = self.ckpt_store.begin_checkpoint(draft)

            q_rows = 0
            err_sum = 0.0
            shard_ids = list(draft.shard_ids)
            if self._shard_pool is not None and len(shard_ids) > 1:
                futures = [
                    self._shard_pool.submit(self._write_shard, handle, job, snap, plan, sid)
                    for sid in shard_ids
                ]
                # Join every shard before acting on any failure so abort
                # cannot race an in-flight put.
                futures_wait(futures)
                for f in futures:
                    exc = f.exception()
                    if exc is not None:
                        raise exc
                for f in futures:
                    rows, err = f.result()
                    q_rows += rows
                    err_sum += err
            else:
                for sid in shard_ids:
                    rows, err = self._write_shard(handle, job, snap, plan, sid)
                    q_rows += rows
                    err_sum += err

            self.ckpt_store.put_dense(handle, dense_to_bytes(snap.dense))
            if plan.bitwidth is not None and q_rows > 0:
                handle.quant_mean_l2 = err_sum / q_rows

            job.state = "writing"
            manifest = self.ckpt_store.commit(handle)
            job.checkpoint_id = manifest.checkpoint_id
            job.payload_bytes = manifest.payload_bytes
            job.quant_mean_l2 = manifest.quant_mean_l2
            job.state = "committed"

            if plan.kind == FULL:
                self.baseline_id = manifest.checkpoint_id
                self.baseline_payload_bytes = manifest.payload_bytes
                self.history.reset()
            else:
                self.history.record(manifest.payload_bytes / self.baseline_payload_bytes)
            self.last_committed_snapshot = snap
        except StoreIOError as exc:
            if handle is not None:
                self.ckpt_store.abort(handle)
            self._pending_remark = view
            job.error = exc
            job.state = "aborted"
            return

        # The checkpoint is committed; retention problems must not mark
        # the job aborted.
        try:
            self.ckpt_store.gc(self.cfg.keep_last_n)
            job.live_bytes_after = self.ckpt_store.live_bytes()
        except StoreIOError:
            job.live_bytes_after = None


@dataclass
class RestoredRun:
    """Everything needed to resume training from a committed checkpoint."""

    model: ModelState
    tracker: ModelTracker
    history: IntervalHistory
    baseline_id: int
    baseline_payload_bytes: int
    manifest: CheckpointManifest
    chain_ids: list[int]


def config_from_manifest(manifest: CheckpointManifest) -> ModelConfig:
    tables = manifest.tables
    rows = {info.rows for info in tables.values()}
    dims = {info.dim for info in tables.values()}
    if len(rows) != 1 or len(dims) != 1:
        raise IntegrityError("tables with mixed shapes are not supported")
    return ModelConfig(
        num_tables=len(tables),
        rows_per_table=rows.pop(),
        dim=dims.pop(),
        num_shards=len(manifest.shards),
        has_aux_state=manifest.aux,
        dense_dim=manifest.dense.nbytes // 4,
    )


def _restore_at(cstore: CheckpointStore, ckpt_id: int) -> RestoredRun:
    chain = cstore.verify_chain(ckpt_id)
    base, target = chain[0], chain[-1]
    config = config_from_manifest(target)
    config.validate()

    tables = {
        tid: EmbeddingTable(
            tid,
            np.zeros((info.rows, info.dim), dtype=np.float32),
            np.zeros((info.rows, info.dim), dtype=np.float32) if target.aux else None,
        )
        for tid, info in target.tables.items()
    }
    tracker = ModelTracker({tid: info.rows for tid, info in target.tables.items()})

    for manifest in chain:
        incremental = manifest.kind == INCREMENTAL
        for _sid, entry in sorted(manifest.shards.items()):
            for sec in parse_shard_payload(cstore.store.get(entry.key), incremental):
                if sec.table_id not in tables:
                    raise IntegrityError(f"payload names unknown table {sec.table_id}")
                table = tables[sec.table_id]
                if sec.dim != table.dim:
                    raise IntegrityError(f"dim mismatch in table {sec.table_id}")
                values = sec.decode_values()
                if incremental:
                    idx = sec.row_indices
                    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
                        raise IntegrityError(f"row index out of range in table {sec.table_id}")
                    table.values[idx] = values
                    if sec.aux is not None and table.aux is not None:
                        table.aux[idx] = sec.aux
                    tracker.mark_baseline(sec.table_id, idx)
                else:
                    if sec.row_count != table.rows:
                        raise IntegrityError(
                            f"full section for table {sec.table_id} has "
                            f"{sec.row_count} rows, expected {table.rows}"
                        )
                    table.values[:] = values
                    if sec.aux is not None and table.aux is not None:
                        table.aux[:] = sec.aux

    dense = dense_from_bytes(cstore.store.get(target.dense.key), config.dense_dim)
    model = ModelState(
        config=config,
        tables=tables,
        dense=dense,
        reader=ReaderState(target.reader_batches, target.reader_cursor),
    )

    history = IntervalHistory()
    if base.payload_bytes > 0:
        for mid in cstore.valid_ids():
            if mid <= base.checkpoint_id or mid > target.checkpoint_id:
                continue
            m = cstore.read_manifest(mid)
            if m.kind == INCREMENTAL and m.base_id == base.checkpoint_id:
                history.record(m.payload_bytes / base.payload_bytes)

    return RestoredRun(
        model=model,
        tracker=tracker,
        history=history,
        baseline_id=base.checkpoint_id,
        baseline_payload_bytes=base.payload_bytes,
        manifest=target,
        chain_ids=[m.checkpoint_id for m in chain],
    )


def restore(cstore: CheckpointStore, *, fallback: bool = False,
            checkpoint_id: int | None = None) -> RestoredRun:
    """Rebuild the model from the newest valid checkpoint.

    With fallback=True, a checkpoint that fails integrity checks is
    skipped and the next older one is tried.
    """
    if checkpoint_id is not None:
        return _restore_at(cstore, checkpoint_id)
    ids = cstore.valid_ids()
    if not ids:
        raise IntegrityError("no valid checkpoint to restore from")
    last_error: Exception | None = None
    for cid in reversed(ids):
        try:
            return _restore_at(cstore, cid)
        except (IntegrityError, FormatError) as exc:
            if not fallback:
                raise
            last_error = exc
    raise IntegrityError(f"no restorable checkpoint: {last_error}")
