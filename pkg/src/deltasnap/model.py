"""Sharded model state: embedding tables, dense parameters, reader cursor.

The model is the unit being checkpointed. Embedding tables are assigned to
shards round-robin by table index; dense parameters live outside the shards
and are always handled in full precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    num_tables: int
    rows_per_table: int
    dim: int
    num_shards: int = 1
    has_aux_state: bool = False
    dense_dim: int = 256

    def validate(self) -> None:
        if self.num_tables < 1:
            raise ConfigError("num_tables must be >= 1")
        if self.rows_per_table < 1:
            raise ConfigError("rows_per_table must be >= 1")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.num_shards < 1:
            raise ConfigError("num_shards must be >= 1")
        if self.dense_dim < 1:
            raise ConfigError("dense_dim must be >= 1")

    def shard_of(self, table_id: int) -> int:
        return table_id % self.num_shards


@dataclass
class EmbeddingTable:
    table_id: int
    values: np.ndarray            # (rows, dim) float32
    aux: np.ndarray | None = None  # optional optimizer-proxy state, same shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def copy(self, *, writeable: bool = True) -> "EmbeddingTable":
        values = self.values.copy()
        aux = self.aux.copy() if self.aux is not None else None
        if not writeable:
            values.setflags(write=False)
            if aux is not None:
                aux.setflags(write=False)
        return EmbeddingTable(self.table_id, values, aux)


@dataclass
class ReaderState:
    """Position in the training-sample stream.

    batches_consumed is the global monotonic batch counter; rng_cursor is the
    position of the counter-based workload stream (equal to the next batch
    index for the bundled simulator).
    """

    batches_consumed: int = 0
    rng_cursor: int = 0

    def copy(self) -> "ReaderState":
        return ReaderState(self.batches_consumed, self.rng_cursor)


@dataclass
class ModelState:
    config: ModelConfig
    tables: dict[int, EmbeddingTable]
    dense: np.ndarray              # flat float32 vector
    reader: ReaderState = field(default_factory=ReaderState)

    def shard_tables(self, shard_id: int) -> list[EmbeddingTable]:
        return [
            t for tid, t in sorted(self.tables.items())
            if self.config.shard_of(tid) == shard_id
        ]

    def snapshot(self) -> "ModelSnapshot":
        return snapshot(self)


@dataclass
class ModelSnapshot:
    """Deep, immutable copy of a ModelState at a single batch boundary."""

    config: ModelConfig
    tables: dict[int, EmbeddingTable]
    dense: np.ndarray
    reader: ReaderState
    snapshot_batch: int

    def shard_tables(self, shard_id: int) -> list[EmbeddingTable]:
        return [
            t for tid, t in sorted(self.tables.items())
            if self.config.shard_of(tid) == shard_id
        ]


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Build a deterministic model from a seed.

    Every embedding element is drawn from a per-table seeded uniform stream
    over [-1, 1); dense parameters use their own stream; aux state starts at
    zero. Two calls with the same (config, seed) produce bit-identical states.
    """
    config.validate()
    tables: dict[int, EmbeddingTable] = {}
    for t in range(config.num_tables):
        rng = np.random.default_rng(np.random.SeedSequence((seed, t)))
        values = rng.random((config.rows_per_table, config.dim), dtype=np.float32) * 2 - 1
        aux = None
        if config.has_aux_state:
            aux = np.zeros((config.rows_per_table, config.dim), dtype=np.float32)
        tables[t] = EmbeddingTable(t, values, aux)
    dense_rng = np.random.default_rng(np.random.SeedSequence((seed, config.num_tables)))
    dense = dense_rng.random(config.dense_dim, dtype=np.float32) * 2 - 1
    return ModelState(config=config, tables=tables, dense=dense, reader=ReaderState())


def snapshot(model: ModelState) -> ModelSnapshot:
    """Deep-copy the model under the caller-provided stall.

    The returned snapshot is read-only and independent of any later mutation
    of the live model.
    """
    tables = {tid: t.copy(writeable=False) for tid, t in model.tables.items()}
    dense = model.dense.copy()
    dense.setflags(write=False)
    return ModelSnapshot(
        config=model.config,
        tables=tables,
        dense=dense,
        reader=model.reader.copy(),
        snapshot_batch=model.reader.batches_consumed,
    )


def state_digest(state: ModelState | ModelSnapshot) -> str:
    """SHA-256 over all parameters, for bit-identity comparisons."""
    h = hashlib.sha256()
    for tid in sorted(state.tables):
        t = state.tables[tid]
        h.update(np.ascontiguousarray(t.values).tobytes())
        if t.aux is not None:
            h.update(np.ascontiguousarray(t.aux).tobytes())
    h.update(np.ascontiguousarray(state.dense).tobytes())
    return h.hexdigest()
