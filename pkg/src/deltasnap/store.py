"""Object storage and checkpoint persistence.

Object keys live in a flat namespace. A checkpoint run uses two prefixes:

    runs/<run_id>/pending/<ckpt_id>/   staging area, never read by recovery
    runs/<run_id>/ckpt/<ckpt_id>/      committed objects

The manifest (runs/<run>/ckpt/<id>/manifest.json) is written last and is
the commit point: a checkpoint is valid if and only if its manifest
exists. Readers never look at pending objects, so a writer dying at any
point leaves the previous committed checkpoint untouched.
"""

from __future__ import annotations

import json
import os
import threading
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .errors import (
    ConfigError,
    FormatError,
    IntegrityError,
    PreconditionError,
    StoreConflictError,
    StoreIOError,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1
FULL = "full"
INCREMENTAL = "incremental"


class SimulatedCrash(BaseException):
    """Raised by FaultInjectingStore to model the writer process dying.

    Derives from BaseException so that ordinary error handling does not
    swallow it: a crashed process runs no cleanup.
    """


def checksum(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


class InMemoryStore:
    """Dict-backed object store, safe for concurrent access."""

    def __init__(self):
        self._objects: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: str, data: bytes) -> None:
        with self._lock:
            self._objects[key] = bytes(data)

    def get(self, key: str) -> bytes:
        with self._lock:
            try:
                return self._objects[key]
            except KeyError:
                raise KeyError(key) from None

    def list(self, prefix: str) -> list[str]:
        with self._lock:
            return sorted(k for k in self._objects if k.startswith(prefix))

    def delete(self, key: str) -> None:
        with self._lock:
            self._objects.pop(key, None)


class LocalDirectoryStore:
    """Object store over a local directory tree.

    put() writes to a temp file in the destination directory and renames
    it into place, so a key is never observable half-written.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._counter = 0
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        p = Path(key)
        if p.is_absolute() or ".." in p.parts:
            raise ConfigError(f"invalid object key: {key!r}")
        return self.root / p

    def put(self, key: str, data: bytes) -> None:
        path = self._path(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with self._lock:
                self._counter += 1
                tmp = path.parent / f".tmp.{os.getpid()}.{self._counter}"
            tmp.write_bytes(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise StoreIOError(f"put failed for {key!r}: {exc}") from exc

    def get(self, key: str) -> bytes:
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise KeyError(key) from None
        except OSError as exc:
            raise StoreIOError(f"get failed for {key!r}: {exc}") from exc

    def list(self, prefix: str) -> list[str]:
        out = []
        try:
            for dirpath, _dirnames, filenames in os.walk(self.root):
                base = Path(dirpath)
                for name in filenames:
                    if name.startswith(".tmp."):
                        continue
                    key = (base / name).relative_to(self.root).as_posix()
                    if key.startswith(prefix):
                        out.append(key)
        except OSError as exc:
            raise StoreIOError(f"list failed: {exc}") from exc
        return sorted(out)

    def delete(self, key: str) -> None:
        try:
            self._path(key).unlink(missing_ok=True)
        except OSError as exc:
            raise StoreIOError(f"delete failed for {key!r}: {exc}") from exc


@dataclass(frozen=True)
class Fault:
    """A fault scheduled at the Nth mutating store operation (0-based).

    kind: "io" raises StoreIOError without applying the operation;
    "crash_before" / "crash_after" raise SimulatedCrash, skipping or
    applying the operation respectively.
    """

    op_index: int
    kind: str

    def __post_init__(self):
        if self.kind not in ("io", "crash_before", "crash_after"):
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        if self.op_index < 0:
            raise ConfigError("fault op_index must be >= 0")


class FaultInjectingStore:
    """Wraps a store and fires faults at selected mutating operations.

    Counts put() and delete() calls; get()/list() pass through untouched.
    """

    def __init__(self, base, faults: list[Fault] | None = None):
        self.base = base
        self._faults = {f.op_index: f.kind for f in (faults or [])}
        self.ops = 0
        self._lock = threading.Lock()

    def _check(self) -> str | None:
        with self._lock:
            kind = self._faults.get(self.ops)
            self.ops += 1
        return kind

    def put(self, key: str, data: bytes) -> None:
        kind = self._check()
        if kind == "io":
            raise StoreIOError(f"injected I/O failure on put {key!r}")
        if kind == "crash_before":
            raise SimulatedCrash(f"crash before put {key!r}")
        self.base.put(key, data)
        if kind == "crash_after":
            raise SimulatedCrash(f"crash after put {key!r}")

    def get(self, key: str) -> bytes:
        return self.base.get(key)

    def list(self, prefix: str) -> list[str]:
        return self.base.list(prefix)

    def delete(self, key: str) -> None:
        kind = self._check()
        if kind == "io":
            raise StoreIOError(f"injected I/O failure on delete {key!r}")
        if kind == "crash_before":
            raise SimulatedCrash(f"crash before delete {key!r}")
        self.base.delete(key)
        if kind == "crash_after":
            raise SimulatedCrash(f"crash after delete {key!r}")


@dataclass(frozen=True)
class ObjectEntry:
    key: str
    nbytes: int
    crc32: int


@dataclass(frozen=True)
class TableInfo:
    rows: int
    dim: int
    shard: int


@dataclass
class CheckpointManifest:
    run_id: str
    checkpoint_id: int
    kind: str                      # "full" | "incremental"
    base_id: int | None            # full checkpoint this one patches, if any
    policy: str
    bitwidth: int | None           # None means fp32 payloads
    snapshot_batch: int
    reader_batches: int
    reader_cursor: int
    tables: dict[int, TableInfo]
    aux: bool
    shards: dict[int, ObjectEntry]
    dense: ObjectEntry
    payload_bytes: int
    quant_mean_l2: float | None
    format_version: int = MANIFEST_FORMAT_VERSION

    def to_json(self) -> bytes:
        doc = asdict(self)
        doc["tables"] = {str(k): asdict(v) if not isinstance(v, dict) else v
                         for k, v in self.tables.items()}
        doc["shards"] = {str(k): asdict(v) if not isinstance(v, dict) else v
                         for k, v in self.shards.items()}
        doc["dense"] = asdict(self.dense) if not isinstance(self.dense, dict) else self.dense
        return json.dumps(doc, sort_keys=True, indent=2).encode()

    @classmethod
    def from_json(cls, data: bytes) -> "CheckpointManifest":
        try:
            doc = json.loads(data)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"unreadable manifest: {exc}") from exc
        try:
            if doc["format_version"] != MANIFEST_FORMAT_VERSION:
                raise FormatError(f"unsupported manifest version {doc['format_version']}")
            doc["tables"] = {int(k): TableInfo(**v) for k, v in doc["tables"].items()}
            doc["shards"] = {int(k): ObjectEntry(**v) for k, v in doc["shards"].items()}
            doc["dense"] = ObjectEntry(**doc["dense"])
            return cls(**doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc


@dataclass
class ManifestDraft:
    """Everything about a checkpoint that is known before writing it."""

    kind: str
    base_id: int | None
    policy: str
    bitwidth: int | None
    snapshot_batch: int
    reader_batches: int
    reader_cursor: int
    tables: dict[int, TableInfo]
    aux: bool
    shard_ids: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in (FULL, INCREMENTAL):
            raise ConfigError(f"unknown checkpoint kind {self.kind!r}")
        if self.kind == INCREMENTAL and self.base_id is None:
            raise ConfigError("incremental checkpoint requires a base_id")
        if not self.shard_ids:
            raise ConfigError("checkpoint needs at least one shard")


@dataclass
class WriteHandle:
    """Tracks one in-flight checkpoint write."""

    checkpoint_id: int
    draft: ManifestDraft
    shards: dict[int, ObjectEntry] = field(default_factory=dict)
    dense: ObjectEntry | None = None
    quant_mean_l2: float | None = None
    open: bool = True


class CheckpointStore:
    """Checkpoint lifecycle on top of an object store.

    All validity decisions are driven by manifest presence; objects
    without a manifest are garbage, never state.
    """

    def __init__(self, store, run_id: str):
        self.store = store
        self.run_id = run_id
        self._inflight: WriteHandle | None = None

    # -- key layout ----------------------------------------------------

    def _pending_prefix(self, ckpt_id: int) -> str:
        return f"runs/{self.run_id}/pending/{ckpt_id:08d}/"

    def _final_prefix(self, ckpt_id: int) -> str:
        return f"runs/{self.run_id}/ckpt/{ckpt_id:08d}/"

    def _manifest_key(self, ckpt_id: int) -> str:
        return self._final_prefix(ckpt_id) + MANIFEST_NAME

    @staticmethod
    def _shard_name(shard_id: int) -> str:
        return f"shard_{shard_id:04d}.bin"

    def _ids_under(self, prefix: str) -> set[int]:
        ids = set()
        for key in self.store.list(prefix):
            rest = key[len(prefix):]
            head = rest.split("/", 1)[0]
            if head.isdigit():
                ids.add(int(head))
        return ids

    def _next_id(self) -> int:
        used = self._ids_under(f"runs/{self.run_id}/ckpt/")
        used |= self._ids_under(f"runs/{self.run_id}/pending/")
        return max(used, default=0) + 1

    # -- write path ----------------------------------------------------

    def begin_checkpoint(self, draft: ManifestDraft) -> WriteHandle:
        if self._inflight is not None and self._inflight.open:
            raise StoreConflictError("a checkpoint write is already in flight")
        handle = WriteHandle(checkpoint_id=self._next_id(), draft=draft)
        self._inflight = handle
        return handle

    def _require_open(self, handle: WriteHandle) -> None:
        if not handle.open:
            raise PreconditionError("write handle is closed")
        if self._inflight is not handle:
            raise StoreConflictError("stale write handle")

    def put_shard(self, handle: WriteHandle, shard_id: int, payload: bytes) -> None:
        self._require_open(handle)
        if shard_id not in handle.draft.shard_ids:
            raise PreconditionError(f"shard {shard_id} not declared in draft")
        if shard_id in handle.shards:
            raise PreconditionError(f"shard {shard_id} already written")
        key = self._pending_prefix(handle.checkpoint_id) + self._shard_name(shard_id)
        self.store.put(key, payload)
        handle.shards[shard_id] = ObjectEntry(key, len(payload), checksum(payload))

    def put_dense(self, handle: WriteHandle, data: bytes) -> None:
        self._require_open(handle)
        if handle.dense is not None:
            raise PreconditionError("dense state already written")
        key = self._pending_prefix(handle.checkpoint_id) + "dense.bin"
        self.store.put(key, data)
        handle.dense = ObjectEntry(key, len(data), checksum(data))

    def commit(self, handle: WriteHandle) -> CheckpointManifest:
        """Promote pending objects and write the manifest (the commit point)."""
        self._require_open(handle)
        missing = set(handle.draft.shard_ids) - set(handle.shards)
        if missing:
            raise PreconditionError(f"cannot commit, shards not written: {sorted(missing)}")
        if handle.dense is None:
            raise PreconditionError("cannot commit, dense state not written")

        final_prefix = self._final_prefix(handle.checkpoint_id)
        final_shards = {}
        for shard_id, entry in sorted(handle.shards.items()):
            data = self.store.get(entry.key)
            final_key = final_prefix + self._shard_name(shard_id)
            self.store.put(final_key, data)
            final_shards[shard_id] = ObjectEntry(final_key, entry.nbytes, entry.crc32)
        dense_data = self.store.get(handle.dense.key)
        final_dense = ObjectEntry(final_prefix + "dense.bin", handle.dense.nbytes, handle.dense.crc32)
        self.store.put(final_dense.key, dense_data)

        d = handle.draft
        manifest = CheckpointManifest(
            run_id=self.run_id,
            checkpoint_id=handle.checkpoint_id,
            kind=d.kind,
            base_id=d.base_id,
            policy=d.policy,
            bitwidth=d.bitwidth,
            snapshot_batch=d.snapshot_batch,
            reader_batches=d.reader_batches,
            reader_cursor=d.reader_cursor,
            tables=dict(d.tables),
            aux=d.aux,
            shards=final_shards,
            dense=final_dense,
            payload_bytes=sum(e.nbytes for e in final_shards.values()) + final_dense.nbytes,
            quant_mean_l2=handle.quant_mean_l2,
        )
        self.store.put(self._manifest_key(handle.checkpoint_id), manifest.to_json())
        # Committed. Staging cleanup is best-effort from here on.
        handle.open = False
        self._inflight = None
        try:
            for key in self.store.list(self._pending_prefix(handle.checkpoint_id)):
                self.store.delete(key)
        except StoreIOError:
            pass
        return manifest

    def abort(self, handle: WriteHandle) -> None:
        """Drop an in-flight write. Only call before commit returned."""
        if self._inflight is handle:
            self._inflight = None
        handle.open = False
        if self.is_valid(handle.checkpoint_id):
            return
        try:
            for prefix in (self._pending_prefix(handle.checkpoint_id),
                           self._final_prefix(handle.checkpoint_id)):
                for key in self.store.list(prefix):
                    self.store.delete(key)
        except StoreIOError:
            pass

    # -- read path -----------------------------------------------------

    def valid_ids(self) -> list[int]:
        prefix = f"runs/{self.run_id}/ckpt/"
        ids = []
        for key in self.store.list(prefix):
            if key.endswith("/" + MANIFEST_NAME):
                head = key[len(prefix):].split("/", 1)[0]
                if head.isdigit():
                    ids.append(int(head))
        return sorted(ids)

    def is_valid(self, ckpt_id: int) -> bool:
        try:
            self.store.get(self._manifest_key(ckpt_id))
            return True
        except KeyError:
            return False

    def latest_valid(self) -> int | None:
        ids = self.valid_ids()
        return ids[-1] if ids else None

    def read_manifest(self, ckpt_id: int) -> CheckpointManifest:
        try:
            data = self.store.get(self._manifest_key(ckpt_id))
        except KeyError:
            raise IntegrityError(f"no manifest for checkpoint {ckpt_id}") from None
        return CheckpointManifest.from_json(data)

    def resolve_chain(self, ckpt_id: int) -> list[CheckpointManifest]:
        """Manifests to replay, in application order, ending at ckpt_id."""
        target = self.read_manifest(ckpt_id)
        if target.kind == FULL:
            return [target]
        base = self.read_manifest(target.base_id)
        if base.kind != FULL:
            raise IntegrityError(
                f"checkpoint {ckpt_id} has non-full base {target.base_id}")
        if target.policy == "consecutive_increment":
            chain = [base]
            for mid in self.valid_ids():
                if mid <= base.checkpoint_id or mid > ckpt_id:
                    continue
                m = self.read_manifest(mid)
                if m.kind == INCREMENTAL and m.base_id == base.checkpoint_id:
                    chain.append(m)
            if chain[-1].checkpoint_id != ckpt_id:
                raise IntegrityError(f"broken increment chain for checkpoint {ckpt_id}")
            return chain
        return [base, target]

    def verify(self, ckpt_id: int) -> None:
        """Check object presence, size and checksum for one checkpoint."""
        manifest = self.read_manifest(ckpt_id)
        entries = list(manifest.shards.values()) + [manifest.dense]
        for entry in entries:
            try:
                data = self.store.get(entry.key)
            except KeyError:
                raise IntegrityError(f"missing object {entry.key!r}") from None
            if len(data) != entry.nbytes:
                raise IntegrityError(
                    f"size mismatch for {entry.key!r}: {len(data)} != {entry.nbytes}")
            if checksum(data) != entry.crc32:
                raise IntegrityError(f"checksum mismatch for {entry.key!r}")

    def verify_chain(self, ckpt_id: int) -> list[CheckpointManifest]:
        chain = self.resolve_chain(ckpt_id)
        for manifest in chain:
            self.verify(manifest.checkpoint_id)
        return chain

    # -- retention -----------------------------------------------------

    def gc(self, keep_last_n: int) -> list[int]:
        """Delete checkpoints not among the newest keep_last_n and not
        referenced by any retained checkpoint's chain."""
        if keep_last_n < 1:
            raise ConfigError("keep_last_n must be >= 1")
        valid = self.valid_ids()
        retained = set(valid[-keep_last_n:])
        referenced = set()
        for cid in list(retained):
            for manifest in self.resolve_chain(cid):
                referenced.add(manifest.checkpoint_id)
        victims = [cid for cid in valid if cid not in retained and cid not in referenced]
        for cid in victims:
            # Manifest first: readers must never see a manifest whose
            # objects are already gone.
            self.store.delete(self._manifest_key(cid))
            for key in self.store.list(self._final_prefix(cid)):
                self.store.delete(key)
        # Clear abandoned staging areas.
        inflight = self._inflight.checkpoint_id if self._inflight else None
        for pid in sorted(self._ids_under(f"runs/{self.run_id}/pending/")):
            if pid != inflight:
                for key in self.store.list(self._pending_prefix(pid)):
                    self.store.delete(key)
        return victims

    def live_bytes(self) -> int:
        """Total payload bytes referenced by valid checkpoints."""
        return sum(self.read_manifest(cid).payload_bytes for cid in self.valid_ids())
