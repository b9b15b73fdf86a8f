"""Incremental, quantized checkpointing for sparse embedding models.

The package splits into layers: model state and dirty-row tracking
(model, tracker), per-vector quantization codecs (quant), the shard
payload wire format (payload), object storage with atomic manifest
commit (store), checkpoint policies (policy), the orchestration engine
(engine), and a deterministic workload simulator with a CLI (sim, cli).
"""

from .errors import (
    BoundsError,
    ConfigError,
    DataError,
    DeltaSnapError,
    FormatError,
    IntegrityError,
    PreconditionError,
    ShapeError,
    StoreConflictError,
    StoreIOError,
)
from .model import (
    EmbeddingTable,
    ModelConfig,
    ModelSnapshot,
    ModelState,
    ReaderState,
    init_model,
    snapshot,
    state_digest,
)
from .tracker import DirtyBitmap, ModelTracker, TrackerView
from .quant import (
    AdaptiveConfig,
    KMeansResult,
    QuantParams,
    QuantizedVector,
    VALID_BITWIDTHS,
    adaptive_params,
    adaptive_params_rows,
    benchmark_corpus,
    default_adaptive_config,
    dequantize,
    dequantize_rows,
    kmeans_quantize,
    mean_l2_loss,
    pack_codes,
    quantize,
    quantize_rows,
    reconstruction_errors,
    scalar_kmeans_1d,
    uniform_params,
    unpack_codes,
)
from .payload import TableSection, parse_shard_payload, serialize_shard_payload
from .policy import (
    CheckpointPlan,
    FailureModel,
    IntervalHistory,
    expected_failures,
    fallback_check,
    intermittent_decide,
    plan_checkpoint,
    select_bitwidth,
)
from .store import (
    CheckpointManifest,
    CheckpointStore,
    Fault,
    FaultInjectingStore,
    InMemoryStore,
    LocalDirectoryStore,
    ManifestDraft,
    SimulatedCrash,
)
from .engine import (
    CheckpointEngine,
    CheckpointJob,
    RestoredRun,
    RunConfig,
    build_shard_payload,
    restore,
)
from .sim import (
    FailureSchedule,
    MetricsReport,
    WorkloadConfig,
    apply_batch,
    full_fp32_payload_bytes,
    generate_batch,
    generate_dense_delta,
    run,
    train_reference,
)

__version__ = "0.1.0"
