"""Command line front end.

Subcommands:
    run            train a synthetic workload with checkpointing
    restore-check  verify and rebuild the newest checkpoint of a run
    quant-bench    compare quantization codecs on a synthetic corpus
    gc             apply a retention policy to a stored run

Run configuration lives in a plain "key = value" file; see the sample
under configs/. Exit codes: 0 success, 1 runtime failure, 2 bad usage
or configuration.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import quant
from .engine import RunConfig, restore as engine_restore
from .errors import ConfigError, DeltaSnapError
from .model import ModelConfig, state_digest
from .policy import FailureModel
from .sim import FailureSchedule, WorkloadConfig, run as run_workload
from .store import CheckpointStore, LocalDirectoryStore


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _bitwidth(text: str):
    if text == "off":
        return None
    if text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"bitwidth must be off, auto or an integer, got {text!r}") from None


# key -> (caster, default-as-string)
CONFIG_KEYS = {
    "num_tables": (int, "4"),
    "rows_per_table": (int, "20000"),
    "dim": (int, "32"),
    "num_shards": (int, "2"),
    "dense_dim": (int, "256"),
    "aux": (_bool, "false"),
    "batch_size": (int, "500"),
    "zipf_s": (float, "1.05"),
    "batches_per_interval": (int, "50"),
    "num_intervals": (int, "20"),
    "learning_rate": (float, "0.01"),
    "seed": (int, "0"),
    "policy": (str, "intermittent"),
    "bitwidth": (_bitwidth, "4"),
    "failure_rate": (float, "0.001"),
    "nodes": (int, "16"),
    "duration_hours": (float, "72"),
    "chunk_rows": (int, "1024"),
    "keep_last": (int, "1"),
    "workers": (int, "2"),
    "failures": (str, ""),
    "restore_fallback": (_bool, "false"),
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a "key = value" file; # starts a comment line."""
    raw: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = text.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value.strip()
    return raw


def build_configs(raw: dict[str, str]) -> tuple[WorkloadConfig, RunConfig, FailureSchedule]:
    values = {}
    for key, (caster, default) in CONFIG_KEYS.items():
        text = raw.get(key, default)
        try:
            values[key] = caster(text)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    model = ModelConfig(
        num_tables=values["num_tables"],
        rows_per_table=values["rows_per_table"],
        dim=values["dim"],
        num_shards=values["num_shards"],
        has_aux_state=values["aux"],
        dense_dim=values["dense_dim"],
    )
    workload = WorkloadConfig(
        model=model,
        batch_size=values["batch_size"],
        zipf_s=values["zipf_s"],
        batches_per_interval=values["batches_per_interval"],
        num_intervals=values["num_intervals"],
        learning_rate=values["learning_rate"],
        seed=values["seed"],
    )
    failure_model = None
    if values["bitwidth"] == "auto":
        failure_model = FailureModel(
            failure_rate=values["failure_rate"],
            nodes=values["nodes"],
            duration_hours=values["duration_hours"],
        )
    run_cfg = RunConfig(
        checkpoint_interval=values["batches_per_interval"],
        policy=values["policy"],
        bitwidth=values["bitwidth"],
        failure_model=failure_model,
        chunk_rows=values["chunk_rows"],
        keep_last_n=values["keep_last"],
        workers=values["workers"],
        restore_fallback=values["restore_fallback"],
    )
    schedule = FailureSchedule.from_string(values["failures"])
    workload.validate()
    run_cfg.validate()
    return workload, run_cfg, schedule


def _apply_overrides(raw: dict[str, str], args) -> dict[str, str]:
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"--set: unknown key {key!r}")
        raw[key] = value.strip()
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    return raw


def cmd_run(args) -> int:
    raw = parse_config_file(args.config) if args.config else {}
    raw = _apply_overrides(raw, args)
    workload, run_cfg, schedule = build_configs(raw)
    store = LocalDirectoryStore(args.store_root)
    report = run_workload(workload, run_cfg, store, schedule=schedule, run_id=args.run_id)
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.json").write_text(report.to_json() + "\n")
        Path(f"{prefix}.csv").write_text(report.to_csv())
    if not args.quiet:
        for line in report.summary_lines():
            print(line)
        if args.out:
            print(f"  report written to {args.out}.json / {args.out}.csv")
    return 0


def cmd_restore_check(args) -> int:
    store = LocalDirectoryStore(args.store_root)
    cstore = CheckpointStore(store, args.run_id)
    restored = engine_restore(cstore, checkpoint_id=args.checkpoint)
    m = restored.manifest
    print(f"checkpoint {m.checkpoint_id} ({m.kind}, policy={m.policy}) verified")
    print(f"  chain: {restored.chain_ids}")
    print(f"  snapshot batch: {m.snapshot_batch}")
    print(f"  payload bytes: {m.payload_bytes}")
    print(f"  state digest: {state_digest(restored.model)}")
    return 0


_BENCH_CODECS = ("symmetric", "asymmetric", "adaptive", "kmeans_vector", "kmeans_blocks")


def _bench_mean_l2(x: np.ndarray, codec: str, bitwidth: int, seed: int) -> float:
    if codec in ("symmetric", "asymmetric"):
        if codec == "symmetric":
            peak = np.abs(x).max(axis=1)
            mins, maxs = -peak, peak
        else:
            mins, maxs = x.min(axis=1), x.max(axis=1)
        errs = quant.reconstruction_errors(x, mins, maxs, bitwidth)
        return float(errs.mean())
    if codec == "adaptive":
        cfg = quant.default_adaptive_config(bitwidth)
        if cfg is None:
            mins, maxs = x.min(axis=1), x.max(axis=1)
        else:
            mins, maxs = quant.adaptive_params_rows(x, bitwidth, cfg)
        errs = quant.reconstruction_errors(x, mins, maxs, bitwidth)
        return float(errs.mean())
    granularity = "per_vector" if codec == "kmeans_vector" else "contiguous_blocks"
    blocks = 1 if codec == "kmeans_vector" else 4
    result = quant.kmeans_quantize(x, bitwidth, granularity=granularity,
                                   num_blocks=blocks, seed=seed)
    return quant.mean_l2_loss(x, result.reconstruct())


def cmd_quant_bench(args) -> int:
    x = quant.benchmark_corpus(args.vectors, args.dim, args.seed)
    rows = []
    for bitwidth in quant.VALID_BITWIDTHS:
        for codec in _BENCH_CODECS:
            rows.append((bitwidth, codec, _bench_mean_l2(x, codec, bitwidth, args.seed)))
    print(f"corpus: {args.vectors} vectors, dim {args.dim}, seed {args.seed}")
    print(f"{'bits':>4}  {'codec':<14} {'mean_l2':>12}")
    for bitwidth, codec, err in rows:
        print(f"{bitwidth:>4}  {codec:<14} {err:>12.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("bitwidth,codec,mean_l2\n")
            for bitwidth, codec, err in rows:
                fh.write(f"{bitwidth},{codec},{err}\n")
        print(f"written to {args.out}")
    return 0


def cmd_gc(args) -> int:
    store = LocalDirectoryStore(args.store_root)
    cstore = CheckpointStore(store, args.run_id)
    deleted = cstore.gc(args.keep)
    kept = cstore.valid_ids()
    print(f"deleted checkpoints: {deleted if deleted else 'none'}")
    print(f"kept checkpoints: {kept}")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltasnap",
        description="Incremental quantized checkpointing for embedding models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a synthetic workload with checkpointing")
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--store-root", required=True, help="checkpoint directory")
    p.add_argument("--run-id", default="run")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", help="write <out>.json and <out>.csv reports")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("restore-check", help="verify and rebuild a stored checkpoint")
    p.add_argument("--store-root", required=True)
    p.add_argument("--run-id", default="run")
    p.add_argument("--checkpoint", type=int, default=None,
                   help="checkpoint id (default: newest valid)")
    p.set_defaults(func=cmd_restore_check)

    p = sub.add_parser("quant-bench", help="compare quantization codecs")
    p.add_argument("--vectors", type=int, default=1000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write results as CSV")
    p.set_defaults(func=cmd_quant_bench)

    p = sub.add_parser("gc", help="delete checkpoints beyond a retention count")
    p.add_argument("--store-root", required=True)
    p.add_argument("--run-id", default="run")
    p.add_argument("--keep", type=int, required=True)
    p.set_defaults(func=cmd_gc)

    return parser


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DeltaSnapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
