"""
On-disk formats: dataset directories, checkpoints, round logs, feature
exports and run manifests.

Text tables are tab-separated with a header and %.17g floats so that
write -> read -> write reproduces the same bytes. JSON written for datasets
and checkpoints uses sorted keys and carries no timestamps; only the run
manifest records wall-clock time.
"""

import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from src.gridsentinel.config import GeneratorConfig, SplitSpec
from src.gridsentinel.encoder import ModelParams
from src.gridsentinel.errors import CheckpointError, PreconditionError
from src.gridsentinel.features import RAW_FEATURES
from src.gridsentinel.telemetry import AttackSchedule, TelemetryDataset, frame_columns
from src.gridsentinel.topology import TOPOLOGY_VERSION, GridTopology

logger = logging.getLogger("gridsentinel.artifacts")

DATASET_FORMAT = "gridsentinel-dataset/1"
CHECKPOINT_FORMAT = "gridsentinel-checkpoint/1"
RUN_MANIFEST_FORMAT = "gridsentinel-run/1"
CODE_VERSION = "0.1.0"

SCHEDULE_COLUMNS = ["node", "start", "end", "ramp"]


class ManifestEncoder(json.JSONEncoder):
    """JSON encoder for manifest values: datetimes, numpy scalars and arrays."""

    def default(self, obj):
        if isinstance(obj, datetime):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super().default(obj)


def _dump_json(data, path):
    with open(path, "w", newline="\n") as f:
        json.dump(data, f, indent=2, sort_keys=True, cls=ManifestEncoder)
        f.write("\n")


def _load_json(path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise PreconditionError(f"{path} not found") from None
    except json.JSONDecodeError as e:
        raise PreconditionError(f"{path}: invalid JSON ({e})") from e


def write_table(df, path):
    df.to_csv(path, sep="\t", index=False, float_format="%.17g", lineterminator="\n")


def read_table(path, dtype=None):
    return pd.read_csv(path, sep="\t", float_precision="round_trip", dtype=dtype)


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------- stage directories ----------

def prepare_stage_dir(path, force=False):
    """Create an empty stage directory; refuse to reuse a non-empty one unless forced."""
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise PreconditionError(f"{path} already exists and is not empty; pass --force to overwrite")
        logger.warning("clearing existing stage directory %s", path)
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def write_run_manifest(stage_dir, stage, config, extra=None):
    """Config echo and provenance, written once before any stage output."""
    path = os.path.join(stage_dir, "run_manifest.json")
    if os.path.exists(path):
        raise PreconditionError(f"{path} already written")
    manifest = {
        "format": RUN_MANIFEST_FORMAT,
        "code_version": CODE_VERSION,
        "stage": stage,
        "started_at": datetime.now(timezone.utc),
        "config": config.to_flat(),
        **(extra or {}),
    }
    _dump_json(manifest, path)
    return manifest


def read_run_manifest(stage_dir):
    return _load_json(os.path.join(stage_dir, "run_manifest.json"))


# ---------- datasets ----------

def _frame_dtypes(n_sub):
    dtypes = {name: np.float64 for name in frame_columns(n_sub)}
    for name in ("t", "tx_count", "time_since_last_tx", "label"):
        dtypes[name] = np.int64
    return dtypes


def dataset_checksum(files):
    """Digest over per-file digests in sorted path order."""
    digest = hashlib.sha256()
    for name in sorted(files):
        digest.update(f"{name}\t{files[name]}\n".encode())
    return digest.hexdigest()


def write_dataset(dataset, directory):
    """Persist frames, topology and schedule; returns the dataset manifest."""
    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    files = {}

    with open(os.path.join(directory, "topology.tsv"), "w", newline="\n") as f:
        f.write("\n".join(dataset.topology.to_records()) + "\n")
    files["topology.tsv"] = sha256_file(os.path.join(directory, "topology.tsv"))

    schedule = pd.DataFrame(dataset.schedule.to_records(), columns=SCHEDULE_COLUMNS)
    write_table(schedule, os.path.join(directory, "schedule.tsv"))
    files["schedule.tsv"] = sha256_file(os.path.join(directory, "schedule.tsv"))

    for node, frame in sorted(dataset.frames.items()):
        name = f"frames/node_{node:02d}.tsv"
        write_table(frame, os.path.join(directory, name))
        files[name] = sha256_file(os.path.join(directory, name))

    manifest = {
        "format": DATASET_FORMAT,
        "topology_version": TOPOLOGY_VERSION,
        "seed": dataset.config.seed,
        "generator": asdict(dataset.config),
        "split": asdict(dataset.split),
        "segments": {k: list(v) for k, v in dataset.split.boundaries(dataset.timesteps).items()},
        "raw_features": RAW_FEATURES,
        "node_cfo": {str(n): repr(float(v)) for n, v in sorted(dataset.node_cfo.items())},
        "files": files,
        "checksum": dataset_checksum(files),
    }
    _dump_json(manifest, os.path.join(directory, "manifest.json"))
    logger.info("wrote dataset with %d frame tables to %s (checksum %s)",
                len(dataset.frames), directory, manifest["checksum"][:12])
    return manifest


def read_dataset_manifest(directory):
    manifest = _load_json(os.path.join(directory, "manifest.json"))
    if manifest.get("format") != DATASET_FORMAT:
        raise PreconditionError(f"{directory}: unsupported dataset format {manifest.get('format')!r}")
    return manifest


def load_dataset(directory, verify=True):
    """Read a dataset directory back into a TelemetryDataset."""
    manifest = read_dataset_manifest(directory)
    if verify:
        for name, expected in sorted(manifest["files"].items()):
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise PreconditionError(f"dataset file {name} is missing")
            if sha256_file(path) != expected:
                raise PreconditionError(f"dataset file {name} does not match its manifest checksum")

    gen = GeneratorConfig(**manifest["generator"])
    split = SplitSpec(**manifest["split"])
    with open(os.path.join(directory, "topology.tsv"), "r") as f:
        topology = GridTopology.from_records(f.read().splitlines())
    schedule_table = read_table(os.path.join(directory, "schedule.tsv"), dtype=np.int64)
    schedule = AttackSchedule.from_records(schedule_table.to_dict("records"))

    dtypes = _frame_dtypes(gen.n_sub)
    frames = {}
    for node in topology.nodes:
        frames[node.id] = read_table(os.path.join(directory, f"frames/node_{node.id:02d}.tsv"), dtype=dtypes)
    node_cfo = {int(n): float(v) for n, v in manifest["node_cfo"].items()}
    return TelemetryDataset(topology, gen, split, schedule, frames, node_cfo)


def check_dataset_matches(manifest, config):
    """Refuse datasets generated under a different generator or split configuration."""
    expected_gen = asdict(config.gen)
    expected_split = asdict(config.split)
    diffs = [k for k in expected_gen if manifest["generator"].get(k) != expected_gen[k]]
    diffs += [f"split.{k}" for k in expected_split if manifest["split"].get(k) != expected_split[k]]
    if diffs:
        raise PreconditionError(f"dataset manifest disagrees with the configuration on: {', '.join(sorted(diffs))}")


# ---------- checkpoints ----------

def save_checkpoint(params, directory, hyperparameters=None, extra=None):
    os.makedirs(directory, exist_ok=True)
    payload = params.tobytes()
    with open(os.path.join(directory, "params.bin"), "wb") as f:
        f.write(payload)
    offset, entries = 0, []
    for name, shape in params.manifest():
        size = int(np.prod(shape)) * 8
        entries.append({"name": name, "shape": list(shape), "offset": offset, "bytes": size})
        offset += size
    meta = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "<f8",
        "parameters": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "hyperparameters": hyperparameters or {},
        **(extra or {}),
    }
    _dump_json(meta, os.path.join(directory, "checkpoint.json"))
    logger.info("saved checkpoint with %d parameters to %s", params.count(), directory)
    return meta


def load_checkpoint(directory, expected_manifest=None):
    """Load parameters; names and shapes must match expected_manifest when given."""
    meta = _load_json(os.path.join(directory, "checkpoint.json"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{directory}: unsupported checkpoint format {meta.get('format')!r}")
    try:
        with open(os.path.join(directory, "params.bin"), "rb") as f:
            payload = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"{directory}/params.bin not found") from None
    if hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise CheckpointError("checkpoint payload does not match its recorded checksum")
    manifest = [(e["name"], tuple(e["shape"])) for e in meta["parameters"]]
    if expected_manifest is not None and manifest != list(expected_manifest):
        raise CheckpointError("checkpoint parameter names or shapes differ from the model configuration")
    return ModelParams.frombytes(manifest, payload), meta


# ---------- logs and exports ----------

def append_round_log(path, record):
    with open(path, "a", newline="\n") as f:
        f.write(json.dumps(record, sort_keys=True, cls=ManifestEncoder) + "\n")


def read_round_log(path):
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def export_feature_tables(tables, directory):
    """tables maps (client, split) to a feature DataFrame."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for (client, split), table in sorted(tables.items()):
        path = os.path.join(directory, f"node_{client:02d}_{split}.tsv")
        write_table(table, path)
        paths.append(path)
    logger.info("exported %d feature tables to %s", len(paths), directory)
    return paths
