"""Versioned binary checkpoints with bit-exact round-trips.

Layout (all integers little-endian):

    magic "AIRL" | version u32 | metadata_len u32 | metadata UTF-8 JSON
    then repeated records:
    name_len u32 | name UTF-8 | role u8 | rank u8 | dims u64 * rank
    | payload float64 * prod(dims)

Records are written in sorted-name order and metadata JSON with sorted keys,
so save(load(save(x))) reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import encoder, frameworks
from .config import ExperimentConfig, parse_config
from .errors import CheckpointError
from .numerics import Rng

MAGIC = b"AIRL"
FORMAT_VERSION = 1

ROLE_CODES = {
    "weight": 0,
    "bias": 1,
    "norm_gain": 2,
    "norm_bias": 3,
    "stat": 4,
    "buffer": 5,
}
CODE_ROLES = {v: k for k, v in ROLE_CODES.items()}


def checkpoint_bytes(records: dict[str, tuple[str, np.ndarray]],
                     metadata: dict) -> bytes:
    """Serialize records {name: (role, array)} plus metadata."""
    meta = json.dumps(metadata, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<I", len(meta)), meta]
    for name in sorted(records):
        role, array = records[name]
        if role not in ROLE_CODES:
            raise CheckpointError(f"unknown role tag {role!r} for {name!r}")
        arr = np.ascontiguousarray(array, dtype="<f8")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", ROLE_CODES[role], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_checkpoint_bytes(blob: bytes):
    """Inverse of checkpoint_bytes: (records, metadata)."""
    if blob[:4] != MAGIC:
        raise CheckpointError(
            f"bad magic {blob[:4]!r}; not a checkpoint file"
        )
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} "
            f"(expected {FORMAT_VERSION})"
        )
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    try:
        metadata = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    offset += meta_len
    records: dict[str, tuple[str, np.ndarray]] = {}
    while offset < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            role_code, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            array = np.frombuffer(blob, dtype="<f8", count=count,
                                  offset=offset).reshape(dims).copy()
            offset += 8 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated checkpoint record: {exc}") from exc
        if role_code not in CODE_ROLES:
            raise CheckpointError(f"unknown role code {role_code}")
        records[name] = (CODE_ROLES[role_code], array)
    return records, metadata


def save_checkpoint(path, records, metadata) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(records, metadata))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint_bytes(fh.read())


def _branch_records(prefix: str, params: encoder.EncoderParams, records) -> None:
    for name, tensor in params.tensors.items():
        records[f"{prefix}.{name}"] = (params.roles[name], tensor)
    for name, tensor in params.running.items():
        records[f"{prefix}.stat.{name}"] = ("stat", tensor)


def state_records(state: frameworks.SiameseState,
                  cfg: ExperimentConfig) -> tuple[dict, dict]:
    """Checkpoint records and metadata for a full siamese training state."""
    records: dict[str, tuple[str, np.ndarray]] = {}
    _branch_records("student", state.student, records)
    _branch_records("teacher", state.teacher, records)
    metadata = {
        "framework": cfg["framework.kind"],
        "step": state.step,
        "total_steps": state.total_steps,
        "config": cfg.canonical_text(),
        "config_hash": cfg.config_hash(),
        "queue_capacity": 0,
        "queue_cursor": 0,
        "queue_count": 0,
    }
    if state.queue is not None:
        records["queue.data"] = ("buffer", state.queue.data)
        metadata["queue_capacity"] = state.queue.capacity
        metadata["queue_cursor"] = state.queue.cursor
        metadata["queue_count"] = state.queue.count
    return records, metadata


def save_state(path, state: frameworks.SiameseState,
               cfg: ExperimentConfig) -> None:
    records, metadata = state_records(state, cfg)
    save_checkpoint(path, records, metadata)


def _fill_branch(prefix: str, params: encoder.EncoderParams, records) -> None:
    for name in params.tensors:
        key = f"{prefix}.{name}"
        if key not in records:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        role, array = records[key]
        if array.shape != params.tensors[name].shape:
            raise CheckpointError(
                f"tensor {key!r} has shape {array.shape}, expected "
                f"{params.tensors[name].shape}"
            )
        params.tensors[name] = array.astype(np.float64)
        params.roles[name] = role if role in encoder.ROLES else params.roles[name]
    for name in params.running:
        key = f"{prefix}.stat.{name}"
        if key not in records:
            raise CheckpointError(f"checkpoint is missing statistic {key!r}")
        params.running[name] = records[key][1].astype(np.float64)


def load_state(path):
    """Rebuild (state, experiment config, metadata) from a checkpoint."""
    records, metadata = load_checkpoint(path)
    cfg = parse_config(metadata["config"])
    fw = cfg.framework_config()
    state = frameworks.init_siamese_state(
        fw, Rng(0, 0), total_steps=max(int(metadata["total_steps"]), 1)
    )
    state.total_steps = int(metadata["total_steps"])
    state.step = int(metadata["step"])
    _fill_branch("student", state.student, records)
    _fill_branch("teacher", state.teacher, records)
    if metadata.get("queue_capacity", 0) > 0:
        queue = frameworks.MemoryQueue(int(metadata["queue_capacity"]),
                                       fw.projector_out)
        if "queue.data" not in records:
            raise CheckpointError("checkpoint is missing queue.data")
        queue.data = records["queue.data"][1].astype(np.float64)
        queue.cursor = int(metadata["queue_cursor"])
        queue.count = int(metadata["queue_count"])
        state.queue = queue
    else:
        state.queue = None
    return state, cfg, metadata


def trainable_records(records: dict) -> dict:
    """The subset of checkpoint records that are trainable parameters."""
    return {
        name: (role, array)
        for name, (role, array) in records.items()
        if role in encoder.ROLES
    }
