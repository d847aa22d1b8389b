"""
Versioned binary checkpoints.

Layout (all integers little-endian):
    magic b"MADICKPT" | version u32 | metadata length u32 | metadata JSON (utf-8)
    then record groups, each: record count u32 followed by records of
    name length u16 | name (utf-8) | rank u8 | dims u32 * rank | float32 payload
Groups: parameters, buffers, and when optimizer state is saved, first and second moments.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Optional

import numpy as np

from assembly import build_model
from config import RunConfig
from encoders import TextVocab
from errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"MADICKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    parameters: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    vocab: List[str] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    optimizer: Optional[Dict] = None
    version: int = FORMAT_VERSION


def _write_records(f: BinaryIO, arrays: Dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(arrays)))
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<B", array.ndim))
        if array.ndim:
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, size: int) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError("checkpoint is truncated")
    return data


def _read_records(f: BinaryIO) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    arrays = {}
    for _ in range(count):
        (name_length,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, name_length).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(f, 1))
        shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4")
        arrays[name] = payload.reshape(shape).astype(np.float32)
    return arrays


def save_checkpoint(path: str, parameters: Dict[str, np.ndarray], buffers: Optional[Dict[str, np.ndarray]] = None,
                    vocab: Optional[List[str]] = None, config: Optional[Dict] = None,
                    optimizer: Optional[Dict] = None) -> str:
    """
    Write a checkpoint file.

    ``optimizer`` is either None or {"step": int, "updates": {...}, "first_moment": {...},
    "second_moment": {...}}; "updates" holds per-parameter update counts and may be omitted.
    """
    metadata = {
        "vocab": list(vocab or []),
        "config": config or {},
        "has_optimizer": optimizer is not None,
        "optimizer_step": int(optimizer["step"]) if optimizer else 0,
        "optimizer_updates": {k: int(v) for k, v in (optimizer or {}).get("updates", {}).items()},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    encoded = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(encoded)))
        f.write(encoded)
        _write_records(f, parameters)
        _write_records(f, buffers or {})
        if optimizer is not None:
            _write_records(f, optimizer["first_moment"])
            _write_records(f, optimizer["second_moment"])
    logger.info(f"Saved checkpoint with {len(parameters)} parameters to {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, meta_length = struct.unpack("<II", _read_exact(f, 8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            metadata = json.loads(_read_exact(f, meta_length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"checkpoint metadata is corrupt: {e}") from e
        parameters = _read_records(f)
        buffers = _read_records(f)
        optimizer = None
        if metadata.get("has_optimizer"):
            optimizer = {
                "step": metadata.get("optimizer_step", 0),
                "updates": metadata.get("optimizer_updates", {}),
                "first_moment": _read_records(f),
                "second_moment": _read_records(f),
            }
        if f.read(1):
            raise CheckpointError("checkpoint has trailing bytes")
    return Checkpoint(
        parameters=parameters,
        buffers=buffers,
        vocab=metadata.get("vocab", []),
        config=metadata.get("config", {}),
        optimizer=optimizer,
        version=version,
    )


def save_model(path: str, model, optimizer=None) -> str:
    """Checkpoint a MadiModel together with its vocabulary and config snapshot."""
    parameters = {name: p.data for name, p in model.named_parameters()}
    buffers = dict(model.named_buffers())
    state = None
    if optimizer is not None:
        state = {
            "step": optimizer.state.step,
            "updates": optimizer.state.updates,
            "first_moment": optimizer.state.first_moment,
            "second_moment": optimizer.state.second_moment,
        }
    return save_checkpoint(path, parameters, buffers, model.vocab.tokens,
                           model.config.model_dump(mode="json"), state)


def restore_model(checkpoint: Checkpoint, model) -> None:
    """Load parameters and buffers into an already-built model of the matching shape."""
    expected = {name for name, _ in model.named_parameters()}
    missing = sorted(expected - set(checkpoint.parameters))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    try:
        model.load_state_dict({**checkpoint.buffers, **checkpoint.parameters})
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not match the model: {e}") from e


def load_model(path: str):
    """Rebuild a MadiModel from a checkpoint's config snapshot and vocabulary."""
    checkpoint = load_checkpoint(path)
    try:
        config = RunConfig.model_validate(checkpoint.config)
    except ValueError as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from e
    model = build_model(config, TextVocab(checkpoint.vocab))
    restore_model(checkpoint, model)
    return model
