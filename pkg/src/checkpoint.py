"""
Versioned binary checkpoints
Layout: magic, format version, model kind, JSON metadata (hyperparameters,
config snapshot, variant, fingerprint) and a named-tensor index of
little-endian float64 arrays
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Union

import numpy as np

from src.encoders import AudioBackbone
from src.exceptions import DependencyError, FormatError
from src.student import StudentModel
from src.teacher import TeacherModel

logger = logging.getLogger(__name__)

MAGIC = b"ZICKPT\x00\x01"
FORMAT_VERSION = 1
KINDS = ("teacher", "student", "backbone")

Model = Union[TeacherModel, StudentModel, AudioBackbone]


@dataclass
class Checkpoint:
    kind: str
    variant: str
    model: Model
    config: dict
    fingerprint: str


def model_kind(model: Model) -> str:
    if isinstance(model, TeacherModel):
        return "teacher"
    if isinstance(model, StudentModel):
        return "student"
    if isinstance(model, AudioBackbone):
        return "backbone"
    raise FormatError(f"cannot checkpoint a {type(model).__name__}")


def _hyperparameters(model: Model) -> dict:
    if isinstance(model, AudioBackbone):
        return {"layer2_trainable": model.layer2_trainable, "seed": model.seed}
    return model.hyperparameters()


def _rebuild(kind: str, hyper: dict, tensors: Dict[str, np.ndarray]) -> Model:
    if kind == "teacher":
        return TeacherModel.from_state(hyper, tensors)
    if kind == "student":
        return StudentModel.from_state(hyper, tensors)
    return AudioBackbone(tensors["w1"], tensors["b1"], tensors["w2"], tensors["b2"],
                         hyper["layer2_trainable"], hyper["seed"])


def _write_block(f: BinaryIO, data: bytes):
    f.write(struct.pack("<Q", len(data)))
    f.write(data)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("checkpoint is truncated")
    return data


def _read_block(f: BinaryIO) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return _read_exact(f, n)


def save_checkpoint(filepath: str, model: Model, variant: str = "",
                    config: Optional[dict] = None) -> str:
    """Write model parameters and metadata; returns the model fingerprint"""
    kind = model_kind(model)
    fingerprint = model.checksum()
    meta = {
        "kind": kind,
        "variant": variant,
        "hyperparameters": _hyperparameters(model),
        "config": config or {},
        "fingerprint": fingerprint,
    }
    tensors = model.state_dict()

    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_block(f, kind.encode("utf-8"))
        _write_block(f, json.dumps(meta, sort_keys=True).encode("utf-8"))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            _write_block(f, name.encode("utf-8"))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            _write_block(f, arr.tobytes())
    logger.info("saved %s checkpoint (%d tensors) to %s", kind, len(tensors), filepath)
    return fingerprint


def load_checkpoint(filepath: str) -> Checkpoint:
    if not Path(filepath).exists():
        raise DependencyError(f"checkpoint not found: {filepath}")
    with open(filepath, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{filepath} is not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint format-version {version}, expected {FORMAT_VERSION}")
        kind = _read_block(f).decode("utf-8")
        if kind not in KINDS:
            raise FormatError(f"unknown model kind {kind!r}")
        try:
            meta = json.loads(_read_block(f).decode("utf-8"))
        except ValueError as e:
            raise FormatError(f"corrupt checkpoint metadata: {e}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name = _read_block(f).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
            data = _read_block(f)
            if len(data) != 8 * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"tensor {name} has {len(data)} bytes for shape {shape}")
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)

    try:
        model = _rebuild(kind, meta["hyperparameters"], tensors)
    except KeyError as e:
        raise FormatError(f"checkpoint is missing {e}")
    if model.checksum() != meta["fingerprint"]:
        raise FormatError(f"checkpoint {filepath} does not match its recorded fingerprint")
    return Checkpoint(kind=kind, variant=meta.get("variant", ""), model=model,
                      config=meta.get("config", {}), fingerprint=meta["fingerprint"])
