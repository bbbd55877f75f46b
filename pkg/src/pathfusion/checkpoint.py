"""Deterministic single-file checkpoint format.

Layout: one JSON header line (sorted keys) followed by the raw little-endian
parameter bytes concatenated in registry order. Loading and re-saving a
checkpoint is byte-identical by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = "pathfusion-checkpoint-v1"

STAGE_TEACHER = "teacher"
STAGE_WARMUP = "student_warmup"
STAGE_DISTILLED = "student_distilled"
STAGES = (STAGE_TEACHER, STAGE_WARMUP, STAGE_DISTILLED)


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass
class Checkpoint:
    stage: str
    run_config: dict
    preprocessing: dict
    meta: dict
    params: dict[str, np.ndarray]
    train_log: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    registry = []
    blobs = []
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])  # 0-d scalars keep their shape
        le_dtype = arr.dtype.newbyteorder("<")
        registry.append({"name": name, "shape": list(arr.shape), "dtype": le_dtype.str})
        blobs.append(arr.astype(le_dtype, copy=False).tobytes(order="C"))
    header = {
        "magic": _MAGIC,
        "stage": ckpt.stage,
        "run_config": ckpt.run_config,
        "preprocessing": ckpt.preprocessing,
        "meta": ckpt.meta,
        "train_log": ckpt.train_log,
        "registry": registry,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
        if header.get("magic") != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        params: dict[str, np.ndarray] = {}
        for entry in header["registry"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"truncated parameter {entry['name']} in {path}")
            params[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"trailing bytes in {path}")
    return Checkpoint(
        stage=header["stage"],
        run_config=header["run_config"],
        preprocessing=header["preprocessing"],
        meta=header["meta"],
        params=params,
        train_log=header.get("train_log", {}),
    )
