"""Binary checkpoint files.

Layout, all integers little-endian u32 and all tensors little-endian f64
row-major::

    b"MCK1" | version | len | metadata JSON (trainer config, sizes, shapes)
    | n | n x (name len | name | rows | cols | data)          parameters
    | step | lr eps beta1 beta2 weight_decay (f64)            Adam scalars
    | n | tensors (first moments) | n | tensors (second moments)
    | best epoch | epochs run | best metric (f64)
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IncompatibleArtifactError
from .numerics import AdamState
from .recommender import TrainerConfig

MAGIC = b"MCK1"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainerConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    best_epoch: int
    best_metric: float
    epochs_run: int
    meta: dict


def _write_tensors(out, tensors: dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        arr2 = arr.reshape(arr.shape[0], -1) if arr.ndim else arr.reshape(1, 1)
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<II", *arr2.shape))
        out.write(np.ascontiguousarray(arr2).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.buf = memoryview(blob)
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IncompatibleArtifactError(f"{self.path}: truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n].tobytes()
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            rows, cols = self.unpack("<II")
            out[name] = np.frombuffer(self.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
        return out


def save_checkpoint(path, config: TrainerConfig, params: dict[str, np.ndarray], adam: AdamState,
                    best_epoch: int, best_metric: float, epochs_run: int, meta: dict | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    info = dict(meta or {})
    info["trainer"] = config.to_dict()
    info["shapes"] = {name: list(p.shape) for name, p in sorted(params.items())}
    blob = json.dumps(info, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(blob)))
    out.write(blob)
    _write_tensors(out, params)
    out.write(struct.pack("<I5d", adam.step, adam.lr, adam.eps, adam.beta1, adam.beta2, adam.weight_decay))
    _write_tensors(out, adam.m)
    _write_tensors(out, adam.v)
    out.write(struct.pack("<IId", best_epoch, epochs_run, best_metric))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(out.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise IncompatibleArtifactError(f"{path}: not a checkpoint file (bad magic)")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise IncompatibleArtifactError(f"{path}: checkpoint version {version}, expected {VERSION}")
    meta = json.loads(r.take(n).decode("utf-8"))
    config = TrainerConfig.from_dict(meta["trainer"])
    dtype = np.dtype(config.dtype)
    shapes = meta["shapes"]

    def shaped(tensors):
        return {k: v.reshape(shapes[k]).astype(dtype) for k, v in tensors.items()}

    params = shaped(r.tensors())
    step, lr, eps, b1, b2, wd = r.unpack("<I5d")
    m = shaped(r.tensors())
    v = shaped(r.tensors())
    best_epoch, epochs_run, best_metric = r.unpack("<IId")
    if r.pos != len(r.buf):
        raise IncompatibleArtifactError(f"{path}: trailing bytes after checkpoint")
    adam = AdamState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v)
    return Checkpoint(config, params, adam, best_epoch, best_metric, epochs_run, meta)
