"""Binary checkpoint serialization.

Layout (little-endian throughout):

    magic "OMGF" | version u32 | meta-length u64 | meta JSON (UTF-8)
    | parameter table | buffer table | optimizer flag u8
    [| optimizer velocity table | step count u64]

Each table is a u32 entry count followed by entries of: name (u16 length +
UTF-8), dtype code u8 (0 = float32, 1 = float64), rank u8, extents u64 each,
raw row-major values. Round-trips are bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import FusionModel, ModelConfig

MAGIC = b"OMGF"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] | None = None
    step_count: int = 0

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["model_config"])


def _write_table(fp, table: dict[str, np.ndarray]) -> None:
    fp.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode("utf-8")
        fp.write(struct.pack("<H", len(raw)))
        fp.write(raw)
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        fp.write(struct.pack("<BB", code, arr.ndim))
        fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        le = arr.astype(_CODE_DTYPES[code], copy=False)
        fp.write(np.ascontiguousarray(le).tobytes())


def _read_table(fp) -> dict[str, np.ndarray]:
    count, = struct.unpack("<I", fp.read(4))
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen, = struct.unpack("<H", fp.read(2))
        name = fp.read(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", fp.read(2))
        shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank)) if rank else ()
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fp.read(n * dt.itemsize), dtype=dt)
        table[name] = data.reshape(shape).copy()
    return table


def save_checkpoint(path: str | Path, model: FusionModel,
                    training_meta: dict | None = None,
                    velocity: dict[str, np.ndarray] | None = None,
                    step_count: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "model_config": model.cfg.to_dict(),
        "stream_names": list(model.cfg.stream_names),
        "dtype": str(model.np_dtype),
        "training": training_meta or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<I", VERSION))
        fp.write(struct.pack("<Q", len(blob)))
        fp.write(blob)
        _write_table(fp, {k: v.data for k, v in model.named_parameters().items()})
        _write_table(fp, model.named_buffers())
        if velocity is None:
            fp.write(struct.pack("<B", 0))
        else:
            fp.write(struct.pack("<B", 1))
            _write_table(fp, velocity)
            fp.write(struct.pack("<Q", step_count))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, = struct.unpack("<I", fp.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} "
                f"(this build reads version {VERSION})")
        blen, = struct.unpack("<Q", fp.read(8))
        meta = json.loads(fp.read(blen).decode("utf-8"))
        params = _read_table(fp)
        buffers = _read_table(fp)
        flag, = struct.unpack("<B", fp.read(1))
        velocity = None
        step_count = 0
        if flag:
            velocity = _read_table(fp)
            step_count, = struct.unpack("<Q", fp.read(8))
    return Checkpoint(meta=meta, params=params, buffers=buffers,
                      velocity=velocity, step_count=step_count)


def config_diff(expected: ModelConfig, stored: ModelConfig) -> list[str]:
    a, b = expected.to_dict(), stored.to_dict()
    return [f"{k}: expected {a[k]!r}, checkpoint has {b[k]!r}"
            for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]


def load_into_model(model: FusionModel, ck: Checkpoint) -> None:
    """Copy stored arrays into the model; configs must match exactly."""
    diff = config_diff(model.cfg, ck.config)
    if diff:
        raise CheckpointError(
            "checkpoint/model configuration mismatch:\n  " + "\n  ".join(diff))
    params = model.named_parameters()
    missing = sorted(set(params) - set(ck.params))
    extra = sorted(set(ck.params) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"parameter table mismatch; missing={missing[:5]} extra={extra[:5]}")
    for name, p in params.items():
        arr = ck.params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: stored shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        p.grad = None
    buffers = model.named_buffers()
    for name, arr in ck.buffers.items():
        if name in buffers:
            model.set_buffer(name, arr.astype(buffers[name].dtype, copy=False))


def model_from_checkpoint(path: str | Path) -> tuple[FusionModel, Checkpoint]:
    ck = load_checkpoint(path)
    dtype = np.dtype(ck.meta.get("dtype", "float32"))
    model = FusionModel(ck.config, seed=0, dtype=dtype)
    load_into_model(model, ck)
    return model, ck
