"""Checkpoint container: JSON header + named little-endian parameter arrays.

Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, then the
raw array payloads in the order listed in the header. Save/load round-trips
bitwise, and the header records which sessions the model was pretrained on
(needed to validate inductive evaluation splits).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .model import EncoderConfig
from .numerics import ParamSet

MAGIC = b"PCCKPT01"
FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: ParamSet
    step: int
    pretrain_sessions: list[str]
    extra: dict | None = None

    @property
    def checkpoint_id(self) -> str:
        return f"step{self.step}"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries = []
    payloads = []
    for name, t in ckpt.params.items():
        arr = np.ascontiguousarray(t.data.astype(t.data.dtype.newbyteorder("<")))
        entries.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[np.dtype(arr.dtype.str)],
                "shape": list(arr.shape),
            }
        )
        payloads.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "pretrain_sessions": list(ckpt.pretrain_sessions),
        "params": entries,
    }
    if ckpt.extra:
        header["extra"] = ckpt.extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise SchemaError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise SchemaError(f"{path}: unsupported checkpoint version")
        params = ParamSet()
        for entry in header["params"]:
            dtype = np.dtype(_DTYPES[entry["dtype"]])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
            params.add(entry["name"], arr.reshape(shape))
    return Checkpoint(
        config=EncoderConfig.from_dict(header["config"]),
        params=params,
        step=int(header["step"]),
        pretrain_sessions=list(header["pretrain_sessions"]),
        extra=header.get("extra"),
    )
