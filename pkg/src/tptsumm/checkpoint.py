"""Binary checkpoint / tensor-table files.

Layout (all integers little-endian)::

    b"TPTS"              magic
    u32                  format version (1)
    u64                  header length in bytes
    header               canonical JSON (sorted keys, no whitespace), UTF-8
    u32                  tensor count
    per tensor:
      u32 + bytes        name (UTF-8)
      u8                 dtype code (0 float32, 1 float64, 2 int64)
      u32 + u64*ndim     shape
      raw bytes          little-endian values, C order

The same table format carries probe representation dumps.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"TPTS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_table(path, header: dict, tensors: dict) -> None:
    buf = io.BytesIO()
    hdr = canonical_json(header).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_table(path) -> tuple[dict, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read ({e})") from e
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated file")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a TPTS file)")
    version, hlen = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8", errors="strict")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return header, tensors


@dataclass
class Checkpoint:
    config: dict
    params: dict
    step: int = 0
    optimizer: dict = field(default_factory=dict)
    optimizer_t: int = 0
    rng_state: Optional[dict] = None
    train_config: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model, optimizer=None, rng=None, step: int = 0, train_config=None,
                    extra: Optional[dict] = None) -> None:
    header = {
        "kind": "checkpoint",
        "config": model.config.to_dict(),
        "step": int(step),
        "optimizer_t": int(optimizer.t) if optimizer is not None else 0,
        "rng": rng.state() if rng is not None else None,
        "train_config": train_config.to_dict() if train_config is not None else None,
        "extra": extra or {},
    }
    tensors = {f"param/{k}": v.data for k, v in model.params.items()}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    write_table(path, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_table(path)
    if header.get("kind") != "checkpoint" or "config" not in header:
        raise CheckpointError(f"{path}: not a model checkpoint")
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    optim = {k: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(config=header["config"], params=params, step=header["step"], optimizer=optim,
                      optimizer_t=header.get("optimizer_t", 0), rng_state=header.get("rng"),
                      train_config=header.get("train_config"), extra=header.get("extra", {}))


def restore(ckpt: Checkpoint):
    """Rebuild ``(model, optimizer, rng)`` from a loaded checkpoint."""
    from . import tensor as T
    from .model import ModelConfig, TPTransformer
    from .rng import Rng
    from .training import Adafactor

    config = ModelConfig.from_dict(ckpt.config)
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else T.get_default_dtype()
    with T.default_dtype(dtype):
        model = TPTransformer(config, seed=0)
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not match its config: {e}") from e
    optimizer = Adafactor(model.params)
    if ckpt.optimizer:
        try:
            optimizer.load_state_arrays(ckpt.optimizer, ckpt.optimizer_t)
        except (KeyError, ValueError) as e:
            raise CheckpointError(str(e)) from e
    rng = Rng.from_state(ckpt.rng_state) if ckpt.rng_state else None
    return model, optimizer, rng
