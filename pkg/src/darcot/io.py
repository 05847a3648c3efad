"""Binary tensor files, checkpoints, JSON configs and atomic writes.

Tensor file layout (all integers little-endian)::

    b"FRTN" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u32 rank | rank x u64 dims | payload

Checkpoint layout::

    b"FRCK" | u64 header length | UTF-8 JSON header | concatenated tensor files

The header holds ``format_version``, ``step``, ``config_hash``, free-form
``meta`` and a ``tensors`` index mapping each name to the byte offset and
length of its tensor file, counted from the start of the payload area.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ContractViolation, FormatError

TENSOR_MAGIC = b"FRTN"
TENSOR_VERSION = 1
CKPT_MAGIC = b"FRCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


# ------------------------------------------------------------ atomic writes


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the target directory, fsync, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | Path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ tensor files


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    native = arr.dtype.newbyteorder("=")
    if native not in _CODES:
        raise ContractViolation(f"tensor files hold float32/float64 only, got {arr.dtype}")
    code = _CODES[native]
    head = TENSOR_MAGIC + struct.pack("<IBI", TENSOR_VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns (array, end offset)."""

    def need(n: int, field: str) -> None:
        if offset + n > len(buf):
            raise FormatError(f"truncated tensor file: missing {field}")

    need(4, "magic")
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {TENSOR_MAGIC!r}")
    offset += 4
    need(9, "version/dtype/rank")
    version, code, rank = struct.unpack_from("<IBI", buf, offset)
    offset += 9
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    need(8 * rank, "dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    dt = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    need(nbytes, "payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), offset + nbytes


def save_tensor(arr: np.ndarray, path: str | Path) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload")
    return arr


def tensor_roundtrip(arr, path: str | Path) -> np.ndarray:
    data = getattr(arr, "data", arr)
    save_tensor(data, path)
    return load_tensor(path)


# ------------------------------------------------------------ checkpoints


@dataclasses.dataclass
class Checkpoint:
    step: int
    config_hash: str
    tensors: dict[str, np.ndarray]
    meta: dict = dataclasses.field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index, blobs, pos = {}, [], 0
    for name in sorted(ckpt.tensors):
        blob = encode_tensor(ckpt.tensors[name])
        index[name] = {"offset": pos, "length": len(blob)}
        blobs.append(blob)
        pos += len(blob)
    header = {
        "format_version": CKPT_VERSION,
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "tensors": index,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise FormatError("truncated checkpoint: missing header length")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    if 12 + hlen > len(buf):
        raise FormatError("truncated checkpoint: header")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 12 + hlen
    tensors = {}
    for name, ent in header["tensors"].items():
        start = base + ent["offset"]
        arr, end = decode_tensor(buf, start)
        if end - start != ent["length"]:
            raise FormatError(f"tensor {name!r}: length mismatch")
        tensors[name] = arr
    return Checkpoint(header["step"], header["config_hash"], tensors, header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------------ configs


def config_hash(cfg: Mapping[str, Any]) -> str:
    """Stable hash of the semantic config fields (sorted-key JSON)."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: str | Path, schema: type) -> Any:
    """Read a JSON object into the dataclass ``schema``, rejecting unknown keys."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw, schema)


def config_from_dict(raw: Mapping[str, Any], schema: type) -> Any:
    if not isinstance(raw, Mapping):
        raise ContractViolation("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(schema)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ContractViolation(f"unknown config keys: {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    return schema(**kwargs)
