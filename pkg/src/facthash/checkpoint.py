"""Binary checkpoints.

Layout (little-endian)::

    b"FHCK" | u8 version | u32 len | config JSON (utf-8) | u64 step | u32 n_arrays
    per array: u16 len | name | u8 dtype code | u8 ndim | u64 dims[ndim] | u64 nbytes | raw bytes
    8-byte BLAKE2b digest of everything above

The checksum is verified before anything else is parsed, so truncation and
byte corruption both surface as :class:`ChecksumError`.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch

MAGIC = b"FHCK"
VERSION = 1
DIGEST_SIZE = 8

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


class CheckpointIOError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"array {name!r}: checkpoint shape {tuple(found)} does not match expected {tuple(expected)}")
        self.name = name


@dataclass
class Checkpoint:
    config: dict
    step: int
    arrays: Dict[str, np.ndarray]
    version: int = VERSION


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=DIGEST_SIZE).digest()


def encode_checkpoint(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<B", version)]
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<QI", ckpt.step, len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|",) else a.dtype
        if dt not in _DTYPE_CODES:
            raise FormatError(f"array {name!r}: unsupported dtype {a.dtype}")
        a = a.astype(dt, copy=False)
        raw = a.tobytes()
        key = name.encode("utf-8")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<BB", _DTYPE_CODES[dt], a.ndim)]
        parts += [struct.pack(f"<{a.ndim}Q", *a.shape), struct.pack("<Q", len(raw)), raw]
    payload = b"".join(parts)
    return payload + _digest(payload)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 1 + DIGEST_SIZE:
        raise ChecksumError("checkpoint too short to hold a checksum")
    payload, tag = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if _digest(payload) != tag:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted or truncated)")
    if payload[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic tag)")
    version = payload[4]
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    pos = 5
    try:
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        config = json.loads(payload[pos : pos + n].decode("utf-8"))
        pos += n
        step, count = struct.unpack_from("<QI", payload, pos)
        pos += 12
        arrays = {}
        for _ in range(count):
            (kl,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + kl].decode("utf-8")
            pos += kl
            code, ndim = struct.unpack_from("<BB", payload, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", payload, pos)
            pos += 8
            arr = np.frombuffer(payload[pos : pos + nbytes], dtype=_CODE_DTYPES[code]).reshape(shape)
            pos += nbytes
            arrays[name] = arr.copy()
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint body: {exc}") from None
    if pos != len(payload):
        raise FormatError("trailing bytes after the last array")
    return Checkpoint(config, int(step), arrays, version)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    blob = encode_checkpoint(ckpt)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path!r}: {exc}") from None


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path!r}: {exc}") from None
    return decode_checkpoint(blob)


def state_arrays(state) -> Dict[str, np.ndarray]:
    """Every array needed to resume a :class:`~facthash.training.TrainState`."""
    out: Dict[str, np.ndarray] = {}
    for name, t in state.field.state_dict().items():
        out[f"field.{name}"] = t.detach().cpu().numpy()
    out["bitfield.bits"] = state.bitfield.bits.numpy().astype(np.uint8)
    out["bitfield.density_cache"] = state.bitfield.density_cache.numpy()
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        st = state.optimizer.state.get(p)
        if not st:
            continue
        out[f"adam.{i}.exp_avg"] = st["exp_avg"].numpy()
        out[f"adam.{i}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
        out[f"adam.{i}.step"] = np.asarray([float(st["step"])], dtype=np.float64)
    return out


def snapshot(state, config: dict) -> Checkpoint:
    return Checkpoint(config, state.step, state_arrays(state))


def _check(name: str, arrays: Dict[str, np.ndarray], expected) -> np.ndarray:
    if name not in arrays:
        raise FormatError(f"checkpoint lacks array {name!r}")
    arr = arrays[name]
    if tuple(arr.shape) != tuple(expected):
        raise ShapeMismatchError(name, expected, arr.shape)
    return arr


def restore_state(state, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``state`` (built from a compatible config), bit-exactly."""
    own = state.field.state_dict()
    loaded = {}
    for name, t in own.items():
        arr = _check(f"field.{name}", ckpt.arrays, t.shape)
        loaded[name] = torch.from_numpy(arr.copy()).to(t.dtype)
    extra = [k for k in ckpt.arrays if k.startswith("field.") and k[6:] not in own]
    if extra:
        raise FormatError(f"checkpoint has unexpected array {extra[0]!r}")
    state.field.load_state_dict(loaded)
    bf = state.bitfield
    bits = _check("bitfield.bits", ckpt.arrays, tuple(bf.bits.shape))
    cache = _check("bitfield.density_cache", ckpt.arrays, tuple(bf.density_cache.shape))
    bf.bits = torch.from_numpy(bits.astype(bool))
    bf.density_cache = torch.from_numpy(cache.copy()).to(bf.density_cache.dtype)
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    state.optimizer.state.clear()
    for i, p in enumerate(params):
        key = f"adam.{i}.exp_avg"
        if key not in ckpt.arrays:
            continue
        m = _check(key, ckpt.arrays, p.shape)
        v = _check(f"adam.{i}.exp_avg_sq", ckpt.arrays, p.shape)
        step = float(ckpt.arrays[f"adam.{i}.step"][0])
        state.optimizer.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(m.copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(v.copy()).to(p.dtype),
        }
    state.step = ckpt.step
