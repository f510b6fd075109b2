"""Versioned binary parameter checkpoints.

Layout: one JSON header line after a magic line (version, precision, step,
phase, architecture hash, model config, payload digest), a blank line, then
little-endian binary records: [u16 name length][name][u8 ndim][i64 dims...]
[raw values]. Optimizer moment buffers ride along as `adam.m.*` / `adam.v.*`
records. The payload digest makes truncation or corruption a load error, so
no partial state can escape.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = "#NERF2OCC-CHECKPOINT"
VERSION = 1


def arch_hash_for(model_config: dict, shapes: dict) -> str:
    desc = {"config": model_config,
            "params": {k: list(v) for k, v in sorted(shapes.items())}}
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CheckpointData:
    params: dict
    moments: dict = field(default_factory=dict)   # name -> (m, v)
    step: int = 0
    phase: str = ""
    precision: str = "float32"
    arch_hash: str = ""
    model_config: dict = field(default_factory=dict)


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}q", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


def _unpack_records(buf: bytes, dtype) -> dict:
    out = {}
    pos = 0
    itemsize = np.dtype(dtype).itemsize
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", buf, pos) if ndim else ()
        pos += 8 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype=np.dtype(dtype).newbyteorder("<"),
                            count=count, offset=pos).reshape(shape)
        pos += count * itemsize
        out[name] = arr.astype(dtype)
    return out


def save_checkpoint(path: str, data: CheckpointData) -> None:
    payload = b""
    for name in sorted(data.params):
        payload += _pack_record(name, data.params[name])
    for name in sorted(data.moments):
        m, v = data.moments[name]
        payload += _pack_record(f"adam.m.{name}", m)
        payload += _pack_record(f"adam.v.{name}", v)
    header = {
        "version": VERSION,
        "precision": data.precision,
        "step": data.step,
        "phase": data.phase,
        "arch": data.arch_hash,
        "model_config": data.model_config,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as f:
        f.write(f"{MAGIC} v{VERSION}\n".encode())
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n\n")
        f.write(payload)


def load_checkpoint(path: str, expected_arch: str | None = None) -> CheckpointData:
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8", errors="replace").strip()
        if not magic.startswith(MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        version = int(magic.rsplit("v", 1)[-1])
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        header = json.loads(f.readline())
        f.readline()
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ValueError(f"{path}: checkpoint payload is corrupt (digest mismatch)")
    if expected_arch is not None and header["arch"] != expected_arch:
        raise ValueError(f"{path}: architecture mismatch: checkpoint {header['arch']}, "
                         f"expected {expected_arch}")
    dtype = np.float32 if header["precision"] == "float32" else np.float64
    records = _unpack_records(payload, dtype)
    params, moments_m, moments_v = {}, {}, {}
    for name, arr in records.items():
        if name.startswith("adam.m."):
            moments_m[name[7:]] = arr
        elif name.startswith("adam.v."):
            moments_v[name[7:]] = arr
        else:
            params[name] = arr
    moments = {k: (moments_m[k], moments_v[k]) for k in moments_m if k in moments_v}
    return CheckpointData(params=params, moments=moments, step=header["step"],
                          phase=header["phase"], precision=header["precision"],
                          arch_hash=header["arch"], model_config=header["model_config"])
