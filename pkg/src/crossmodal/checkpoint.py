"""Binary checkpoint container.

Layout: a format version byte, an 8-byte big-endian header length, a UTF-8
JSON header (config fingerprint, counters, tensor directory), the raw tensor
payload in directory order, and a trailing SHA-256 over everything before it.
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1",
           "bool": "|b1"}


class CheckpointError(Exception):
    pass


def config_fingerprint(config: dict) -> str:
    """Stable hex digest of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict, meta: dict):
    """Write named arrays plus metadata; meta must include 'fingerprint'."""
    if "fingerprint" not in meta:
        raise CheckpointError("meta must carry a config fingerprint")
    directory = []
    payload = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dt} for tensor {name}")
        buf = arr.astype(_DTYPES[dt]).tobytes()
        directory.append({"name": name, "shape": list(arr.shape),
                          "dtype": dt, "nbytes": len(buf)})
        payload.append(buf)
    header = dict(meta)
    header["tensors"] = directory
    hdr = json.dumps(header, sort_keys=True).encode()
    body = bytes([FORMAT_VERSION]) + struct.pack(">Q", len(hdr)) + hdr + b"".join(payload)
    digest = hashlib.sha256(body).digest()

    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(body)
            f.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_fingerprint: str | None = None):
    """Read a checkpoint; returns (tensors, meta). Verifies checksum and,
    when given, the config fingerprint."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 41:
        raise CheckpointError("truncated checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    if body[0] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {body[0]}")
    (hlen,) = struct.unpack(">Q", body[1:9])
    header = json.loads(body[9:9 + hlen].decode())
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint {header['fingerprint']} "
            f"vs expected {expected_fingerprint}")
    tensors = {}
    off = 9 + hlen
    for spec in header.pop("tensors"):
        n = spec["nbytes"]
        arr = np.frombuffer(body[off:off + n], dtype=_DTYPES[spec["dtype"]])
        tensors[spec["name"]] = arr.reshape(spec["shape"]).astype(spec["dtype"])
        off += n
    if off != len(body):
        raise CheckpointError("payload length mismatch")
    return tensors, header
