"""Binary checkpoint format.

Layout: magic "RDCK", u32 format version, u64 manifest length, JSON
manifest (tensor name -> shape/dtype/offset, plus free-form metadata),
then raw little-endian float32 payloads.  Offsets are relative to the end
of the manifest.  Loading a saved file reproduces the arrays bit for bit;
the encoder fingerprint pins the frozen encoder across fine-tuning.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"RDCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def encoder_fingerprint(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over the encoder tensors (names and little-endian f32 bytes)."""
    h = hashlib.sha256()
    for name in sorted(n for n in arrays if n.startswith("enc.")):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()


def _as_arrays(params: dict[str, Tensor] | dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {n: (p.data if isinstance(p, Tensor) else p) for n, p in params.items()}


def save_checkpoint(path: Path, params: dict, meta: dict | None = None) -> None:
    arrays = _as_arrays(params)
    manifest: dict = {"tensors": {}, "meta": dict(meta or {})}
    manifest["meta"].setdefault("encoder_fingerprint", encoder_fingerprint(arrays))
    offset = 0
    payloads = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest["tensors"][name] = {"shape": list(arr.shape), "dtype": "f4", "offset": offset}
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, manifest_len = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version}")
    manifest = json.loads(raw[16:16 + manifest_len])
    payload = raw[16 + manifest_len:]
    arrays: dict[str, np.ndarray] = {}
    spans = []
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if start < 0 or end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} payload out of bounds")
        spans.append((start, end, name))
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"{path}: overlapping payloads for {n0} and {n1}")
    return arrays, manifest["meta"]


def params_from_arrays(arrays: dict[str, np.ndarray],
                       trainable: bool = False) -> dict[str, Tensor]:
    from .tensor import parameter

    out: dict[str, Tensor] = {}
    for name, arr in arrays.items():
        if name.startswith("opt."):
            continue
        if trainable and not name.startswith("enc."):
            out[name] = parameter(arr)
        else:
            out[name] = Tensor(arr.astype(np.float32))
    return out
