"""Binary checkpoint: magic, u32 manifest length, JSON manifest, raw f64 blob.

Layout (all integers little-endian)::

    b"MAGECKPT" | u32 len | manifest (UTF-8 JSON, sorted keys) | blob

The manifest lists every tensor as ``{name, shape, dtype, offset, length}``
with offsets relative to the start of the blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MAGECKPT"
DTYPE = "f64le"


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({
                "dtype": DTYPE,
                "length": len(raw),
                "name": name,
                "offset": offset,
                "shape": list(np.shape(arr)),
            })
            chunks.append(raw)
            offset += len(raw)
        manifest = dict(self.meta, tensors=entries)
        mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<I", len(mbytes)) + mbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < 12 or buf[:8] != MAGIC:
            raise CheckpointError("magic: file does not start with MAGECKPT")
        (mlen,) = struct.unpack("<I", buf[8:12])
        if 12 + mlen > len(buf):
            raise CheckpointError(f"manifest_length: {mlen} bytes declared, {len(buf) - 12} available")
        try:
            manifest = json.loads(buf[12:12 + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"manifest: not valid UTF-8 JSON ({exc})") from None
        if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
            raise CheckpointError("manifest.tensors: missing or not a list")
        blob = buf[12 + mlen:]
        tensors: dict[str, np.ndarray] = {}
        spans = []
        for i, e in enumerate(manifest.pop("tensors")):
            try:
                name, shape, dtype = e["name"], e["shape"], e["dtype"]
                offset, length = int(e["offset"]), int(e["length"])
            except (KeyError, TypeError, ValueError):
                raise CheckpointError(f"tensors[{i}]: malformed entry") from None
            if dtype != DTYPE:
                raise CheckpointError(f"tensors[{i}].dtype: expected {DTYPE}, got {dtype!r} ({name})")
            expected = 8 * int(np.prod(shape)) if shape else 8
            if length != expected:
                raise CheckpointError(f"tensors[{i}].length: {length} != 8*prod(shape)={expected} ({name})")
            if offset < 0 or offset + length > len(blob):
                raise CheckpointError(
                    f"tensors[{i}].offset: [{offset}, {offset + length}) outside blob of {len(blob)} bytes ({name})"
                )
            if name in tensors:
                raise CheckpointError(f"tensors[{i}].name: duplicate {name!r}")
            spans.append((offset, offset + length, name))
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=length // 8, offset=offset).reshape(shape).astype(np.float64)
        spans.sort()
        for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise CheckpointError(f"tensors.offset: {n0!r} overlaps {n1!r}")
        covered = sum(e - s for s, e, _ in spans)
        if covered != len(blob):
            raise CheckpointError(f"blob: {len(blob)} bytes present, manifest accounts for {covered}")
        return cls(tensors=tensors, meta=manifest)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> bytes:
    buf = ckpt.to_bytes()
    Path(path).write_bytes(buf)
    return buf


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
