"""Versioned binary containers for checkpoints and embedding matrices.

Layout (all integers little-endian)::

    magic (8 bytes) | u32 format version | u32 header length | header JSON (UTF-8)
    | array payloads, float32 little-endian, in header order

The header JSON is written with sorted keys and compact separators so that
load -> save reproduces the original bytes exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

CKPT_MAGIC = b"GLGTCKPT"
EMB_MAGIC = b"GLGTEMBD"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_container(path, magic: bytes, header: dict, arrays: list[np.ndarray]) -> None:
    blob = _dump_header(header)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_F32).tobytes())
    tmp.replace(path)


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise CheckpointError(f"{path}: not a {magic.decode()} file")
    try:
        version, hlen = struct.unpack_from("<II", raw, len(magic))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(magic) + 8
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    return header, raw[start + hlen :]


@dataclass
class Checkpoint:
    """Header metadata plus named float32 arrays (parameters, optimizer moments)."""

    preset: str
    config_digest: str
    iteration: int
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "preset": self.preset,
            "config_digest": self.config_digest,
            "iteration": self.iteration,
            "meta": self.meta,
            "arrays": [{"name": k, "shape": list(v.shape)} for k, v in self.arrays.items()],
        }

    def save(self, path) -> None:
        write_container(path, CKPT_MAGIC, self.header(), list(self.arrays.values()))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, payload = read_container(path, CKPT_MAGIC)
        arrays, offset = {}, 0
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
            if offset + n > len(payload):
                raise CheckpointError(f"{path}: payload truncated at array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(payload, dtype=_F32, count=n // 4, offset=offset).reshape(shape).copy()
            offset += n
        if offset != len(payload):
            raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
        return cls(header["preset"], header["config_digest"], int(header["iteration"]), arrays, header.get("meta", {}))


def save_embeddings(path, features: np.ndarray, preset: str, channels: int, strips: int, rows: list[dict]) -> None:
    """Write the binary embedding matrix plus a ``<path>.json`` metadata sidecar."""
    features = np.asarray(features)
    if features.ndim != 2 or (features.size and features.shape[1] != channels * strips):
        raise CheckpointError(f"embedding matrix {features.shape} does not match {strips} strips x {channels}")
    header = {"preset": preset, "c4": channels, "h2": strips, "count": int(features.shape[0])}
    write_container(path, EMB_MAGIC, header, [features])
    Path(str(path) + ".json").write_text(json.dumps({"rows": rows}, indent=1, sort_keys=True) + "\n")


def load_embeddings(path) -> tuple[dict, np.ndarray, list[dict]]:
    header, payload = read_container(path, EMB_MAGIC)
    dim = header["c4"] * header["h2"]
    feats = np.frombuffer(payload, dtype=_F32).reshape(header["count"], dim).copy()
    sidecar = Path(str(path) + ".json")
    rows = json.loads(sidecar.read_text())["rows"] if sidecar.exists() else []
    if rows and len(rows) != header["count"]:
        raise CheckpointError(f"{sidecar}: {len(rows)} metadata rows for {header['count']} embeddings")
    return header, feats, rows
