"""Versioned model container.

Layout: 8 magic bytes, a little-endian uint64 header length, a UTF-8 JSON
header, then one little-endian float64 blob holding, in order, the parameter
vector, input mean, input std, target mean, target std, auxiliary-input
mean and auxiliary-input std. The header lists the length of every section.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import MalformedStreamError, SpecError
from .data import WindowEncoding
from .network import NetworkSpec, param_count

MAGIC = b"PDRNNCK1"
FORMAT_VERSION = 1
_SECTIONS = ("theta", "x_mean", "x_std", "y_mean", "y_std", "aux_mean", "aux_std")


@dataclass(frozen=True)
class ModelCheckpoint:
    spec: NetworkSpec
    encoding: WindowEncoding
    theta: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    aux_mean: np.ndarray | None = None
    aux_std: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for name in _SECTIONS:
            value = getattr(self, name)
            value = np.zeros(0) if value is None else value
            object.__setattr__(self, name, np.asarray(value, dtype=np.float64).ravel())
        if self.theta.size != param_count(self.spec):
            raise SpecError(f"checkpoint holds {self.theta.size} weights, network needs {param_count(self.spec)}")
        if self.x_mean.size != self.spec.input_dim or self.x_std.size != self.spec.input_dim:
            raise SpecError("input normalisation does not match input_dim")
        if self.y_mean.size != self.spec.output_dim or self.y_std.size != self.spec.output_dim:
            raise SpecError("target normalisation does not match output_dim")
        if self.aux_mean.size != self.spec.aux_dim or self.aux_std.size != self.spec.aux_dim:
            raise SpecError("auxiliary normalisation does not match aux_dim")
        if self.encoding.aux_dim != self.spec.aux_dim:
            raise SpecError("window encoding and network disagree on aux_dim")
        if self.encoding.input_dim != self.spec.input_dim:
            raise SpecError("window encoding and network disagree on input_dim")

    def to_bytes(self):
        header = {
            "format_version": self.format_version,
            "network": self.spec.to_dict(),
            "encoding": self.encoding.to_dict(),
            "sections": {name: int(getattr(self, name).size) for name in _SECTIONS},
            "metadata": self.metadata,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        blob = b"".join(getattr(self, name).astype("<f8").tobytes() for name in _SECTIONS)
        return MAGIC + struct.pack("<Q", len(head)) + head + blob

    @classmethod
    def from_bytes(cls, data: bytes):
        if data[:8] != MAGIC:
            raise MalformedStreamError("not a model checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + n].decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise MalformedStreamError(f"unsupported checkpoint version {header.get('format_version')}")
        blob = np.frombuffer(data[16 + n:], dtype="<f8")
        sizes = header["sections"]
        if blob.size != sum(sizes[s] for s in _SECTIONS):
            raise MalformedStreamError("checkpoint weight blob is truncated or oversized")
        arrays, pos = {}, 0
        for name in _SECTIONS:
            arrays[name] = blob[pos:pos + sizes[name]].astype(np.float64)
            pos += sizes[name]
        return cls(
            NetworkSpec.from_dict(header["network"]),
            WindowEncoding.from_dict(header["encoding"]),
            metadata=header.get("metadata", {}),
            **arrays,
        )

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_checkpoint(ckpt: ModelCheckpoint, path):
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path):
    return ModelCheckpoint.from_bytes(Path(path).read_bytes())
