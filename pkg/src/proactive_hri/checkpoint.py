"""Self-describing binary checkpoint.

Layout (all integers little-endian)::

    magic        8 bytes   b"PHRICKPT"
    version      u32
    meta_len     u64
    meta         meta_len bytes of UTF-8 JSON
    tensors      float32 little-endian data, in the order of meta["tensors"]
    checksum     32 bytes  SHA-256 of everything above

``meta`` holds the model config, codebook, embedder id/dimension, calibrated
thresholds, training metadata, and a tensor index of names and shapes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codebook import ActionCodebook, CodebookInputs, make_embedder
from .errors import CheckpointError
from .model import DecisionModel, ModelConfig
from .sim import atomic_write

MAGIC = b"PHRICKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    codebook: ActionCodebook
    embedder: dict = field(default_factory=lambda: {"name": "hashed-bow-fnv1a", "dim": 64})
    thresholds: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_model(cls, model: DecisionModel, codebook: ActionCodebook, thresholds=None, metadata=None) -> "Checkpoint":
        params = {k: v.detach().to(torch.float32).cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, params, codebook,
                   {"name": model.cfg.embedder, "dim": model.cfg.utterance_dim},
                   dict(thresholds or {}), dict(metadata or {}))

    def build_model(self, dtype=torch.float32) -> DecisionModel:
        model = DecisionModel(self.model_config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint tensors do not fit the stored config: {exc}") from None
        return model.to(dtype).eval()

    def codebook_inputs(self, dtype=torch.float32) -> CodebookInputs:
        embedder = make_embedder(self.embedder["name"], int(self.embedder["dim"]))
        return CodebookInputs.build(self.codebook, embedder, dtype)

    @property
    def calibrated(self) -> bool:
        return "trigger" in self.thresholds

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "codebook": ckpt.codebook.to_dict(),
        "embedder": ckpt.embedder,
        "thresholds": ckpt.thresholds,
        "metadata": ckpt.metadata,
        "tensors": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(_HEADER.pack(MAGIC, ckpt.version, len(meta_bytes)))
    body += meta_bytes
    for n in names:
        body += np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes()
    body += hashlib.sha256(body).digest()
    return bytes(body)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size + _DIGEST:
        raise CheckpointError("checkpoint is truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    magic, version, meta_len = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    offset = _HEADER.size
    meta = json.loads(body[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    params = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(body):
            raise CheckpointError(f"tensor {entry['name']!r} runs past the end of the file")
        params[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        offset = end
    if offset != len(body):
        raise CheckpointError("trailing bytes after tensor data")
    return Checkpoint(ModelConfig.from_dict(meta["model_config"]), params,
                      ActionCodebook.from_dict(meta["codebook"]), meta["embedder"],
                      meta.get("thresholds", {}), meta.get("metadata", {}), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(Path(path), to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(data)
