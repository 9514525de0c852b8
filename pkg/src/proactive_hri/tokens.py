"""Per-frame detections to the fixed M x N visual-token grid.

Each frame keeps its top-M objects (persons first, then larger boxes), padded
with empty objects. A visual token is the object feature concatenated with a
learned position embedding (sum of four quantized-bbox embeddings) and a
learned class embedding.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import InputError, StreamError

CLASS_NAMES = ("person", "backpack", "handbag", "suitcase", "tie", "cell_phone")
PERSON = 0
PADDING = len(CLASS_NAMES)
NUM_CLASSES = len(CLASS_NAMES) + 1
POSITION_BINS = 16


def class_index(value) -> int:
    """Accept either an integer id or a class name."""
    if isinstance(value, str):
        if value == "padding":
            return PADDING
        try:
            return CLASS_NAMES.index(value)
        except ValueError:
            raise InputError(f"unknown class {value!r}") from None
    idx = int(value)
    if not 0 <= idx <= PADDING:
        raise InputError(f"unknown class id {value!r}")
    return idx


@dataclass
class DetectedObject:
    track_id: int
    class_id: int
    bbox: tuple[float, float, float, float]
    feature: np.ndarray

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]

    @property
    def center(self) -> tuple[float, float]:
        return self.bbox[0], self.bbox[1]

    @property
    def is_padding(self) -> bool:
        return self.class_id == PADDING

    @property
    def is_person(self) -> bool:
        return self.class_id == PERSON

    def validate(self, feature_dim: int | None = None) -> None:
        if any(not 0.0 <= v <= 1.0 for v in self.bbox):
            raise InputError(f"track {self.track_id}: bbox {self.bbox} outside [0, 1]")
        if not self.is_padding and (self.bbox[2] <= 0 or self.bbox[3] <= 0):
            raise InputError(f"track {self.track_id}: empty bbox for a real object")
        if feature_dim is not None and len(self.feature) != feature_dim:
            raise InputError(f"track {self.track_id}: feature length {len(self.feature)} != {feature_dim}")


def padding_object(feature_dim: int) -> DetectedObject:
    return DetectedObject(-1, PADDING, (0.0, 0.0, 0.0, 0.0), np.zeros(feature_dim, dtype=np.float32))


@dataclass
class FramePacket:
    episode_id: str
    frame_idx: int
    timestamp_ms: int
    objects: list[DetectedObject]
    annotation: dict | None = None

    def validate(self, feature_dim: int | None = None) -> None:
        seen = set()
        for obj in self.objects:
            if obj.track_id in seen:
                raise InputError(f"frame {self.frame_idx}: duplicate track id {obj.track_id}")
            seen.add(obj.track_id)
            obj.validate(feature_dim)


def select_top_m(objects: Sequence[DetectedObject], m: int, feature_dim: int | None = None) -> list[DetectedObject]:
    """Exactly ``m`` objects: persons first, larger boxes first, then lower track id."""
    if m < 1:
        raise ValueError("m must be >= 1")
    ranked = sorted(objects, key=lambda o: (0 if o.is_person else 1, -o.area, o.track_id))[:m]
    if len(ranked) < m:
        if feature_dim is None:
            feature_dim = len(objects[0].feature) if objects else 0
        ranked.extend(padding_object(feature_dim) for _ in range(m - len(ranked)))
    return ranked


def quantize_position(bbox, bins: int = POSITION_BINS) -> tuple[int, int, int, int]:
    if len(bbox) != 4:
        raise InputError(f"bbox needs 4 components, got {len(bbox)}")
    out = []
    for v in bbox:
        v = float(v)
        if not 0.0 <= v <= 1.0 or math.isnan(v):
            raise InputError(f"bbox component {v} outside [0, 1]")
        out.append(min(max(int(math.floor(v * bins)), 0), bins - 1))
    return tuple(out)


class TokenEmbedder(nn.Module):
    """Learned position and class embeddings appended to object features."""

    def __init__(self, feature_dim: int, pos_dim: int = 16, class_dim: int = 8, bins: int = POSITION_BINS):
        super().__init__()
        self.feature_dim = feature_dim
        self.pos_dim = pos_dim
        self.class_dim = class_dim
        self.bins = bins
        # one table per bbox coordinate, stored as a single (4*bins, P) lookup
        self.position = nn.Embedding(4 * bins, pos_dim)
        self.cls = nn.Embedding(NUM_CLASSES, class_dim)
        nn.init.normal_(self.position.weight, std=0.5)
        nn.init.normal_(self.cls.weight, std=0.5)
        self.register_buffer("_coord_offset", torch.arange(4) * bins, persistent=False)

    @property
    def token_dim(self) -> int:
        return self.feature_dim + self.pos_dim + self.class_dim

    def forward(self, features: torch.Tensor, pos_bins: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise InputError(f"feature width {features.shape[-1]} != {self.feature_dim}")
        if bool((class_ids < 0).any()) or bool((class_ids >= NUM_CLASSES).any()):
            raise InputError("class id out of range")
        pos = self.position(pos_bins + self._coord_offset).sum(dim=-2)
        return torch.cat([features, pos, self.cls(class_ids)], dim=-1)


@dataclass
class VisualToken:
    e: torch.Tensor
    source: DetectedObject
    frame_offset: int


def assemble_token(obj: DetectedObject, embedder: TokenEmbedder, frame_offset: int = 1) -> VisualToken:
    cls = class_index(obj.class_id)
    feature = torch.as_tensor(np.asarray(obj.feature), dtype=embedder.position.weight.dtype)
    bins = torch.tensor(quantize_position(obj.bbox, embedder.bins))
    e = embedder(feature, bins, torch.tensor(cls))
    return VisualToken(e, obj, frame_offset)


@dataclass
class EncodedFrame:
    """Top-M objects of one frame as arrays ready for batching."""

    frame_idx: int
    objects: list[DetectedObject]
    features: np.ndarray  # (M, F) float32
    pos_bins: np.ndarray  # (M, 4) int64
    class_ids: np.ndarray  # (M,) int64

    @property
    def pad_mask(self) -> np.ndarray:
        return self.class_ids == PADDING


def encode_frame(objects: Sequence[DetectedObject], m: int, feature_dim: int, frame_idx: int = -1) -> EncodedFrame:
    chosen = select_top_m(objects, m, feature_dim)
    feats = np.zeros((m, feature_dim), dtype=np.float32)
    bins = np.zeros((m, 4), dtype=np.int64)
    cls = np.full(m, PADDING, dtype=np.int64)
    for j, obj in enumerate(chosen):
        if obj.is_padding:
            continue
        feats[j] = obj.feature
        bins[j] = quantize_position(obj.bbox)
        cls[j] = class_index(obj.class_id)
    return EncodedFrame(frame_idx, chosen, feats, bins, cls)


def empty_frame(m: int, feature_dim: int) -> EncodedFrame:
    return encode_frame([], m, feature_dim)


@dataclass
class ClipWindow:
    """M x N token grid, oldest frame first.

    Array fields are indexed ``[frame, slot]``; ``frame_ids`` are the relative
    indices 1..N used for the frame embedding lookup.
    """

    features: np.ndarray  # (N, M, F)
    pos_bins: np.ndarray  # (N, M, 4)
    class_ids: np.ndarray  # (N, M)
    objects: list[list[DetectedObject]]
    frame_idx: list[int]  # absolute frame index per row, -1 for warm-up padding
    warmup: bool = False
    frame_ids: np.ndarray = field(init=False)

    def __post_init__(self):
        self.frame_ids = np.arange(1, self.features.shape[0] + 1)

    @property
    def pad_mask(self) -> np.ndarray:
        return self.class_ids == PADDING

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_frames(cls, frames: Sequence[EncodedFrame], n: int, m: int, feature_dim: int) -> "ClipWindow":
        frames = list(frames)[-n:]
        missing = n - len(frames)
        frames = [empty_frame(m, feature_dim) for _ in range(missing)] + frames
        return cls(
            features=np.stack([f.features for f in frames]),
            pos_bins=np.stack([f.pos_bins for f in frames]),
            class_ids=np.stack([f.class_ids for f in frames]),
            objects=[f.objects for f in frames],
            frame_idx=[f.frame_idx for f in frames],
            warmup=missing > 0,
        )


class FrameRingBuffer:
    """Latest ``n`` encoded frames of one stream."""

    def __init__(self, n: int, m: int, feature_dim: int):
        self.n, self.m, self.feature_dim = n, m, feature_dim
        self.frames: deque[EncodedFrame] = deque(maxlen=n)
        self.episode_id: str | None = None
        self.last_idx: int | None = None

    def push(self, packet: FramePacket) -> None:
        if self.episode_id is not None and packet.episode_id != self.episode_id:
            raise StreamError(f"buffer for episode {self.episode_id!r} got packet from {packet.episode_id!r}")
        if self.last_idx is not None and packet.frame_idx <= self.last_idx:
            raise StreamError(f"frame {packet.frame_idx} arrived after frame {self.last_idx}")
        self.episode_id = packet.episode_id
        self.last_idx = packet.frame_idx
        self.frames.append(encode_frame(packet.objects, self.m, self.feature_dim, packet.frame_idx))

    def window(self) -> ClipWindow:
        return ClipWindow.from_frames(self.frames, self.n, self.m, self.feature_dim)


def push_and_window(buffer: FrameRingBuffer, packet: FramePacket, m: int | None = None, n: int | None = None) -> ClipWindow:
    if (m is not None and m != buffer.m) or (n is not None and n != buffer.n):
        raise InputError(f"buffer holds M={buffer.m}, N={buffer.n}; asked for M={m}, N={n}")
    buffer.push(packet)
    return buffer.window()


def stack_windows(windows: Sequence[ClipWindow], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Batch ClipWindows into tensors keyed like the model's forward inputs."""
    return {
        "features": torch.as_tensor(np.stack([w.features for w in windows]), dtype=dtype),
        "pos_bins": torch.as_tensor(np.stack([w.pos_bins for w in windows])),
        "class_ids": torch.as_tensor(np.stack([w.class_ids for w in windows])),
    }
