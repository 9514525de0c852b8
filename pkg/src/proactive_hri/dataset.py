"""Episodes as padded per-frame arrays, and window/label assembly for batches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .codebook import ActionCodebook, MultiModalAction
from .errors import DataError
from .model import ClipLabels
from .sim import EpisodeAnnotation, annotations_from_packets, load_manifest, read_episode
from .tokens import ClipWindow, FramePacket, encode_frame


@dataclass
class Episode:
    episode_id: str
    packets: list[FramePacket]
    annotations: list[EpisodeAnnotation]
    source: str = "sim"

    @property
    def num_frames(self) -> int:
        return len(self.packets)


class EpisodeArrays:
    """Top-M encoded frames of one episode, front-padded with N-1 empty frames.

    The window ending at absolute frame ``e`` is rows ``e .. e+N-1`` of the
    padded arrays.
    """

    def __init__(self, episode: Episode, m: int, n: int, feature_dim: int):
        self.episode = episode
        self.m, self.n = m, n
        frames = [encode_frame(p.objects, m, feature_dim, p.frame_idx) for p in episode.packets]
        for i, p in enumerate(episode.packets):
            if p.frame_idx != i:
                raise DataError(f"{episode.episode_id}: frame {i} has frame_idx {p.frame_idx}")
        pad = encode_frame([], m, feature_dim)
        rows = [pad] * (n - 1) + frames
        self.features = np.stack([f.features for f in rows])
        self.pos_bins = np.stack([f.pos_bins for f in rows])
        self.class_ids = np.stack([f.class_ids for f in rows])
        self.track_ids = np.stack([[o.track_id for o in f.objects] for f in rows]).astype(np.int64)
        self.objects = [f.objects for f in rows]
        self.frame_idx = np.array([-1] * (n - 1) + list(range(len(frames))))

    def window(self, end: int) -> ClipWindow:
        sl = slice(end, end + self.n)
        return ClipWindow(self.features[sl], self.pos_bins[sl], self.class_ids[sl], self.objects[sl],
                          [int(i) for i in self.frame_idx[sl]], warmup=end < self.n - 1)


def load_split(manifest_path, split: str, limit: int | None = None) -> list[Episode]:
    manifest, root = load_manifest(manifest_path)
    if split not in manifest["splits"]:
        raise DataError(f"manifest has no split {split!r}")
    entry = manifest["splits"][split]
    source = entry.get("source", "sim")
    episodes = []
    for rel in entry["files"][:limit]:
        path = Path(root) / rel
        try:
            packets = read_episode(path)
        except FileNotFoundError:
            raise DataError(f"episode file missing: {path}") from None
        except (ValueError, KeyError) as exc:
            raise DataError(f"malformed episode file {path}: {exc}") from None
        if not packets:
            raise DataError(f"empty episode file {path}")
        episodes.append(Episode(packets[0].episode_id, packets, annotations_from_packets(packets), source))
    return episodes


def manifest_actions(manifest_path) -> list[MultiModalAction]:
    manifest, _ = load_manifest(manifest_path)
    return [MultiModalAction.from_dict(v) for v in manifest.get("action_table", {}).values()]


@dataclass(frozen=True)
class Clip:
    episode_id: str
    end_frame: int
    positive: bool
    trigger_frame: int = -1
    target_track_ids: tuple[int, ...] = ()
    action: MultiModalAction | None = None
    span_end: int = -1

    @property
    def polarity(self) -> str:
        return "positive" if self.positive else "negative"


def clip_labels(clip: Clip, arrays: EpisodeArrays, codebook: ActionCodebook) -> ClipLabels:
    """Per-frame labels for one clip (batch dimension of 1)."""
    n, m = arrays.n, arrays.m
    y = torch.zeros(1, n)
    h = torch.zeros(1, n, m)
    a = torch.full((1, n), codebook.null_index, dtype=torch.long)
    if clip.positive:
        frames = arrays.frame_idx[clip.end_frame:clip.end_frame + n]
        tracks = arrays.track_ids[clip.end_frame:clip.end_frame + n]
        idx = codebook.index_of(clip.action)
        targets = np.array(clip.target_track_ids)
        for t in range(n):
            if clip.trigger_frame <= frames[t] <= clip.span_end:
                y[0, t] = 1.0
                a[0, t] = idx
                h[0, t] = torch.as_tensor(np.isin(tracks[t], targets), dtype=torch.float32)
    return ClipLabels(y, h, a)


def batch_from_clips(clips: Sequence[Clip], arrays: dict[str, EpisodeArrays], codebook: ActionCodebook | None = None,
                     dtype=torch.float32) -> tuple[dict[str, torch.Tensor], ClipLabels | None]:
    feats, bins, cls = [], [], []
    for c in clips:
        ea = arrays[c.episode_id]
        sl = slice(c.end_frame, c.end_frame + ea.n)
        feats.append(ea.features[sl])
        bins.append(ea.pos_bins[sl])
        cls.append(ea.class_ids[sl])
    batch = {
        "features": torch.as_tensor(np.stack(feats), dtype=dtype),
        "pos_bins": torch.as_tensor(np.stack(bins)),
        "class_ids": torch.as_tensor(np.stack(cls)),
    }
    labels = None
    if codebook is not None:
        labels = ClipLabels.stack([clip_labels(c, arrays[c.episode_id], codebook) for c in clips])
    return batch, labels


def interaction_intervals(episode: Episode, span: int) -> list[tuple[int, int]]:
    return [(a.trigger_frame_idx, a.trigger_frame_idx + span) for a in episode.annotations]


def make_clips(episodes: Sequence[Episode], n: int, span: int, stride: int = 5, jitter: int = 0,
               rng: np.random.Generator | None = None, negatives: bool = True) -> list[Clip]:
    """One positive clip per annotation plus strided negative clips.

    A positive window ends ``jitter`` frames (drawn from 0..jitter) after the
    trigger frame. Negative windows end every ``stride`` frames and must not
    overlap any annotation's interaction span ``[trigger, trigger + span]``.
    """
    if stride < 1:
        raise DataError("stride must be >= 1")
    clips: list[Clip] = []
    for ep in episodes:
        last = ep.num_frames - 1
        for ann in ep.annotations:
            tf = ann.trigger_frame_idx
            if not 0 <= tf <= last:
                raise DataError(f"{ep.episode_id}: annotation at frame {tf} outside 0..{last}")
            present = {o.track_id for o in ep.packets[tf].objects}
            missing = set(ann.target_track_ids) - present
            if missing:
                raise DataError(f"{ep.episode_id}: targets {sorted(missing)} absent from frame {tf}")
            shift = int(rng.integers(0, jitter + 1)) if (jitter and rng is not None) else 0
            clips.append(Clip(ep.episode_id, min(tf + shift, last), True, tf, tuple(ann.target_track_ids),
                              ann.action(), tf + span))
        if not negatives:
            continue
        spans = interaction_intervals(ep, span)
        for end in range(0, ep.num_frames, stride):
            begin = end - n + 1
            if all(end < lo or begin > hi for lo, hi in spans):
                clips.append(Clip(ep.episode_id, end, False))
    return clips
