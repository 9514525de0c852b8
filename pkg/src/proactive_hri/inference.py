"""Streaming decision layer: windowing, mode-specific firing, targets, commands."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .codebook import ActionCodebook, MultiModalAction
from .errors import ConfigError, InputError, SamplingError
from .evaluation import InferenceMode
from .model import DecisionModel
from .tokens import DetectedObject, FramePacket, FrameRingBuffer, stack_windows

log = logging.getLogger(__name__)

DEFAULT_TARGET_THRESHOLD = 0.5


@dataclass
class InitiationCommand:
    action: MultiModalAction
    target_track_ids: list[int]
    centroid: tuple[float, float]
    frame_idx: int
    trigger_score: float
    action_probability: float
    episode_id: str = ""
    action_index: int = -1

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "frame_idx": self.frame_idx,
            "action": self.action.to_dict(),
            "action_index": self.action_index,
            "target_track_ids": list(self.target_track_ids),
            "centroid": [self.centroid[0], self.centroid[1]],
            "trigger_score": self.trigger_score,
            "action_probability": self.action_probability,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _inverse_cdf(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # guard against rounding at the top end: fall back to the last index with mass
    if idx >= len(probs) or probs[idx] <= 0:
        idx = int(np.flatnonzero(probs > 0)[-1])
    return idx


def sample_action(probs, exclude_null: bool, rng: np.random.Generator | None = None,
                  null_index: int | None = None, u: float | None = None) -> int:
    """Draw an index proportionally to ``probs`` (NULL is the last entry by default).

    Exactly one uniform is consumed from ``rng`` unless ``u`` is given.
    """
    p = np.asarray(probs, dtype=np.float64).copy()
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise SamplingError("action distribution must be a non-empty, non-negative vector")
    null_index = p.size - 1 if null_index is None else null_index
    if u is None:
        if rng is None:
            raise SamplingError("need an rng or a uniform draw")
        u = float(rng.random())
    if exclude_null:
        p[null_index] = 0.0
    if p.sum() <= 0:
        raise SamplingError("no probability mass left to sample from")
    return _inverse_cdf(p, u)


def argmax_action(probs, exclude_null: bool, null_index: int | None = None) -> int:
    p = np.asarray(probs, dtype=np.float64).copy()
    null_index = p.size - 1 if null_index is None else null_index
    if exclude_null:
        if p.size == 1:
            raise SamplingError("only the NULL action is available")
        p[null_index] = -np.inf
    return int(np.argmax(p))


def filter_targets(objects: Sequence[DetectedObject], scores: Sequence[float],
                   threshold: float) -> list[DetectedObject]:
    """Person tokens scoring at or above ``threshold``, in input order."""
    if len(objects) != len(scores):
        raise InputError(f"{len(objects)} tokens but {len(scores)} target scores")
    return [o for o, s in zip(objects, scores) if o.is_person and float(s) >= threshold]


def compute_centroid(targets: Sequence[DetectedObject]) -> tuple[float, float]:
    if not targets:
        raise InputError("centroid of an empty target list")
    xs = [t.center[0] for t in targets]
    ys = [t.center[1] for t in targets]
    return sum(xs) / len(xs), sum(ys) / len(ys)


@dataclass
class EngineConfig:
    mode: InferenceMode = InferenceMode.TRIGGER_ACTOR
    deterministic: bool = False
    refractory: int = 6  # frames; 3 s at 2 fps
    suppress_warmup: bool = False
    seed: int = 0

    def __post_init__(self):
        self.mode = InferenceMode.parse(self.mode)
        if self.refractory < 0:
            raise ConfigError("refractory must be >= 0")


@dataclass
class EngineState:
    buffer: FrameRingBuffer
    rng: np.random.Generator
    refractory_until: int = -1


@dataclass
class StepTrace:
    """Everything the engine decided on one frame (kept for auditing)."""

    episode_id: str
    frame_idx: int
    trigger_score: float
    trigger_ok: bool
    action_any: int  # drawn over K+1
    action_real: int  # drawn over the K real actions with the same uniform
    fired: bool
    suppressed: str = ""
    command: InitiationCommand | None = None


class InferenceEngine:
    """Per-stream decision loop over a frozen model.

    Each episode id gets its own ring buffer, rng and refractory counter.
    """

    def __init__(self, model: DecisionModel, phi: torch.Tensor, codebook: ActionCodebook,
                 thresholds: dict, cfg: EngineConfig | None = None):
        if thresholds is None or "trigger" not in thresholds:
            raise ConfigError("engine needs a calibrated trigger threshold")
        self.model = model.eval()
        self.phi = phi.detach()
        self.codebook = codebook
        self.h_trigger = float(thresholds["trigger"])
        self.h_target = float(thresholds.get("target", DEFAULT_TARGET_THRESHOLD))
        self.cfg = cfg or EngineConfig()
        self.states: dict[str, EngineState] = {}
        self.trace: list[StepTrace] = []
        self.keep_trace = False

    @classmethod
    def from_checkpoint(cls, ckpt, cfg: EngineConfig | None = None) -> "InferenceEngine":
        if not ckpt.calibrated:
            raise ConfigError("checkpoint has no calibrated thresholds; run calibration first")
        model = ckpt.build_model()
        with torch.no_grad():
            phi = model.phi(ckpt.codebook_inputs())
        return cls(model, phi, ckpt.codebook, ckpt.thresholds, cfg)

    @property
    def mode(self) -> InferenceMode:
        return self.cfg.mode

    def state_for(self, episode_id: str) -> EngineState:
        st = self.states.get(episode_id)
        if st is None:
            mc = self.model.cfg
            seed = np.random.SeedSequence([self.cfg.seed, *episode_id.encode("utf-8")])
            st = EngineState(FrameRingBuffer(mc.n, mc.m, mc.feature_dim), np.random.default_rng(seed))
            self.states[episode_id] = st
        return st

    def _choose(self, probs: np.ndarray, u: float) -> tuple[int, int]:
        null = self.codebook.null_index
        if self.cfg.deterministic:
            return argmax_action(probs, False, null), argmax_action(probs, True, null)
        any_ = sample_action(probs, False, null_index=null, u=u)
        try:
            real = sample_action(probs, True, null_index=null, u=u)
        except SamplingError:
            real = -1
        return any_, real

    @torch.no_grad()
    def step(self, packet: FramePacket) -> InitiationCommand | None:
        st = self.state_for(packet.episode_id)
        st.buffer.push(packet)
        window = st.buffer.window()
        batch = stack_windows([window], self.phi.dtype)
        out = self.model(batch["features"], batch["pos_bins"], batch["class_ids"], self.phi).last()
        score = float(out.trigger[0])
        probs = out.action_dist[0].double().numpy()
        # one uniform per frame in every mode keeps sampled streams aligned across modes
        u = float(st.rng.random())
        a_any, a_real = self._choose(probs, u)
        null = self.codebook.null_index
        trigger_ok = score >= self.h_trigger

        mode = self.cfg.mode
        if mode is InferenceMode.TRIGGER_ONLY:
            fired, chosen = trigger_ok and a_real >= 0, a_real
        elif mode is InferenceMode.ACTOR_ONLY:
            fired, chosen = a_any != null, a_any
        else:
            fired, chosen = trigger_ok and a_any != null, a_any

        trace = StepTrace(packet.episode_id, packet.frame_idx, score, trigger_ok, a_any, a_real, fired)
        cmd = None
        if fired:
            if packet.frame_idx < st.refractory_until:
                trace.suppressed = "refractory"
            elif self.cfg.suppress_warmup and window.warmup:
                trace.suppressed = "warmup"
            else:
                objects = window.objects[-1]
                targets = filter_targets(objects, out.target[0].tolist(), self.h_target)
                if not targets:
                    trace.suppressed = "no-target"
                    log.info("trigger without valid target: episode=%s frame=%d score=%.3f",
                             packet.episode_id, packet.frame_idx, score)
                else:
                    cmd = InitiationCommand(self.codebook.action(chosen), [t.track_id for t in targets],
                                            compute_centroid(targets), packet.frame_idx, score,
                                            float(probs[chosen]), packet.episode_id, chosen)
                    st.refractory_until = packet.frame_idx + self.cfg.refractory
        trace.command = cmd
        if self.keep_trace:
            self.trace.append(trace)
        return cmd

    def run(self, packets: Iterable[FramePacket]) -> Iterator[InitiationCommand]:
        for p in packets:
            cmd = self.step(p)
            if cmd is not None:
                yield cmd
