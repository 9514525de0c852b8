"""Supervised training on labelled clips, threshold calibration, run metadata."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .codebook import ActionCodebook, CodebookInputs, build_codebook, make_embedder
from .dataset import Clip, Episode, EpisodeArrays, batch_from_clips, clip_labels, load_split, make_clips, \
    manifest_actions
from .errors import CalibrationError, ConfigError, DataError, MetricError, TrainingError
from .evaluation import score_clips, sweep
from .model import ClipLabels, DecisionModel, ModelConfig, compute_loss, set_seed
from .numerics import ParamStore
from .sim import load_manifest

__all__ = [
    "TrainConfig", "TrainResult", "Calibration", "make_clips", "init_model", "train",
    "calibrate_thresholds", "history_to_csv", "run_training",
]

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["step", "lr", "total", "trigger", "action", "target", "val_f1"]


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 1200
    lr: float = 1e-3
    warmup: int = 50
    min_lr_ratio: float = 0.05
    pos_fraction: float = 0.25  # 1 positive : 3 negatives
    seed: int = 0
    eval_every: int = 0
    neg_stride: int = 5
    jitter: int = 0
    grad_clip: float = 1.0
    final_frame_only: bool = False
    null_weight: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 < self.pos_fraction <= 1.0:
            raise ConfigError("pos_fraction must lie in (0, 1]")
        if self.lr < 0 or self.neg_stride < 1 or self.jitter < 0:
            raise ConfigError("lr, neg_stride and jitter must be non-negative (stride >= 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def lr_at(self, step: int) -> float:
        """Linear warm-up, then cosine decay to ``min_lr_ratio * lr``."""
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.steps - self.warmup, 1)
        progress = min(max(step - self.warmup, 0) / span, 1.0)
        floor = self.min_lr_ratio * self.lr
        return floor + (self.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    model: DecisionModel
    history: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")


@dataclass
class Calibration:
    trigger: float
    target: float
    trigger_f1: float
    target_f1: float

    def thresholds(self) -> dict:
        return {"trigger": self.trigger, "target": self.target}


def init_model(cfg: ModelConfig, seed: int) -> DecisionModel:
    set_seed(seed)
    return DecisionModel(cfg)


class _LabelBank:
    """Per-clip labels computed once, gathered per batch."""

    def __init__(self, clips: Sequence[Clip], arrays: dict[str, EpisodeArrays], codebook: ActionCodebook):
        labels = ClipLabels.stack([clip_labels(c, arrays[c.episode_id], codebook) for c in clips])
        self.trigger, self.target, self.action = labels.trigger, labels.target, labels.action

    def take(self, idx: np.ndarray) -> ClipLabels:
        i = torch.as_tensor(idx)
        return ClipLabels(self.trigger[i], self.target[i], self.action[i])


class _Sampler:
    """Reshuffled cycling over each polarity; fixed positives per batch."""

    def __init__(self, clips: Sequence[Clip], cfg: TrainConfig, rng: np.random.Generator):
        self.rng = rng
        self.pos = np.array([i for i, c in enumerate(clips) if c.positive], dtype=np.int64)
        self.neg = np.array([i for i, c in enumerate(clips) if not c.positive], dtype=np.int64)
        if self.pos.size == 0:
            raise TrainingError("training set has no positive clips")
        self.full = len(clips) <= cfg.batch_size
        self.n_pos = cfg.batch_size if self.neg.size == 0 else max(1, round(cfg.batch_size * cfg.pos_fraction))
        self.n_neg = cfg.batch_size - self.n_pos
        self._queues = {"pos": [], "neg": []}

    def _draw(self, key: str, pool: np.ndarray, count: int) -> list[int]:
        out: list[int] = []
        queue = self._queues[key]
        while len(out) < count:
            if not queue:
                queue.extend(self.rng.permutation(pool).tolist())
            out.append(queue.pop())
        return out

    def next(self) -> np.ndarray:
        if self.full:
            return np.arange(self.pos.size + self.neg.size)
        idx = self._draw("pos", self.pos, self.n_pos)
        if self.n_neg:
            idx += self._draw("neg", self.neg, self.n_neg)
        return np.array(idx, dtype=np.int64)


def _val_f1(model, phi, clips, arrays, null_index) -> float | None:
    scored = score_clips(model, phi, clips, arrays, null_index)
    labels = [c.positive for c in scored]
    if not 0 < sum(labels) < len(labels):
        return None
    return sweep(labels, [c.score for c in scored]).best_f1


def train(model: DecisionModel, codebook: ActionCodebook, clips: Sequence[Clip], arrays: dict[str, EpisodeArrays],
          cfg: TrainConfig, val_clips: Sequence[Clip] | None = None, val_arrays: dict | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise the gated multi-task loss with Adam.

    Deterministic for a fixed seed when run single-threaded. On a non-finite
    loss or gradient a ``TrainingError`` is raised whose ``state`` attribute
    holds the parameters from the last good step.
    """
    if not clips:
        raise TrainingError("no training clips")
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    if model.cfg.k != codebook.k:
        raise ConfigError(f"model expects K={model.cfg.k} actions, codebook has {codebook.k}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    cb_inputs = CodebookInputs.build(codebook, make_embedder(model.cfg.embedder, model.cfg.utterance_dim), dtype)
    bank = _LabelBank(clips, arrays, codebook)
    sampler = _Sampler(clips, cfg, rng)
    store = ParamStore(model.named_parameters(), lr=cfg.lr)
    history: list[dict] = []

    for step in range(cfg.steps):
        model.train()
        idx = sampler.next()
        batch, _ = batch_from_clips([clips[i] for i in idx], arrays, None, dtype)
        labels = bank.take(idx)
        out = model(batch["features"], batch["pos_bins"], batch["class_ids"], codebook=cb_inputs)
        terms = compute_loss(out, labels, batch["class_ids"], cfg.final_frame_only, cfg.null_weight)
        lr = cfg.lr_at(step)
        row = {"step": step, "lr": lr, **terms.as_floats(), "val_f1": None}
        try:
            if not math.isfinite(row["total"]):
                raise TrainingError(f"loss became non-finite at step {step}")
            terms.total.backward()
            if cfg.grad_clip:
                store.clip_grad_norm(cfg.grad_clip)
            store.step(lr=lr)
        except TrainingError as exc:
            store.zero_grad()
            exc.state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            exc.history = history
            raise
        if cfg.eval_every and val_clips and (step + 1) % cfg.eval_every == 0:
            with torch.no_grad():
                phi = model.phi(cb_inputs)
            row["val_f1"] = _val_f1(model, phi, val_clips, val_arrays or arrays, codebook.null_index)
        history.append(row)
        if on_step is not None:
            on_step(row)
    model.eval()
    return TrainResult(model, history)


def _best(labels, scores, what: str) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0 or labels.all() or not labels.any():
        raise CalibrationError(f"{what} calibration needs both positive and negative examples")
    if np.all(scores == scores[0]):
        raise CalibrationError(f"{what} scores are constant ({scores[0]:.6g}); threshold is undetermined")
    try:
        result = sweep(labels, scores)
    except MetricError as exc:
        raise CalibrationError(str(exc)) from None
    return result.best_threshold, result.best_f1


def calibrate_thresholds(model: DecisionModel, phi: torch.Tensor, clips: Sequence[Clip],
                         arrays: dict[str, EpisodeArrays], null_index: int) -> Calibration:
    """Best-F1 trigger threshold over clips and target threshold over person
    tokens of positive clips; ties go to the higher threshold."""
    scored = score_clips(model, phi, clips, arrays, null_index)
    h_trig, f_trig = _best([c.positive for c in scored], [c.score for c in scored], "trigger")
    tok_s = [s for c in scored for s in c.target_scores]
    tok_l = [l for c in scored for l in c.target_labels]
    h_tgt, f_tgt = _best(tok_l, tok_s, "target")
    return Calibration(h_trig, h_tgt, f_trig, f_tgt)


def history_to_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in history:
        writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                         for k in HISTORY_FIELDS})
    return buf.getvalue()


def codebook_for(manifest_path, episodes: Sequence[Episode]) -> ActionCodebook:
    """Actions from the manifest table first, then any extra annotated ones."""
    table = manifest_actions(manifest_path)
    return build_codebook(list(table) + [a.action() for e in episodes for a in e.annotations])


@dataclass
class RunOutput:
    checkpoint: Checkpoint
    history: list[dict]
    calibration: Calibration


def run_training(manifest_path, model_cfg: ModelConfig, cfg: TrainConfig, limit: int | None = None,
                 val_limit: int | None = None, on_step=None) -> RunOutput:
    """Load splits, train, calibrate on the validation split, package a checkpoint."""
    manifest, _ = load_manifest(manifest_path)
    sim_cfg = manifest.get("sim_config", {})
    span = int(round(sim_cfg.get("interaction_seconds", 3) * sim_cfg.get("fps", 2)))
    train_eps = load_split(manifest_path, "train", limit)
    val_eps = load_split(manifest_path, "val", val_limit)
    if not train_eps:
        raise DataError("train split is empty")
    codebook = codebook_for(manifest_path, train_eps)
    if codebook.k != model_cfg.k:
        log.info("codebook has K=%d actions; overriding model k=%d", codebook.k, model_cfg.k)
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "k": codebook.k})
    window = int(round(sim_cfg.get("clip_seconds", 5) * sim_cfg.get("fps", 2)))
    if window != model_cfg.n:
        raise ConfigError(f"clips span {window} frames but the model window is N={model_cfg.n}")
    if model_cfg.feature_dim != sim_cfg.get("feature_dim", model_cfg.feature_dim):
        raise ConfigError(f"model feature_dim={model_cfg.feature_dim} but data has {sim_cfg['feature_dim']}")

    def arrays_of(eps):
        return {e.episode_id: EpisodeArrays(e, model_cfg.m, model_cfg.n, model_cfg.feature_dim) for e in eps}

    train_arrays, val_arrays = arrays_of(train_eps), arrays_of(val_eps)
    rng = np.random.default_rng(cfg.seed)
    clips = make_clips(train_eps, model_cfg.n, span, cfg.neg_stride, cfg.jitter, rng)
    val_clips = make_clips(val_eps, model_cfg.n, span, stride=1)
    model = init_model(model_cfg, cfg.seed)
    result = train(model, codebook, clips, train_arrays, cfg, val_clips, val_arrays, on_step)
    with torch.no_grad():
        phi = result.model.phi(CodebookInputs.build(codebook, make_embedder(model_cfg.embedder,
                                                                            model_cfg.utterance_dim)))
    calib = calibrate_thresholds(result.model, phi, val_clips, val_arrays, codebook.null_index)
    metadata = {
        "span": span,
        "train_config": cfg.to_dict(),
        "sim_config": sim_cfg,
        "train_clips": len(clips),
        "train_positives": sum(c.positive for c in clips),
        "val_clips": len(val_clips),
        "final_loss": result.final_loss,
        "calibration": asdict(calib),
    }
    ckpt = Checkpoint.from_model(result.model, codebook, calib.thresholds(), metadata)
    return RunOutput(ckpt, result.history, calib)
