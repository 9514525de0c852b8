"""Clip-level trigger metrics, threshold sweeps, and checkpoint evaluation.

Conventions: a clip is predicted positive when its score is >= the
threshold; candidate thresholds are the distinct scores; ties in F1 go to the
higher threshold; 0/0 ratios are reported as 0 and flagged. AP is the area
under the precision-recall curve after taking the precision envelope
(all-point interpolation); AR is the mean recall over the same thresholds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import MetricError


class InferenceMode(str, Enum):
    TRIGGER_ONLY = "trigger-only"
    ACTOR_ONLY = "actor-only"
    TRIGGER_ACTOR = "trigger-actor"

    @classmethod
    def parse(cls, value) -> "InferenceMode":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        aliases = {"triggeronly": "trigger-only", "actoronly": "actor-only", "triggeractor": "trigger-actor"}
        key = aliases.get(key.replace("-", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise MetricError(f"unknown inference mode {value!r}") from None


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (0.0, True) if den == 0 else (num / den, False)


@dataclass
class PRResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    degenerate: list[str] = field(default_factory=list)


def pr_from_flags(labels: Sequence[bool], fired: Sequence[bool]) -> PRResult:
    labels = np.asarray(labels, dtype=bool)
    fired = np.asarray(fired, dtype=bool)
    if labels.size == 0:
        raise MetricError("no clips to score")
    tp = int((labels & fired).sum())
    fp = int((~labels & fired).sum())
    fn = int((labels & ~fired).sum())
    tn = int((~labels & ~fired).sum())
    precision, dp = _ratio(tp, tp + fp)
    recall, dr = _ratio(tp, tp + fn)
    flags = [name for name, bad in (("precision", dp), ("recall", dr)) if bad]
    if precision + recall == 0:
        flags.append("f1")
    return PRResult(precision, recall, f1_score(precision, recall), tp, fp, fn, tn, flags)


def pr_at_threshold(labels: Sequence[bool], scores: Sequence[float], threshold: float) -> PRResult:
    return pr_from_flags(labels, np.asarray(scores, dtype=np.float64) >= threshold)


@dataclass
class SweepResult:
    thresholds: np.ndarray  # distinct scores, descending
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    ap: float
    ar: float
    best_threshold: float
    best_f1: float

    def curve_rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


def sweep(labels: Sequence[bool], scores: Sequence[float]) -> SweepResult:
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.size == 0:
        raise MetricError("labels and scores must be non-empty and aligned")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("sweep needs both positive and negative clips")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    pp = ends + 1
    precision = tp / pp
    recall = tp / n_pos
    f1 = np.array([f1_score(p, r) for p, r in zip(precision.tolist(), recall.tolist())])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    gains = np.diff(np.r_[0.0, recall])
    ap = math.fsum((gains * envelope).tolist())
    ar = math.fsum(recall.tolist()) / len(recall)
    best = int(np.argmax(f1))
    return SweepResult(s[ends], precision, recall, f1, ap, ar, float(s[ends][best]), float(f1[best]))


def best_f1_threshold(labels: Sequence[bool], scores: Sequence[float]) -> tuple[float, float]:
    result = sweep(labels, scores)
    return result.best_threshold, result.best_f1


@dataclass
class ScoredClip:
    clip_id: str
    source: str
    positive: bool
    score: float
    action_argmax: int  # over K+1, NULL included
    action_real: int  # over the K real actions
    null_index: int
    true_action: int = -1
    target_scores: list[float] = field(default_factory=list)
    target_labels: list[int] = field(default_factory=list)

    def fired(self, mode: InferenceMode, threshold: float) -> bool:
        trig = self.score >= threshold
        acts = self.action_argmax != self.null_index
        if mode is InferenceMode.TRIGGER_ONLY:
            return trig
        if mode is InferenceMode.ACTOR_ONLY:
            return acts
        return trig and acts

    def chosen_action(self, mode: InferenceMode) -> int:
        return self.action_real if mode is InferenceMode.TRIGGER_ONLY else self.action_argmax


@dataclass
class MetricsReport:
    source: str
    mode: str
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    ap: float | None = None
    ar: float | None = None
    action_top1: float | None = None
    target_threshold: float | None = None
    target_precision: float | None = None
    target_recall: float | None = None
    target_f1: float | None = None
    target_accuracy: float | None = None
    clips: int = 0
    positives: int = 0
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(scored: Sequence[ScoredClip], mode: InferenceMode, threshold: float,
                 target_threshold: float = 0.5, source: str = "all") -> MetricsReport:
    mode = InferenceMode.parse(mode)
    if not scored:
        raise MetricError("no scored clips")
    labels = [c.positive for c in scored]
    fired = [c.fired(mode, threshold) for c in scored]
    pr = pr_from_flags(labels, fired)
    report = MetricsReport(source, mode.value, threshold, pr.precision, pr.recall, pr.f1,
                           pr.tp, pr.fp, pr.fn, pr.tn, clips=len(scored), positives=sum(labels),
                           degenerate=list(pr.degenerate))
    if mode is InferenceMode.TRIGGER_ONLY and 0 < sum(labels) < len(labels):
        sw = sweep(labels, [c.score for c in scored])
        report.ap, report.ar = sw.ap, sw.ar
    hits = [c for c, f in zip(scored, fired) if c.positive and f]
    if hits:
        report.action_top1 = sum(c.chosen_action(mode) == c.true_action for c in hits) / len(hits)
    else:
        report.degenerate.append("action_top1")
    tok_scores = np.array([s for c in scored if c.positive for s in c.target_scores])
    tok_labels = np.array([l for c in scored if c.positive for l in c.target_labels], dtype=bool)
    if tok_scores.size:
        tpr = pr_at_threshold(tok_labels, tok_scores, target_threshold)
        report.target_threshold = target_threshold
        report.target_precision, report.target_recall, report.target_f1 = tpr.precision, tpr.recall, tpr.f1
        report.target_accuracy = float(((tok_scores >= target_threshold) == tok_labels).mean())
    return report


@torch.no_grad()
def score_clips(model, phi: torch.Tensor, clips, arrays, null_index: int, codebook=None,
                batch_size: int = 256) -> list[ScoredClip]:
    """Run the model on every clip and keep last-frame outputs."""
    from .dataset import batch_from_clips
    from .tokens import PERSON

    out: list[ScoredClip] = []
    model.eval()
    dtype = phi.dtype
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        batch, _ = batch_from_clips(chunk, arrays, None, dtype)
        pred = model(batch["features"], batch["pos_bins"], batch["class_ids"], phi).last()
        probs = pred.action_dist.double()
        argmax_all = probs.argmax(dim=-1)
        argmax_real = probs[:, :null_index].argmax(dim=-1)
        cls_last = batch["class_ids"][:, -1]
        for i, c in enumerate(chunk):
            ea = arrays[c.episode_id]
            persons = (cls_last[i] == PERSON).numpy()
            tracks = ea.track_ids[c.end_frame + ea.n - 1]
            t_scores = pred.target[i].double().numpy()[persons].tolist() if c.positive else []
            t_labels = np.isin(tracks[persons], list(c.target_track_ids)).astype(int).tolist() if c.positive else []
            true_action = codebook.index_of(c.action) if (c.positive and codebook is not None) else -1
            out.append(ScoredClip(f"{c.episode_id}@{c.end_frame}", ea.episode.source, c.positive,
                                  float(pred.trigger[i]), int(argmax_all[i]), int(argmax_real[i]), null_index,
                                  true_action, t_scores, t_labels))
    return out


def group_by_source(scored: Sequence[ScoredClip]) -> dict[str, list[ScoredClip]]:
    groups: dict[str, list[ScoredClip]] = {}
    for c in scored:
        groups.setdefault(c.source, []).append(c)
    return dict(sorted(groups.items()))


@dataclass
class Evaluation:
    reports: list[MetricsReport]
    scored: list[ScoredClip]
    curve: SweepResult | None

    def report(self, mode="trigger-only", source: str = "all") -> MetricsReport:
        mode = InferenceMode.parse(mode).value
        return next(r for r in self.reports if r.mode == mode and r.source == source)


def evaluate_scored(scored: Sequence[ScoredClip], thresholds: dict, modes=tuple(InferenceMode)) -> Evaluation:
    if not scored:
        raise MetricError("no clips were scored")
    h_trig = float(thresholds["trigger"])
    h_tgt = float(thresholds.get("target", 0.5))
    groups = {"all": list(scored)}
    sources = group_by_source(scored)
    if len(sources) > 1:
        groups.update(sources)
    reports = [build_report(clips, m, h_trig, h_tgt, source=src)
               for src, clips in groups.items() for m in map(InferenceMode.parse, modes)]
    labels = [c.positive for c in scored]
    curve = sweep(labels, [c.score for c in scored]) if 0 < sum(labels) < len(labels) else None
    return Evaluation(reports, list(scored), curve)


def evaluate_checkpoint(ckpt, episodes, modes=tuple(InferenceMode), batch_size: int = 256) -> Evaluation:
    """Score every window of ``episodes`` (no negative subsampling)."""
    from .dataset import EpisodeArrays, make_clips

    cfg = ckpt.model_config
    model = ckpt.build_model()
    phi = model.phi(ckpt.codebook_inputs())
    if "trigger" not in ckpt.thresholds:
        raise MetricError("checkpoint has no calibrated trigger threshold")
    span = int(ckpt.metadata.get("span", 6))
    arrays = {e.episode_id: EpisodeArrays(e, cfg.m, cfg.n, cfg.feature_dim) for e in episodes}
    clips = make_clips(episodes, cfg.n, span, stride=1)
    scored = score_clips(model, phi, clips, arrays, ckpt.codebook.null_index, ckpt.codebook, batch_size)
    return evaluate_scored(scored, ckpt.thresholds, modes)


REPORT_FIELDS = [f for f in MetricsReport.__dataclass_fields__ if f != "degenerate"] + ["degenerate"]


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = r.to_dict()
        row["degenerate"] = ";".join(row["degenerate"])
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def curve_to_csv(curve: SweepResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "precision", "recall"])
    writer.writerows(curve.curve_rows())
    return buf.getvalue()


def write_reports(evaluation: Evaluation, out_dir, figures: bool = True) -> dict[str, Path]:
    from .sim import atomic_write

    out_dir = Path(out_dir)
    paths = {"csv": out_dir / "metrics.csv", "json": out_dir / "metrics.json"}
    atomic_write(paths["csv"], reports_to_csv(evaluation.reports).encode())
    atomic_write(paths["json"], (json.dumps([r.to_dict() for r in evaluation.reports], indent=2) + "\n").encode())
    if evaluation.curve is not None:
        paths["pr_curve"] = out_dir / "pr_curve.csv"
        atomic_write(paths["pr_curve"], curve_to_csv(evaluation.curve).encode())
        if figures:
            from .plotting import plot_pr_curve, plot_score_histogram

            paths["pr_figure"] = plot_pr_curve(evaluation.curve, out_dir / "pr_curve.png",
                                               evaluation.report().threshold)
            paths["score_figure"] = plot_score_histogram(evaluation.scored, out_dir / "scores.png",
                                                         evaluation.report().threshold)
    return paths
