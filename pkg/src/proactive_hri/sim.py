"""Synthetic lobby episodes with ground-truth interaction annotations.

The robot stands at ground position (0.5, 0) looking into a lobby; ground
coordinates are lateral position x in [0, 1] and depth z in [0, 1] (0 at the
robot). Pedestrians follow scripted paths. Those with an interactive intent
reach an engagement point (close to the robot, or after lingering at a spot);
the first such frame is the annotated trigger, after which the person stays
engaged for the interaction span and then departs.

Object features are simple by design: an intent-dependent appearance vector,
a stage vector (walking / engaged / departing), a smooth path-phase term, and
isotropic Gaussian noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .codebook import MultiModalAction
from .errors import ConfigError, DataError
from .tokens import CLASS_NAMES, DetectedObject, FramePacket, class_index

INTENTS = (
    "pass_by",
    "approach_robot",
    "photo_taking",
    "hesitate_lookaround",
    "group_walk",
    "phone_call",
    "luggage_carry",
    "child_greet",
)
TRIGGER_INTENTS = INTENTS[1:]
STAGES = ("walking", "engaged", "departing")

EXPRESSIONS = {"smile": 1, "happy": 2, "wink": 3, "curious": 4, "excited": 5, "calm": 6, "helpful": 7, "big_smile": 8}
MOTIONS = {"wave": 1, "hand_shake": 2, "superman_pose": 3, "point_around": 4, "bow": 5, "nod": 6, "offer_hand": 7, "hug": 8}

_TABLE = {
    "pass_by": ("Have a nice day!", "smile", "wave"),
    "approach_robot": ("Good morning! How can I help you?", "happy", "hand_shake"),
    "photo_taking": ("How is my pose?", "wink", "superman_pose"),
    "hesitate_lookaround": ("Are you looking for some places?", "curious", "point_around"),
    "group_walk": ("Welcome everyone, nice to see you all!", "excited", "bow"),
    "phone_call": ("Take your time, I am here when you finish your call.", "calm", "nod"),
    "luggage_carry": ("Do you need help with your luggage?", "helpful", "offer_hand"),
    "child_greet": ("Hi little friend! Are you interested in playing a game with me?", "big_smile", "hug"),
}

COMPANIONS = {
    "photo_taking": ("cell_phone",),
    "phone_call": ("cell_phone",),
    "luggage_carry": ("suitcase",),
}
CLUTTER = ("backpack", "handbag", "tie")

ROBOT = np.array([0.5, 0.0])
DWELL_FRAMES = 3
STATIONARY_STEP = 0.03


def intent_action_table() -> dict[str, MultiModalAction]:
    return {
        intent: MultiModalAction(utt, EXPRESSIONS[expr], MOTIONS[motion])
        for intent, (utt, expr, motion) in _TABLE.items()
    }


@dataclass
class SimConfig:
    seed: int = 0
    fps: int = 2
    episode_seconds: float = 30.0
    clip_seconds: float = 5.0
    interaction_seconds: float = 3.0
    max_pedestrians: int = 4
    feature_dim: int = 64
    noise: float = 0.35
    engage_distance: float = 0.35
    appearance_seed: int = 7
    intents: tuple[str, ...] = INTENTS

    def __post_init__(self):
        self.intents = tuple(self.intents)
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.fps < 1 or self.episode_seconds <= 0:
            raise ConfigError("fps and episode_seconds must be positive")
        if self.window < 1:
            raise ConfigError("clip_seconds * fps must give at least one frame")
        unknown = set(self.intents) - set(INTENTS)
        if unknown:
            raise ConfigError(f"unknown intents {sorted(unknown)}")
        if self.max_pedestrians < 1:
            raise ConfigError("max_pedestrians must be >= 1")

    @property
    def frames(self) -> int:
        return int(round(self.episode_seconds * self.fps))

    @property
    def window(self) -> int:
        """Frames per clip; equals the model's N."""
        return int(round(self.clip_seconds * self.fps))

    @property
    def span(self) -> int:
        return int(round(self.interaction_seconds * self.fps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intents"] = list(self.intents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PedestrianScript:
    track_id: int
    intent: str
    start_frame: int
    trajectory: np.ndarray  # (T_visible, 2) ground (x, z)
    stages: list[str]
    companions: list[tuple[int, str]] = field(default_factory=list)
    scale: float = 1.0
    is_target: bool = False

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + len(self.trajectory))


@dataclass
class EpisodeAnnotation:
    trigger_frame_idx: int
    target_track_ids: list[int]
    action_index: int
    intent: str
    recorded: MultiModalAction | None = None

    def action(self) -> MultiModalAction:
        if self.recorded is not None:
            return self.recorded
        return intent_action_table()[self.intent]


@lru_cache(maxsize=8)
def _appearance(feature_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    vecs = {f"intent:{i}": rng.normal(0.0, 0.3, feature_dim) for i in INTENTS}
    vecs.update({f"stage:{s}": rng.normal(0.0, 0.4, feature_dim) for s in STAGES})
    vecs.update({f"class:{c}": rng.normal(0.0, 0.5, feature_dim) for c in CLASS_NAMES})
    vecs["phase:cos"] = rng.normal(0.0, 0.1, feature_dim)
    vecs["phase:sin"] = rng.normal(0.0, 0.1, feature_dim)
    return vecs


def project_bbox(pos: np.ndarray, scale: float = 1.0) -> tuple[float, float, float, float]:
    """Ground position to a normalized (cx, cy, w, h) image box."""
    x, z = float(pos[0]), float(pos[1])
    near = 1.0 - min(max(z, 0.0), 1.0)
    h = scale * (0.15 + 0.55 * near)
    w = 0.4 * h
    cy = 0.35 + 0.4 * near
    return _clip_box((x, cy, w, h))


def _clip_box(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return (min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), min(max(w, 1e-3), 1.0), min(max(h, 1e-3), 1.0))


_COMPANION_BOX = {
    # offsets and sizes relative to the owner's box: dx, dy, w, h
    "cell_phone": (0.3, -0.25, 0.15, 0.06),
    "suitcase": (0.6, 0.3, 0.5, 0.35),
    "backpack": (-0.2, -0.1, 0.5, 0.3),
    "handbag": (0.4, 0.1, 0.3, 0.2),
    "tie": (0.0, -0.2, 0.1, 0.2),
}


def companion_bbox(owner: tuple[float, float, float, float], cls: str) -> tuple[float, float, float, float]:
    cx, cy, w, h = owner
    dx, dy, sw, sh = _COMPANION_BOX[cls]
    return _clip_box((cx + dx * w, cy + dy * h, sw * w, sh * h))


def _lerp(a: np.ndarray, b: np.ndarray, steps: int) -> np.ndarray:
    t = np.arange(1, steps + 1)[:, None] / steps
    return a + (b - a) * t


def _departure(rng, start: np.ndarray) -> np.ndarray:
    side = 1.05 if start[0] >= 0.5 else -0.05
    end = np.array([side, min(start[1] + rng.uniform(0.1, 0.3), 1.0)])
    return _lerp(start, end, int(rng.integers(6, 11)))


def distance_to_robot(pos: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(pos) - ROBOT, axis=1)


def trigger_by_distance(traj: np.ndarray, threshold: float) -> int | None:
    inside = np.flatnonzero(distance_to_robot(traj) < threshold)
    return int(inside[0]) if len(inside) else None


def trigger_by_dwell(traj: np.ndarray, dwell: int = DWELL_FRAMES, step: float = STATIONARY_STEP) -> int | None:
    moves = np.linalg.norm(np.diff(traj, axis=0), axis=1)
    run = 0
    for i, d in enumerate(moves, start=1):
        run = run + 1 if d < step else 0
        if run >= dwell:
            return i
    return None


def _approach_path(rng, planned: int, threshold: float) -> tuple[int, np.ndarray, np.ndarray]:
    """Straight walk towards the robot ending just inside ``threshold`` at ``planned``."""
    steps = int(rng.integers(6, 13))
    start = np.array([rng.uniform(0.1, 0.9), rng.uniform(0.8, 1.0)])
    direction = (start - ROBOT) / np.linalg.norm(start - ROBOT)
    end = ROBOT + direction * threshold * rng.uniform(0.9, 0.97)
    walk = np.vstack([start, _lerp(start, end, steps)])
    return planned - steps, walk, end


def _dwell_path(rng, planned: int) -> tuple[int, np.ndarray, np.ndarray]:
    spot = np.array([rng.uniform(0.2, 0.8), rng.uniform(0.45, 0.7)])
    entry = np.array([-0.02 if rng.random() < 0.5 else 1.02, spot[1] + rng.uniform(-0.1, 0.1)])
    entry[0] = min(max(entry[0], 0.0), 1.0)
    steps = max(3, min(12, int(np.linalg.norm(spot - entry) / 0.06)))
    walk = np.vstack([entry, _lerp(entry, spot, steps)])
    linger = np.repeat(spot[None], DWELL_FRAMES, axis=0) + rng.uniform(-0.004, 0.004, (DWELL_FRAMES, 2))
    path = np.vstack([walk, linger])
    return planned - (len(path) - 1), path, path[-1]


class _Scene:
    def __init__(self, cfg: SimConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        self.scripts: list[PedestrianScript] = []
        self.annotations: list[EpisodeAnnotation] = []
        self.next_id = 1
        self.occupancy = np.zeros(cfg.frames, dtype=int)

    def new_id(self) -> int:
        tid = self.next_id
        self.next_id += 1
        return tid

    def _visible(self, start: int, traj: np.ndarray) -> list[int]:
        """Path indices that fall inside the episode and inside the image."""
        keep = [i for i, p in enumerate(traj)
                if 0 <= start + i < self.cfg.frames and 0.0 <= p[0] <= 1.0]
        return keep

    def fits(self, start: int, length: int, persons: int) -> bool:
        lo, hi = max(start, 0), min(start + length, self.cfg.frames)
        return hi <= lo or int(self.occupancy[lo:hi].max()) + persons <= self.cfg.max_pedestrians

    def add(self, intent: str, start: int, traj: np.ndarray, stages: list[str], scale: float = 1.0,
            target: bool = False, companions=()) -> PedestrianScript | None:
        keep = self._visible(start, traj)
        if not keep:
            return None
        first, last = keep[0], keep[-1]
        traj, stages = traj[first:last + 1], stages[first:last + 1]
        script = PedestrianScript(self.new_id(), intent, start + first, traj, stages, scale=scale, is_target=target)
        for cls in companions:
            script.companions.append((self.new_id(), cls))
        lo, hi = script.start_frame, script.start_frame + len(traj)
        self.occupancy[lo:hi] += 1
        self.scripts.append(script)
        return script

    def add_interaction(self, intent: str, planned: int) -> int | None:
        cfg, rng = self.cfg, self.rng
        if intent in ("photo_taking", "hesitate_lookaround"):
            start, path, stop = _dwell_path(rng, planned)
            rel = trigger_by_dwell(path)
        else:
            start, path, stop = _approach_path(rng, planned, cfg.engage_distance)
            rel = trigger_by_distance(path, cfg.engage_distance)
        if rel is None:
            return None
        trigger = start + rel
        if trigger < cfg.window - 1 or trigger >= cfg.frames:
            return None
        path = path[:rel + 1]
        engaged = np.repeat(stop[None], cfg.span, axis=0) + rng.uniform(-0.003, 0.003, (cfg.span, 2))
        depart = _departure(rng, engaged[-1])
        full = np.vstack([path, engaged, depart])
        stages = ["walking"] * rel + ["engaged"] * (cfg.span + 1) + ["departing"] * len(depart)
        members = [np.zeros(2)]
        if intent == "group_walk":
            members += [np.array([0.08, 0.03]), np.array([-0.08, 0.04])][: int(rng.integers(1, 3))]
        if not self.fits(start, len(full), len(members)):
            return None
        scale = 0.6 if intent == "child_greet" else 1.0
        companions = COMPANIONS.get(intent, ())
        targets = []
        for offset in members:
            s = self.add(intent, start, full + offset, stages, scale=scale, target=True, companions=companions)
            if s is None or trigger not in s.frames:
                continue
            targets.append(s.track_id)
        if not targets:
            return None
        self.annotations.append(EpisodeAnnotation(trigger, targets, -1, intent))
        return trigger

    def add_passer(self, start: int) -> None:
        rng = self.rng
        z = rng.uniform(0.55, 0.95)
        left_to_right = rng.random() < 0.5
        a = np.array([-0.02 if left_to_right else 1.02, z])
        b = np.array([1.02 if left_to_right else -0.02, z + rng.uniform(-0.1, 0.1)])
        steps = int(rng.integers(10, 25))
        path = np.vstack([a, _lerp(a, b, steps)])
        path[:, 0] = np.clip(path[:, 0], 0.0, 1.0)
        if not self.fits(start, len(path), 1):
            return
        clutter = (CLUTTER[int(rng.integers(len(CLUTTER)))],) if rng.random() < 0.3 else ()
        self.add("pass_by", start, path, ["walking"] * len(path), companions=clutter)


def _render(cfg: SimConfig, scene: _Scene, episode_id: str, rng: np.random.Generator) -> list[FramePacket]:
    vecs = _appearance(cfg.feature_dim, cfg.appearance_seed)
    per_frame: list[list[DetectedObject]] = [[] for _ in range(cfg.frames)]
    for s in scene.scripts:
        length = len(s.trajectory)
        phase = np.linspace(0.0, 1.0, length) if length > 1 else np.zeros(1)
        base = vecs[f"intent:{s.intent}"]
        person_noise = rng.normal(0.0, cfg.noise, (length, cfg.feature_dim))
        comp_noise = [rng.normal(0.0, cfg.noise, (length, cfg.feature_dim)) for _ in s.companions]
        for i in range(length):
            f = s.start_frame + i
            box = project_bbox(s.trajectory[i], s.scale)
            feat = (base + vecs[f"stage:{s.stages[i]}"]
                    + math.cos(math.pi * phase[i]) * vecs["phase:cos"]
                    + math.sin(math.pi * phase[i]) * vecs["phase:sin"] + person_noise[i])
            per_frame[f].append(DetectedObject(s.track_id, class_index("person"), box, feat))
            for (tid, cls), noise in zip(s.companions, comp_noise):
                cfeat = vecs[f"class:{cls}"] + 0.3 * base + noise[i]
                per_frame[f].append(DetectedObject(tid, class_index(cls), companion_bbox(box, cls), cfeat))
    by_frame = {a.trigger_frame_idx: a for a in scene.annotations}
    table = intent_action_table()
    packets = []
    for f, objs in enumerate(per_frame):
        ann = by_frame.get(f)
        annotation = None
        if ann is not None:
            annotation = {"target_track_ids": list(ann.target_track_ids), "action": table[ann.intent].to_dict(),
                          "intent": ann.intent}
        objs.sort(key=lambda o: o.track_id)
        packets.append(FramePacket(episode_id, f, int(round(f * 1000 / cfg.fps)), objs, annotation))
    return packets


def generate_episode(cfg: SimConfig, seed: int, episode_id: str | None = None,
                     ) -> tuple[list[FramePacket], list[EpisodeAnnotation]]:
    """Deterministic episode for ``(cfg, seed)``."""
    scene, packets = _build(cfg, seed, episode_id)
    return packets, scene.annotations


def track_intents(cfg: SimConfig, seed: int) -> dict[int, str]:
    """Ground-truth intent of every person track in episode ``seed``."""
    scene, _ = _build(cfg, seed, None)
    return {s.track_id: s.intent for s in scene.scripts}


def _build(cfg: SimConfig, seed: int, episode_id: str | None) -> tuple[_Scene, list[FramePacket]]:
    rng = np.random.default_rng([cfg.seed, seed])
    scene = _Scene(cfg, rng)
    trigger_intents = [i for i in cfg.intents if i in TRIGGER_INTENTS]
    n_interactions = int(rng.choice([0, 1, 2], p=[0.2, 0.55, 0.25])) if trigger_intents else 0
    earliest = cfg.window - 1 + int(rng.integers(0, 6))
    for _ in range(n_interactions):
        planned = earliest + int(rng.integers(0, 10))
        if planned >= cfg.frames:
            break
        intent = trigger_intents[int(rng.integers(len(trigger_intents)))]
        trigger = scene.add_interaction(intent, planned)
        if trigger is not None:
            earliest = trigger + cfg.span + cfg.window + 2
    if "pass_by" in cfg.intents:
        for _ in range(int(rng.integers(1, 5))):
            scene.add_passer(int(rng.integers(-15, cfg.frames - 4)))
    action_index = {name: i for i, name in enumerate(intent_action_table())}
    for ann in scene.annotations:
        ann.action_index = action_index[ann.intent]
    scene.annotations.sort(key=lambda a: a.trigger_frame_idx)
    packets = _render(cfg, scene, episode_id or f"ep{seed:06d}", rng)
    return scene, packets


# --- on-disk formats -------------------------------------------------------

def _round(values, ndigits: int = 4) -> list[float]:
    return [round(float(v), ndigits) for v in values]


def packet_to_json(p: FramePacket) -> str:
    d = {
        "episode_id": p.episode_id,
        "frame_idx": p.frame_idx,
        "timestamp_ms": p.timestamp_ms,
        "objects": [
            {"track_id": o.track_id, "class_id": int(o.class_id), "bbox": _round(o.bbox),
             "feature": _round(o.feature)}
            for o in p.objects
        ],
    }
    if p.annotation is not None:
        d["annotation"] = p.annotation
    return json.dumps(d, separators=(",", ":"))


def packet_from_json(line: str) -> FramePacket:
    d = json.loads(line)
    objects = [
        DetectedObject(int(o["track_id"]), class_index(o["class_id"]), tuple(float(v) for v in o["bbox"]),
                       np.asarray(o["feature"], dtype=np.float32))
        for o in d.get("objects", [])
    ]
    return FramePacket(str(d["episode_id"]), int(d["frame_idx"]), int(d.get("timestamp_ms", 0)), objects,
                       d.get("annotation"))


def write_episode(path: Path, packets: list[FramePacket]) -> None:
    text = "".join(packet_to_json(p) + "\n" for p in packets)
    atomic_write(Path(path), text.encode("utf-8"))


def read_episode(path: Path) -> list[FramePacket]:
    with open(path, encoding="utf-8") as fh:
        return [packet_from_json(line) for line in fh if line.strip()]


def annotations_from_packets(packets: list[FramePacket]) -> list[EpisodeAnnotation]:
    """Recover annotations from frame records (the file form carries them inline)."""
    table = list(intent_action_table().items())
    out = []
    for p in packets:
        if p.annotation is None:
            continue
        action = MultiModalAction.from_dict(p.annotation["action"])
        intent = p.annotation.get("intent")
        if intent is None:
            intent = next((i for i, a in table if a == action), "")
        index = next((k for k, (_, a) in enumerate(table) if a == action), -1)
        out.append(EpisodeAnnotation(p.frame_idx, [int(t) for t in p.annotation["target_track_ids"]], index, intent, action))
    return out


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


def split_counts(n_episodes: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios {ratios} must be three non-negative numbers summing to 1")
    if n_episodes < 3:
        raise ConfigError(f"need at least 3 episodes for train/val/test splits, got {n_episodes}")
    n_val = max(1, int(round(n_episodes * ratios[1])))
    n_test = max(1, int(round(n_episodes * ratios[2])))
    n_train = n_episodes - n_val - n_test
    if n_train < 1:
        raise ConfigError("split ratios leave no training episodes")
    return n_train, n_val, n_test


def generate_dataset(cfg: SimConfig, n_episodes: int, out_dir, ratios=(0.8, 0.1, 0.1)) -> dict:
    """Write episode files and ``manifest.json`` under ``out_dir``; returns the manifest."""
    counts = split_counts(n_episodes, ratios)
    out_dir = Path(out_dir)
    manifest = {
        "version": MANIFEST_VERSION,
        "sim_config": cfg.to_dict(),
        "action_table": {k: v.to_dict() for k, v in intent_action_table().items()},
        "splits": {},
    }
    seed = 0
    for split, count in zip(SPLITS, counts):
        files, positives, frames = [], 0, 0
        for _ in range(count):
            episode_id = f"{split}-{seed:05d}"
            packets, anns = generate_episode(cfg, seed, episode_id)
            rel = f"episodes/{split}/{episode_id}.jsonl"
            write_episode(out_dir / rel, packets)
            files.append(rel)
            positives += len(anns)
            frames += len(packets)
            seed += 1
        manifest["splits"][split] = {"episodes": count, "positives": positives, "frames": frames, "files": files}
    atomic_write(out_dir / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from None
    if manifest.get("version") != MANIFEST_VERSION or "splits" not in manifest:
        raise DataError(f"manifest {path} has unsupported version {manifest.get('version')!r}")
    return manifest, path.parent
