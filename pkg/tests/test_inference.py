import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proactive_hri.checkpoint import Checkpoint
from proactive_hri.dataset import load_split
from proactive_hri.errors import ConfigError, InputError, SamplingError
from proactive_hri.evaluation import InferenceMode
from proactive_hri.inference import (
    EngineConfig,
    InferenceEngine,
    argmax_action,
    compute_centroid,
    filter_targets,
    sample_action,
)
from proactive_hri.tokens import PERSON, DetectedObject
from oracles import exact_mean


def obj(track, cls=PERSON, x=0.5, y=0.5):
    return DetectedObject(track, cls, (x, y, 0.1, 0.2), np.zeros(4, dtype=np.float32))


def test_one_hot_is_always_sampled():
    rng = np.random.default_rng(0)
    for k in range(5):
        p = np.eye(5)[k]
        assert all(sample_action(p, False, rng) == k for _ in range(50))


def test_uniform_frequencies_within_three_sigma():
    rng = np.random.default_rng(1)
    draws = np.array([sample_action([0.25] * 4, False, rng) for _ in range(10_000)])
    counts = np.bincount(draws, minlength=4)
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) < 3 * sigma)


def test_skewed_frequencies_with_null_excluded():
    rng = np.random.default_rng(2)
    p = [0.1, 0.3, 0.2, 0.4]  # last is NULL
    draws = np.array([sample_action(p, True, rng) for _ in range(10_000)])
    counts = np.bincount(draws, minlength=4)
    assert counts[3] == 0
    expected = np.array([1, 3, 2]) / 6 * 10_000
    sigma = np.sqrt(10_000 * (expected / 10_000) * (1 - expected / 10_000))
    assert np.all(np.abs(counts[:3] - expected) < 3 * sigma)


def test_exclude_null_picks_the_only_real_action():
    rng = np.random.default_rng(3)
    assert all(sample_action([0.5, 0.5], True, rng) == 0 for _ in range(200))
    assert argmax_action([0.3, 0.7], True) == 0
    assert argmax_action([0.3, 0.7], False) == 1


def test_sampling_errors():
    with pytest.raises(SamplingError):
        sample_action([0.0, 1.0], True, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        sample_action([-0.1, 1.1], False, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        sample_action([0.5, 0.5], False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=9), st.floats(0, 1, exclude_max=True))
def test_inverse_cdf_lands_on_mass(p, u):
    if sum(p[:-1]) <= 0:
        return
    idx = sample_action(p, True, u=u)
    assert idx < len(p) - 1 and p[idx] > 0


def test_filter_targets_example():
    objs = [obj(1), obj(2), obj(3, cls=3)]
    scores = [0.9, 0.3, 0.99]
    assert [o.track_id for o in filter_targets(objs, scores, 0.5)] == [1]
    assert [o.track_id for o in filter_targets(objs, scores, 0.0)] == [1, 2]
    assert filter_targets(objs, scores, 0.95) == []
    with pytest.raises(InputError):
        filter_targets(objs, scores[:2], 0.5)


def test_centroid_examples():
    assert compute_centroid([obj(1, x=0.2), obj(2, x=0.6)]) == pytest.approx((0.4, 0.5))
    with pytest.raises(InputError):
        compute_centroid([])
    rng = np.random.default_rng(4)
    for _ in range(20):
        pts = rng.random((5, 2))
        got = compute_centroid([obj(i, x=float(a), y=float(b)) for i, (a, b) in enumerate(pts)])
        want = (exact_mean(pts[:, 0]), exact_mean(pts[:, 1]))
        assert got == pytest.approx(want, abs=1e-15)


def test_uncalibrated_engine_refused(small_run):
    ckpt = small_run.checkpoint
    bare = Checkpoint.from_model(ckpt.build_model(), ckpt.codebook, {}, ckpt.metadata)
    with pytest.raises(ConfigError):
        InferenceEngine.from_checkpoint(bare)
    with pytest.raises(ConfigError):
        InferenceEngine(ckpt.build_model(), None, ckpt.codebook, {})
    with pytest.raises(ConfigError):
        EngineConfig(refractory=-1)


@pytest.fixture(scope="module")
def stream(small_dataset):
    return load_split(small_dataset, "test")[:2]


def engine(ckpt, thresholds=None, **cfg):
    e = InferenceEngine.from_checkpoint(ckpt, EngineConfig(**cfg))
    if thresholds:
        e.h_trigger = thresholds.get("trigger", e.h_trigger)
        e.h_target = thresholds.get("target", e.h_target)
    e.keep_trace = True
    return e


def run_all(e, episodes):
    return [c for ep in episodes for c in e.run(ep.packets)]


def test_refractory_spacing(small_run, stream):
    e = engine(small_run.checkpoint, {"trigger": 0.0, "target": 0.0}, mode="trigger-only", refractory=6,
               deterministic=True)
    cmds = run_all(e, stream[:1])
    frames = [c.frame_idx for c in cmds]
    assert frames and all(b - a >= 6 for a, b in zip(frames, frames[1:]))
    for c in cmds:
        assert c.trigger_score >= 0.0 and c.target_track_ids
    sup = [t for t in e.trace if t.fired and t.command is None]
    assert all(t.suppressed in ("refractory", "no-target") for t in sup)


def test_warmup_suppression(small_run, stream):
    n = small_run.checkpoint.model_config.n
    e = engine(small_run.checkpoint, {"trigger": 0.0, "target": 0.0}, mode="trigger-only", refractory=0,
               suppress_warmup=True, deterministic=True)
    cmds = run_all(e, stream[:1])
    assert min(c.frame_idx for c in cmds) >= n - 1


def test_no_target_means_no_command(small_run, stream, caplog):
    e = engine(small_run.checkpoint, {"trigger": 0.0, "target": 1.01}, mode="trigger-only", refractory=0)
    with caplog.at_level("INFO", logger="proactive_hri.inference"):
        assert run_all(e, stream) == []
    assert all(t.suppressed == "no-target" for t in e.trace if t.fired)
    assert "without valid target" in caplog.text


def test_mode_rules_per_frame(small_run, stream):
    traces = {}
    for mode in InferenceMode:
        e = engine(small_run.checkpoint, mode=mode.value, refractory=0)
        run_all(e, stream)
        traces[mode] = e.trace
    to, ao, ta = (traces[m] for m in (InferenceMode.TRIGGER_ONLY, InferenceMode.ACTOR_ONLY,
                                       InferenceMode.TRIGGER_ACTOR))
    null = small_run.checkpoint.codebook.null_index
    for a, b, c in zip(to, ao, ta):
        # same uniform per frame in every mode, so the draws agree
        assert a.trigger_score == b.trigger_score == c.trigger_score
        assert a.action_any == b.action_any == c.action_any
        assert a.fired == a.trigger_ok
        assert b.fired == (b.action_any != null)
        assert c.fired == (a.fired and b.fired)
        if c.command is not None:
            assert c.command.action_index != null


def test_streams_are_independent(small_run, stream):
    a = engine(small_run.checkpoint, {"trigger": 0.0, "target": 0.0}, seed=7)
    sep = [c.to_dict() for c in run_all(a, stream)]
    b = engine(small_run.checkpoint, {"trigger": 0.0, "target": 0.0}, seed=7)
    p, q = stream[0].packets, stream[1].packets
    mixed = [x for pair in zip(p, q) for x in pair] + p[len(q):] + q[len(p):]
    inter = [c.to_dict() for c in b.run(mixed)]
    key = lambda d: (d["episode_id"], d["frame_idx"])  # noqa: E731
    assert sorted(sep, key=key) == sorted(inter, key=key)


def test_command_serialises(small_run, stream):
    e = engine(small_run.checkpoint, {"trigger": 0.0, "target": 0.0}, mode="trigger-only", deterministic=True)
    cmd = next(e.run(stream[0].packets))
    d = cmd.to_dict()
    assert set(d) == {"episode_id", "frame_idx", "action", "action_index", "target_track_ids", "centroid",
                      "trigger_score", "action_probability"}
    assert d["action"] == small_run.checkpoint.codebook.action(cmd.action_index).to_dict()
