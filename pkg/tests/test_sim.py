import json

import numpy as np
import pytest

from proactive_hri.errors import ConfigError, DataError
from proactive_hri.sim import (
    EXPRESSIONS,
    INTENTS,
    MOTIONS,
    SimConfig,
    annotations_from_packets,
    distance_to_robot,
    generate_dataset,
    generate_episode,
    intent_action_table,
    load_manifest,
    packet_from_json,
    packet_to_json,
    read_episode,
    split_counts,
    track_intents,
    trigger_by_dwell,
)


def stream_bytes(packets):
    return "".join(packet_to_json(p) + "\n" for p in packets)


def test_episode_deterministic():
    cfg = SimConfig(seed=11)
    a, ann_a = generate_episode(cfg, 5)
    b, ann_b = generate_episode(cfg, 5)
    assert stream_bytes(a) == stream_bytes(b)
    assert ann_a == ann_b
    assert stream_bytes(generate_episode(cfg, 6)[0]) != stream_bytes(a)


def test_pass_by_only_has_no_annotations():
    cfg = SimConfig(intents=("pass_by",))
    for seed in range(20):
        packets, anns = generate_episode(cfg, seed)
        assert anns == []
        assert all(p.annotation is None for p in packets)


def test_episode_shape():
    cfg = SimConfig()
    packets, _ = generate_episode(cfg, 0)
    assert len(packets) == cfg.frames == 60
    assert [p.frame_idx for p in packets] == list(range(60))
    assert [p.timestamp_ms for p in packets[:3]] == [0, 500, 1000]
    for p in packets:
        p.validate(cfg.feature_dim)


def test_annotation_rules_hold():
    cfg = SimConfig()
    seen = set()
    for seed in range(150):
        packets, anns = generate_episode(cfg, seed)
        intents = track_intents(cfg, seed)
        for a in anns:
            seen.add(a.intent)
            assert cfg.window - 1 <= a.trigger_frame_idx < cfg.frames
            frame = {o.track_id: o for o in packets[a.trigger_frame_idx].objects}
            assert set(a.target_track_ids) <= set(frame)
            assert all(intents[t] == a.intent for t in a.target_track_ids)
            if a.intent == "group_walk":
                assert 2 <= len(a.target_track_ids) <= 3
        starts = [a.trigger_frame_idx for a in anns]
        # no second annotation inside an interaction span
        assert all(b - a > cfg.span for a, b in zip(starts, starts[1:]))
    assert seen == set(INTENTS) - {"pass_by"}


def test_dwell_rule():
    still = np.array([[0.1, 0.5], [0.2, 0.5], [0.2, 0.5], [0.2, 0.501], [0.2, 0.5]])
    assert trigger_by_dwell(still) == 4
    assert trigger_by_dwell(np.array([[0.0, 0.5], [0.1, 0.5], [0.2, 0.5]])) is None
    assert float(distance_to_robot(np.array([0.5, 0.3]))[0]) == pytest.approx(0.3)


def test_features_are_linearly_separable_by_intent():
    cfg = SimConfig()
    feats, labels, seed = [], [], 0
    while len(feats) < 1000:
        packets, _ = generate_episode(cfg, seed)
        intents = track_intents(cfg, seed)
        seed += 1
        for p in packets:
            for o in p.objects:
                if o.is_person and len(feats) < 1000:
                    feats.append(o.feature)
                    labels.append(INTENTS.index(intents[o.track_id]))
    x = np.c_[np.asarray(feats), np.ones(len(feats))]
    y = np.asarray(labels)
    w = np.linalg.lstsq(x[:700], np.eye(len(INTENTS))[y[:700]], rcond=None)[0]
    acc = float((np.argmax(x[700:] @ w, axis=1) == y[700:]).mean())
    assert acc >= 0.95


def test_action_table():
    table = intent_action_table()
    assert len(table) == 8 and list(table) == list(INTENTS)
    assert len({a.utterance for a in table.values()}) == 8
    photo = table["photo_taking"]
    assert photo.expression_id == EXPRESSIONS["wink"] and photo.motion_id == MOTIONS["superman_pose"]
    assert "pose" in photo.utterance.lower()
    for a in table.values():
        assert 0 < a.expression_id < 32 and 0 < a.motion_id < 32


def test_split_arithmetic():
    assert split_counts(100) == (80, 10, 10)
    with pytest.raises(ConfigError):
        split_counts(2)


def test_dataset_manifest(tmp_path):
    m = generate_dataset(SimConfig(seed=2), 100, tmp_path / "a")
    counts = {k: v["episodes"] for k, v in m["splits"].items()}
    assert counts == {"train": 80, "val": 10, "test": 10}
    manifest, root = load_manifest(tmp_path / "a" / "manifest.json")
    assert manifest == m
    # roughly proportional positives per split
    total = sum(v["positives"] for v in m["splits"].values())
    for split, v in m["splits"].items():
        share = v["episodes"] / 100
        assert abs(v["positives"] - share * total) <= 0.2 * share * total + 3
    files = [f for v in m["splits"].values() for f in v["files"]]
    assert len(set(files)) == len(files)


def test_dataset_regenerates_identically(tmp_path):
    generate_dataset(SimConfig(seed=4), 12, tmp_path / "a")
    generate_dataset(SimConfig(seed=4), 12, tmp_path / "b")
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a == b
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_packet_json_round_trip(tmp_path):
    packets, anns = generate_episode(SimConfig(), 3, "x")
    line = packet_to_json(packets[20])
    again = packet_from_json(line)
    assert packet_to_json(again) == line
    d = json.loads(line)
    assert set(d) >= {"episode_id", "frame_idx", "timestamp_ms", "objects"}
    assert set(d["objects"][0]) == {"track_id", "class_id", "bbox", "feature"}
    path = tmp_path / "x.jsonl"
    path.write_text(stream_bytes(packets))
    back = read_episode(path)
    got = annotations_from_packets(back)
    assert [(a.trigger_frame_idx, a.target_track_ids, a.intent) for a in got] == \
           [(a.trigger_frame_idx, a.target_track_ids, a.intent) for a in anns]
    assert [a.action() for a in got] == [a.action() for a in anns]


def test_bad_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "manifest.json")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "missing.json")


def test_invalid_config():
    with pytest.raises(ConfigError):
        SimConfig(noise=-1)
    with pytest.raises(ConfigError):
        SimConfig(intents=("dance",))
