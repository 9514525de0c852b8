import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proactive_hri.errors import MetricError
from proactive_hri.evaluation import (
    InferenceMode,
    ScoredClip,
    best_f1_threshold,
    build_report,
    evaluate_scored,
    f1_score,
    pr_at_threshold,
    reports_to_csv,
    sweep,
    write_reports,
)
from oracles import brute_force_sweep, confusion, prf


def test_f1_arithmetic():
    assert f1_score(0.905, 0.851) == pytest.approx(0.877, abs=1e-3)
    assert f1_score(0.0, 0.0) == 0.0


def test_perfect_split():
    labels = [True, True, False, False]
    scores = [0.9, 0.8, 0.2, 0.1]
    for h in (0.3, 0.5, 0.8):
        r = pr_at_threshold(labels, scores, h)
        assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)
    assert sweep(labels, scores).ap == 1.0


def test_zero_denominators_flagged():
    r = pr_at_threshold([True, False], [0.1, 0.2], 0.5)
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    assert "precision" in r.degenerate and "f1" in r.degenerate


def random_set(rng, n):
    labels = rng.random(n) < rng.uniform(0.1, 0.6)
    labels[0], labels[1] = True, False
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding forces ties
    return labels.tolist(), scores.tolist()


def test_pr_matches_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        labels, scores = random_set(rng, 200)
        h = float(rng.random())
        r = pr_at_threshold(labels, scores, h)
        tp, fp, fn, tn = confusion(labels, scores, h)
        assert (r.tp, r.fp, r.fn, r.tn) == (tp, fp, fn, tn)
        assert (r.precision, r.recall, r.f1) == prf(tp, fp, fn)


def test_sweep_matches_brute_force_exactly():
    rng = np.random.default_rng(1)
    for _ in range(200):
        labels, scores = random_set(rng, int(rng.integers(2, 120)))
        got = sweep(labels, scores)
        rows, ap, ar, best_h, best_f = brute_force_sweep(labels, scores)
        assert got.thresholds.tolist() == [r[0] for r in rows]
        assert got.precision.tolist() == [r[1] for r in rows]
        assert got.recall.tolist() == [r[2] for r in rows]
        assert got.f1.tolist() == [r[3] for r in rows]
        assert (got.ap, got.ar, got.best_threshold, got.best_f1) == (ap, ar, best_h, best_f)


def test_tie_goes_to_higher_threshold():
    assert best_f1_threshold([True, False], [0.9, 0.1]) == (0.9, 1.0)


def test_single_polarity_rejected():
    with pytest.raises(MetricError):
        sweep([True, True], [0.2, 0.3])


def test_uninformative_scores_ap_near_prevalence():
    # every score is the label's Bernoulli parameter flipped: positives and negatives
    # share one score distribution, so precision sits at the prevalence everywhere
    rng = np.random.default_rng(2)
    prevalence = 0.2
    labels = rng.random(20000) < prevalence
    scores = rng.random(20000)
    res = sweep(labels.tolist(), scores.tolist())
    assert res.ap == pytest.approx(labels.mean(), abs=0.03)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=2, max_size=60), st.randoms())
def test_sweep_order_invariant_and_monotone(pairs, rnd):
    labels = [p[0] for p in pairs]
    scores = [p[1] for p in pairs]
    if all(labels) or not any(labels):
        return
    a = sweep(labels, scores)
    shuffled = list(zip(labels, scores))
    rnd.shuffle(shuffled)
    b = sweep([p[0] for p in shuffled], [p[1] for p in shuffled])
    assert (a.ap, a.ar, a.best_threshold, a.best_f1) == (b.ap, b.ar, b.best_threshold, b.best_f1)
    # thresholds descend, so recall never decreases along the curve
    assert all(x <= y for x, y in zip(a.recall, a.recall[1:]))


def clip(i, pos, score, any_, real, true=-1, src="sim"):
    return ScoredClip(f"c{i}", src, pos, score, any_, real, 3, true, [0.9, 0.2] if pos else [], [1, 0] if pos else [])


def test_mode_firing_and_report():
    null = 3
    clips = [clip(0, True, 0.9, 1, 1, 1), clip(1, True, 0.8, null, 2, 2), clip(2, False, 0.7, 0, 0),
             clip(3, False, 0.1, 2, 2)]
    rep = {m: build_report(clips, m, 0.5) for m in InferenceMode}
    assert (rep[InferenceMode.TRIGGER_ONLY].tp, rep[InferenceMode.TRIGGER_ONLY].fp) == (2, 1)
    assert (rep[InferenceMode.ACTOR_ONLY].tp, rep[InferenceMode.ACTOR_ONLY].fp) == (1, 2)
    assert (rep[InferenceMode.TRIGGER_ACTOR].tp, rep[InferenceMode.TRIGGER_ACTOR].fp) == (1, 1)
    assert rep[InferenceMode.TRIGGER_ONLY].action_top1 == 1.0
    assert rep[InferenceMode.TRIGGER_ONLY].target_f1 == 1.0
    for c in clips:
        assert c.fired(InferenceMode.TRIGGER_ACTOR, 0.5) == (
            c.fired(InferenceMode.TRIGGER_ONLY, 0.5) and c.fired(InferenceMode.ACTOR_ONLY, 0.5))


def test_evaluate_scored_groups_and_writes(tmp_path):
    clips = [clip(0, True, 0.9, 1, 1, 1, "a"), clip(1, False, 0.2, 0, 0, -1, "a"),
             clip(2, True, 0.6, 2, 2, 2, "b"), clip(3, False, 0.7, 3, 1, -1, "b")]
    ev = evaluate_scored(clips, {"trigger": 0.5, "target": 0.5})
    assert {r.source for r in ev.reports} == {"all", "a", "b"}
    assert ev.report("trigger-only", "b").fp == 1
    again = evaluate_scored(list(reversed(clips)), {"trigger": 0.5, "target": 0.5})
    assert reports_to_csv(ev.reports) == reports_to_csv(again.reports)
    paths = write_reports(ev, tmp_path)
    for key in ("csv", "json", "pr_curve", "pr_figure", "score_figure"):
        assert paths[key].exists() and paths[key].stat().st_size > 0
    assert paths["pr_curve"].read_text().splitlines()[0] == "threshold,precision,recall"


def test_mode_parsing():
    assert InferenceMode.parse("TriggerOnly") is InferenceMode.TRIGGER_ONLY
    assert InferenceMode.parse("trigger_actor") is InferenceMode.TRIGGER_ACTOR
    with pytest.raises(MetricError):
        InferenceMode.parse("sometimes")
