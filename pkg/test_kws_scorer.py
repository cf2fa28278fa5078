import json
import math

import numpy as np
import pytest

from dnn import PosteriorFrame
from kws_scorer import (DetectionEvent, FrameGate, RefractoryDetector, ScoringConfig, Sensitivity, SmoothingConfig,
                        StreamingScorer, batch_scores, confidence_score, detect, detected_frames,
                        events_from_scores, score_stream, smooth_matrix, smooth_posteriors, write_events_jsonl)
from telemetry import ManeuverMode


def _naive_smooth(P, w_s):
    out = np.zeros_like(P)
    for j in range(1, P.shape[0] + 1):
        h = max(1, j - w_s + 1)
        total = np.zeros(P.shape[1])
        for k in range(h, j + 1):
            total += P[k - 1]
        out[j - 1] = total / (j - h + 1)
    return out


def _naive_score(S, w_max, j):
    n = S.shape[1]
    h = max(1, j - w_max + 1)
    product = 1.0
    for i in range(1, n):
        product *= max(S[k - 1, i] for k in range(h, j + 1))
    return product ** (1.0 / (n - 1))


def _random_posteriors(rng, n_frames=None, n_labels=None):
    n_labels = n_labels or int(rng.integers(2, 6))
    n_frames = n_frames or int(rng.integers(1, 51))
    return rng.dirichlet(np.ones(n_labels), size=n_frames)


def test_smoothing_matches_direct_sum():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        P = _random_posteriors(rng)
        w_s = int(rng.integers(1, 11))
        np.testing.assert_allclose(smooth_matrix(P, SmoothingConfig(w_s=w_s)), _naive_smooth(P, w_s), rtol=1e-12)


def test_scores_match_direct_evaluation():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        S = _random_posteriors(rng)
        w_max = int(rng.integers(1, 11))
        j = int(rng.integers(1, S.shape[0] + 1))
        assert confidence_score(S, ScoringConfig(w_max=w_max), j) == pytest.approx(_naive_score(S, w_max, j),
                                                                                   rel=1e-12, abs=1e-300)


def test_smoothing_examples():
    label = np.array([0.2, 0.4, 0.9])
    P = np.column_stack([1 - label, label])
    smoothed = smooth_posteriors(P, SmoothingConfig(w_s=2))
    assert smoothed[2].probs[1] == pytest.approx(0.65)
    assert smoothed[0].probs[1] == pytest.approx(0.2)

    constant = np.tile([0.1, 0.6, 0.3], (8, 1))
    np.testing.assert_allclose(smooth_matrix(constant, SmoothingConfig(w_s=5)), constant, rtol=1e-15)
    np.testing.assert_array_equal(smooth_matrix(P, SmoothingConfig(w_s=1)), P)


def test_smoothing_keeps_distributions_and_indices():
    rng = np.random.default_rng(2)
    frames = [PosteriorFrame(p, 100 + k) for k, p in enumerate(_random_posteriors(rng, 40, 3))]
    smoothed = smooth_posteriors(frames, SmoothingConfig(w_s=7))
    assert [f.frame_index for f in smoothed] == list(range(100, 140))
    for f in smoothed:
        assert abs(f.probs.sum() - 1.0) < 1e-9
    with pytest.raises(ValueError):
        smooth_posteriors(np.empty((0, 3)))


def test_confidence_score_examples():
    S = np.array([[0.1, 0.8, 0.1], [0.5, 0.0, 0.5]])
    assert confidence_score(S, ScoringConfig(w_max=2), 2) == pytest.approx(math.sqrt(0.4), abs=1e-12)
    assert confidence_score(S, ScoringConfig(w_max=1), 2) == 0.0

    two_labels = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]])
    assert confidence_score(two_labels, ScoringConfig(w_max=3), 3) == 0.8


def test_confidence_score_errors():
    with pytest.raises(ValueError):
        confidence_score(np.ones((3, 1)), None, 1)
    with pytest.raises(ValueError):
        confidence_score(np.full((3, 2), 0.5), None, 0)
    with pytest.raises(ValueError):
        confidence_score(np.full((3, 2), 0.5), None, 4)


def test_score_is_bounded_by_keyword_maxima():
    rng = np.random.default_rng(3)
    for _ in range(200):
        S = _random_posteriors(rng, n_labels=int(rng.integers(2, 6)))
        j = S.shape[0]
        score = confidence_score(S, ScoringConfig(w_max=10), j)
        window = S[max(0, j - 10):j, 1:]
        assert 0.0 <= score <= window.max(axis=0).max() + 1e-15 <= 1.0 + 1e-15


def test_detect_threshold_mapping():
    assert detect(0.6, 0.5)
    assert not detect(0.4, Sensitivity(0.5))
    assert detect(0.5, 0.5)
    assert detect(0.0, 1.0)
    assert Sensitivity(0.58).threshold == pytest.approx(0.42)
    with pytest.raises(ValueError):
        Sensitivity(1.5)


def test_detection_is_monotone_in_sensitivity():
    rng = np.random.default_rng(4)
    for _ in range(200):
        scores = rng.random(100)
        low, high = sorted(rng.random(2))
        assert set(detected_frames(scores, low)) <= set(detected_frames(scores, high))


def test_no_crossing_no_events():
    P = np.tile([0.9, 0.1], (50, 1))
    assert list(score_stream(P, sensitivity_source=[0.5] * 50)) == []


def test_plateau_and_refractory():
    label = np.r_[np.full(10, 0.1), np.full(20, 0.9), np.full(5, 0.1), np.full(16, 0.9)]
    P = np.column_stack([1 - label, label])
    events = list(score_stream(P, SmoothingConfig(w_s=1), ScoringConfig(w_max=1), [0.5] * len(P),
                               refractory_frames=30))
    # second plateau starts at 35, 25 frames after the first event; the detector re-arms at 40
    assert [e.frame_index for e in events] == [10, 40]
    assert events[0].timestamp == pytest.approx(0.1)

    single = list(score_stream(P[:35], SmoothingConfig(w_s=1), ScoringConfig(w_max=1), [0.5] * 35,
                               refractory_frames=30))
    assert [e.frame_index for e in single] == [10]


def test_refractory_detector_zero_period():
    refractory = RefractoryDetector(0)
    assert all(refractory.update(k, True) for k in range(5))
    with pytest.raises(ValueError):
        RefractoryDetector(-1)


def test_stream_matches_batch():
    rng = np.random.default_rng(5)
    P = rng.dirichlet([4.0, 1.0, 1.0], size=1000)
    sens = rng.uniform(0.5, 0.95, 1000)
    mask = rng.random(1000) > 0.1
    smoothing, scoring = SmoothingConfig(w_s=30), ScoringConfig(w_max=100)

    batch = batch_scores(P, smoothing, scoring, mask)
    scorer = StreamingScorer(3, smoothing, scoring)
    streamed = np.array([scorer.push(p, bool(m)) for p, m in zip(P, mask)])
    np.testing.assert_array_equal(streamed, batch)

    gates = [FrameGate(float(s), ManeuverMode.NORMAL, bool(m)) for s, m in zip(sens, mask)]
    timestamps = [0.0 + k * 0.01 for k in range(1000)]
    expected = events_from_scores(batch, gates, timestamps, refractory_frames=20)
    actual = list(score_stream(P, smoothing, scoring, gates, refractory_frames=20))
    assert actual == expected
    assert len(expected) > 0


def test_streaming_scorer_reset_and_shape_check():
    scorer = StreamingScorer(2, SmoothingConfig(w_s=3), ScoringConfig(w_max=3))
    first = [scorer.push([0.2, 0.8]) for _ in range(4)]
    scorer.reset()
    assert scorer.frames_seen == 0
    assert scorer.push([0.2, 0.8]) == first[0]
    with pytest.raises(ValueError):
        scorer.push([0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        StreamingScorer(1)


def test_score_stream_needs_sensitivities():
    P = np.tile([0.5, 0.5], (3, 1))
    with pytest.raises(ValueError):
        list(score_stream(P))
    with pytest.raises(ValueError, match="exhausted"):
        list(score_stream(P, sensitivity_source=[0.5]))


def test_events_jsonl(tmp_path):
    event = DetectionEvent(12, 0.12, 0.75, 0.58, ManeuverMode.SENSITIVE)
    path = write_events_jsonl(tmp_path / "events.jsonl", [event])
    record = json.loads(path.read_text().strip())
    assert record == {"frame_index": 12, "timestamp_s": 0.12, "score": 0.75, "sensitivity": 0.58,
                      "maneuver_state": "sensitive"}
    with pytest.raises(ValueError):
        DetectionEvent(0, 0.0, 1.5, 0.5)
