import csv
import json
import math

import numpy as np
import pytest

import config
from dsp_frontend import AudioBuffer
from eval_harness import (SUBWORD_TONES, CorpusSpec, Metrics, Segment, SweepRow, add_noise, add_noise_with_report,
                          assign_drive_timestamps, build_training_set, evaluate, frame_labels, load_corpus, mix_noise,
                          relative_improvement, render_subword, summarize, summarize_rows, sweep_double, sweep_single,
                          synthesize_corpus, with_timestamps, write_corpus, write_summary_csv, write_sweep_csv)
from fusion import align_telemetry
from telemetry import ManeuverMode, generate_trajectory, maneuver_states


def _sine(n=16000, amplitude=0.3, freq=440.0):
    return AudioBuffer(amplitude * np.sin(2 * np.pi * freq * np.arange(n) / 16000))


def _measured_snr(clean, noisy):
    return 10 * math.log10(np.mean(clean ** 2) / np.mean((noisy - clean) ** 2))


def test_default_corpus_counts(eval_corpus):
    assert len(eval_corpus) == 100
    assert len(eval_corpus.positives) == 50 and len(eval_corpus.negatives) == 50
    assert {u.variant for u in eval_corpus.negatives} == {"hey_ato", "hey_tom", "hello_atom", "filler"}
    for utt in eval_corpus.utterances:
        assert 5.0 - 0.1 <= utt.snr_db <= 10.0 + 0.1


def test_corpus_is_reproducible():
    spec = CorpusSpec(n_positive=3, n_negative=3, seed=11)
    a, b = synthesize_corpus(spec), synthesize_corpus(spec)
    for x, y in zip(a.utterances, b.utterances):
        np.testing.assert_array_equal(x.audio.samples, y.audio.samples)
        assert x.segments == y.segments


def test_seeds_change_samples_not_structure():
    a = synthesize_corpus(CorpusSpec(n_positive=3, n_negative=4, seed=1))
    b = synthesize_corpus(CorpusSpec(n_positive=3, n_negative=4, seed=2))
    assert [(u.label, u.variant) for u in a.utterances] == [(u.label, u.variant) for u in b.utterances]
    assert not np.array_equal(a.utterances[0].audio.samples[:1000], b.utterances[0].audio.samples[:1000])


def test_negatives_only_corpus():
    corpus = synthesize_corpus(CorpusSpec(n_positive=0, n_negative=4))
    assert len(corpus) == 4 and corpus.positives == []


def test_positive_segments_carry_keyword_labels():
    utt = synthesize_corpus(CorpusSpec(n_positive=1, n_negative=0)).utterances[0]
    assert [(s.word, s.label) for s in utt.segments] == [("HEY", 1), ("ATOM", 2)]
    labels = utt.frame_labels()
    assert set(np.unique(labels)) == {0, 1, 2}
    assert np.all(utt.speech_labels()[labels > 0] == 1)


def test_corpus_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(snr_range_db=(10.0, 5.0))
    with pytest.raises(ValueError):
        CorpusSpec(n_positive=-1)
    with pytest.raises(ValueError):
        CorpusSpec(negative_variant_ids=("hey_you",))


def test_frame_labels_use_frame_centres():
    labels = frame_labels([Segment("HEY", 0.1, 0.2, 1)], duration_s=0.3)
    # centres at 0.015 + 0.01 k
    assert len(labels) == 28
    assert np.flatnonzero(labels).tolist() == list(range(9, 19))


@pytest.mark.parametrize("target", [5.0, 7.5, 10.0])
def test_add_noise_hits_target_snr(target):
    clean = _sine()
    noisy = add_noise(clean, target, seed=3)
    assert abs(_measured_snr(clean.samples, noisy.samples) - target) <= 0.1


def test_add_noise_hits_random_targets_on_chords():
    rng = np.random.default_rng(12)
    words = list(SUBWORD_TONES)
    for i in range(100):
        first, second = rng.choice(len(words), size=2, replace=False)
        pitch = rng.uniform(0.9, 1.1)
        chord = np.concatenate([np.zeros(3200), render_subword(words[first], 0.3, pitch, rng), np.zeros(1280),
                                render_subword(words[second], 0.3, pitch, rng), np.zeros(3200)])
        target = rng.uniform(5.0, 10.0)
        report = add_noise_with_report(AudioBuffer(chord), target, seed=i)
        assert abs(report.achieved_snr_db - target) <= 0.1
        if report.clipped_fraction == 0.0:
            assert abs(_measured_snr(chord, report.audio.samples) - target) <= 0.1


def test_add_noise_reports_clipping():
    report = add_noise_with_report(AudioBuffer(np.full(1000, 0.99)), 0.0, seed=0)
    assert 0.0 < report.clipped_fraction < 1.0
    assert np.all(np.abs(report.audio.samples) <= 1.0)
    clean = add_noise_with_report(_sine(amplitude=0.1), 20.0, seed=0)
    assert clean.clipped_fraction == 0.0
    np.testing.assert_array_equal(clean.audio.samples, add_noise(_sine(amplitude=0.1), 20.0, seed=0).samples)


def test_add_noise_vanishes_at_high_snr():
    clean = _sine(amplitude=0.1)
    noisy = add_noise(clean, 60.0, seed=0)
    assert np.max(np.abs(noisy.samples - clean.samples)) < 1e-3


def test_add_noise_is_seeded():
    clean = _sine()
    np.testing.assert_array_equal(add_noise(clean, 5.0, seed=9).samples, add_noise(clean, 5.0, seed=9).samples)
    assert not np.array_equal(add_noise(clean, 5.0, seed=9).samples, add_noise(clean, 5.0, seed=10).samples)


def test_add_noise_rejects_silence():
    with pytest.raises(ValueError):
        add_noise(AudioBuffer(np.zeros(1600)), 5.0)


def test_mix_noise_reports_clipping():
    _, _, clipped = mix_noise(np.full(1000, 0.99), 0.0, np.random.default_rng(0))
    assert 0.0 < clipped < 1.0


def test_metrics_examples():
    m = Metrics(tp=45, fp=5, fn=5, tn=45)
    assert m.precision == pytest.approx(0.9) and m.recall == pytest.approx(0.9)
    silent = Metrics.from_outcomes([True] * 3 + [False] * 3, [False] * 6)
    assert silent.precision == 1.0 and silent.recall == 0.0
    everything = Metrics.from_outcomes([True] * 3 + [False] * 3, [True] * 6)
    assert everything.recall == 1.0 and everything.precision == 0.5


def test_evaluate_counts_activations():
    corpus = synthesize_corpus(CorpusSpec(n_positive=2, n_negative=2))
    assert evaluate(lambda u: [], corpus) == Metrics(0, 0, 2, 2)
    assert evaluate(lambda u: [object()] if u.is_positive else [], corpus) == Metrics(2, 0, 0, 2)


def test_summarize_examples():
    assert summarize([0.9, 0.9, 0.9]) == pytest.approx((0.9, 0.0))
    mean, mse = summarize([0.8, 1.0])
    assert mean == pytest.approx(0.9) and mse == pytest.approx(0.01)
    assert summarize([0.8, 1.0], ddof=1)[1] == pytest.approx(0.02)
    assert summarize([0.4]) == (0.4, 0.0)
    with pytest.raises(ValueError):
        summarize([])


def test_relative_improvement():
    single = summarize_rows([SweepRow(1, 0.5, 0.5, Metrics(8, 2, 2, 8)), SweepRow(2, 0.6, 0.6, Metrics(9, 3, 1, 7))])
    fused = summarize_rows([SweepRow(1, 0.5, 0.6, Metrics(9, 2, 1, 8))])
    improvement = relative_improvement(single, fused)
    assert improvement["mean_recall"] == pytest.approx((0.9 - 0.85) / 0.85 * 100)
    assert improvement["mse_recall"] == pytest.approx(100.0)
    assert relative_improvement(fused, fused)["mse_precision"] is None


def test_sweep_single_is_monotone(pipeline, eval_corpus):
    summary = sweep_single(config.SINGLE_SENSITIVITIES, eval_corpus, pipeline)
    assert len(summary.rows) == 6
    tp = [r.metrics.tp for r in summary.rows]
    fp = [r.metrics.fp for r in summary.rows]
    recall = [r.metrics.recall for r in summary.rows]
    assert tp == sorted(tp) and fp == sorted(fp) and recall == sorted(recall)
    assert summary.mean_recall == pytest.approx(np.mean(recall))
    with pytest.raises(ValueError):
        sweep_single([], eval_corpus, pipeline)


def test_sweep_double_rejects_equal_pair(pipeline, eval_corpus):
    with pytest.raises(ValueError, match="sen_1 < sen_2"):
        sweep_double([(0.55, 0.55)], eval_corpus, [], pipeline, scored=[])


def test_drive_placement_and_double_sweep(pipeline, eval_corpus):
    states = maneuver_states(generate_trajectory("u_turn").samples)
    stamps = assign_drive_timestamps(eval_corpus, states, inside_fraction=0.3, seed=0)
    placed = with_timestamps(eval_corpus, stamps)

    inside = 0
    for utt in placed.positives:
        ends = [utt.timestamp_s, utt.timestamp_s + utt.audio.duration - 0.01]
        modes = {c.maneuver_state for c in align_telemetry(ends, states)}
        inside += modes == {ManeuverMode.SENSITIVE}
    assert inside == 15

    summary = sweep_double(config.SENSITIVITY_PAIRS, placed, states, pipeline)
    assert len(summary.rows) == len(config.SENSITIVITY_PAIRS) == 15


def test_drive_placement_needs_states(eval_corpus):
    with pytest.raises(ValueError):
        assign_drive_timestamps(eval_corpus, [])


def test_training_set_has_all_labels(train_corpus):
    data = build_training_set(train_corpus)
    assert set(np.unique(data.dnn.labels)) == {0, 1, 2}
    assert data.dnn.inputs.shape[1] == 1640
    assert data.speech.shape[1] == data.nonspeech.shape[1] == 26


def test_trained_models_fit_training_frames(trained_models):
    assert trained_models.frame_accuracy >= 0.95
    assert np.isfinite(trained_models.final_loss)


def test_corpus_manifest_round_trip(tmp_path):
    corpus = synthesize_corpus(CorpusSpec(n_positive=2, n_negative=2, seed=4))
    manifest = write_corpus(corpus, tmp_path / "corpus")
    assert (tmp_path / "corpus" / "wav" / "utt000_pos.wav").exists()
    loaded = load_corpus(manifest)
    assert loaded.spec == corpus.spec
    for a, b in zip(corpus.utterances, loaded.utterances):
        assert (a.uid, a.label, a.variant, a.segments) == (b.uid, b.label, b.variant, b.segments)
        assert (a.snr_db, a.clipped_fraction) == (b.snr_db, b.clipped_fraction)
        np.testing.assert_allclose(b.audio.samples, a.audio.samples, atol=1 / 32768)
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nowhere" / "manifest.json")


def test_malformed_manifest_names_the_problem(tmp_path):
    manifest = write_corpus(synthesize_corpus(CorpusSpec(n_positive=1, n_negative=1, seed=4)), tmp_path / "c")
    payload = json.loads(manifest.read_text())
    del payload["utterances"][1]["wav"]
    manifest.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match=r"'wav' \(utterance 1\)"):
        load_corpus(manifest)

    manifest.write_text("{}")
    with pytest.raises(ValueError, match="header"):
        load_corpus(manifest)
    manifest.write_text("[1, 2]")
    with pytest.raises(ValueError, match="JSON object"):
        load_corpus(manifest)


def test_result_csvs(tmp_path):
    summary = summarize_rows([SweepRow(1, 0.5, 0.5, Metrics(8, 2, 2, 8))])
    with open(write_sweep_csv(tmp_path / "single.csv", summary), newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["config_id", "sen_1", "sen_2", "tp", "fp", "fn", "tn", "precision", "recall"]
    assert rows[1][:7] == ["1", "0.5", "0.5", "8", "2", "2", "8"]

    path = write_summary_csv(tmp_path / "summary.csv", {"single": summary, "double": summary},
                             relative_improvement(summary, summary))
    lines = path.read_text().splitlines()
    assert lines[0] == "system,mean_precision,mse_precision,mean_recall,mse_recall"
    assert lines[-1].startswith("improvement_pct,0.0,")
