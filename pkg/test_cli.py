import csv
import io
import json
import shutil

import numpy as np
import pytest

import config
from audio_io import save_wav
from cli import EXIT_DETECTED, EXIT_ERROR, EXIT_NO_DETECTION, build_parser, main, resolve_config
from dnn import Topology, init_params, load_network
from dsp_frontend import AudioBuffer
from telemetry import derive_states, read_trace_csv


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["make-corpus", "--out", str(out), "--n-positive", "3", "--n-negative", "3", "--seed", "5"]) == 0
    return out / "manifest.json"


def test_config_dump(capsys):
    assert main(["config", "dump"]) == 0
    dumped = json.loads(capsys.readouterr().out)
    assert dumped["sen_1"] == 0.495 and dumped["sen_2"] == 0.58
    assert dumped["w_s"] == 30 and dumped["w_max"] == 100


def test_flag_beats_file_beats_default(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"sen_1": 0.5, "sen_2": 0.6}))
    args = build_parser().parse_args(["detect", "x.wav", "--config", str(path), "--sen-1", "0.52"])
    run = resolve_config(args)
    assert (run.sen_1, run.sen_2, run.w_max) == (0.52, 0.6, config.W_MAX)


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"sensitivity": 0.5}))
    assert main(["config", "dump", "--config", str(path)]) == EXIT_ERROR


def test_make_corpus_is_reproducible(small_manifest, tmp_path):
    assert len(list((small_manifest.parent / "wav").glob("*_pos.wav"))) == 3
    assert len(list((small_manifest.parent / "wav").glob("*_neg.wav"))) == 3
    again = tmp_path / "again"
    assert main(["make-corpus", "--out", str(again), "--n-positive", "3", "--n-negative", "3", "--seed", "5"]) == 0
    assert (again / "manifest.json").read_bytes() == small_manifest.read_bytes()

    negatives = tmp_path / "neg"
    assert main(["make-corpus", "--out", str(negatives), "--n-positive", "0", "--n-negative", "2"]) == 0
    assert not list((negatives / "wav").glob("*_pos.wav"))


def test_train_zero_epochs_keeps_initialization(small_manifest, tmp_path, capsys):
    argv = ["train", "--manifest", str(small_manifest), "--epochs", "0", "--hidden-layers", "1",
            "--hidden-nodes", "8", "--vad-components", "2", "--em-iters", "5"]
    assert main(argv + ["--model-dir", str(tmp_path / "a")]) == 0
    assert "frame_accuracy=" in capsys.readouterr().out
    assert main(argv + ["--model-dir", str(tmp_path / "b")]) == 0

    first = (tmp_path / "a" / config.DNN_FILE).read_bytes()
    assert first == (tmp_path / "b" / config.DNN_FILE).read_bytes()
    trained = load_network(tmp_path / "a" / config.DNN_FILE)
    initial = init_params(Topology(1640, 1, 8, 3), config.SEED)
    for a, b in zip(trained.layers, initial.layers):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)


def test_train_missing_manifest(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "none.json"), "--model-dir", str(tmp_path)]) == EXIT_ERROR


def test_detect_exit_codes(model_dir, pipeline, eval_corpus, tmp_path, capsys):
    positive = next(u for u in eval_corpus.positives if pipeline.run_single(u.audio, 0.58))
    wav = save_wav(positive.audio, tmp_path / "positive.wav")
    assert main(["detect", str(wav), "--model-dir", str(model_dir), "--sen-1", "0.58"]) == EXIT_DETECTED
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and json.loads(lines[0])["sensitivity"] == 0.58

    silent = save_wav(AudioBuffer(np.zeros(16000)), tmp_path / "silent.wav")
    events = tmp_path / "events.jsonl"
    argv = ["detect", str(silent), "--model-dir", str(model_dir), "--events", str(events)]
    assert main(argv) == EXIT_NO_DETECTION
    assert events.read_text() == ""

    assert main(["detect", str(tmp_path / "missing.wav"), "--model-dir", str(model_dir)]) == EXIT_ERROR


def test_simulate_drive_outputs(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate-drive", "u_turn", "--out", str(a), "--seed", "3", "--noise-sigma", "0.5"]) == 0
    assert main(["simulate-drive", "u_turn", "--out", str(b), "--seed", "3", "--noise-sigma", "0.5"]) == 0
    for name in ("trace.csv", "labels.csv", "states.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

    clean = tmp_path / "clean"
    assert main(["simulate-drive", "u_turn", "--out", str(clean)]) == 0
    speeds = [s.speed for s in derive_states(read_trace_csv(clean / "trace.csv"))]
    assert min(speeds) < 0.2 * 12.0

    straight = tmp_path / "straight"
    assert main(["simulate-drive", "straight", "--out", str(straight)]) == 0
    assert '"sensitive"' not in (straight / "states.jsonl").read_text()


def test_sweep_empty_grid_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["sweep", "single", "--manifest", str(tmp_path / "m.json"), "--sensitivities"])
    assert info.value.code == 2


def test_sweep_writes_results(small_manifest, model_dir, tmp_path):
    out = tmp_path / "sweep"
    argv = ["sweep", "both", "--manifest", str(small_manifest), "--model-dir", str(model_dir), "--out", str(out),
            "--sensitivities", "0.55", "--pairs", "0.5:0.55", "0.5:0.58", "--inside-fraction", "0.5"]
    assert main(argv) == 0
    single = list(csv.reader(open(out / "single_results.csv", newline="")))
    double = list(csv.reader(open(out / "double_results.csv", newline="")))
    assert len(single) == 2 and len(double) == 3
    assert [row[0] for row in double[1:]] == ["1", "2"]
    summary = list(csv.DictReader(open(out / "summary.csv", newline="")))
    assert [row["system"] for row in summary] == ["single", "fused", "improvement_pct"]
    assert float(summary[0]["mse_recall"]) == 0.0


def test_recall_model_row(capsys):
    argv = ["recall-model", "--p1", "0.4733", "--p2", "0.6", "--p3", "0.9", "--k", "0.3", "--trials", "1000000"]
    assert main(argv) == 0
    row = next(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert float(row["fused"]) == pytest.approx(0.51638, abs=1e-5)
    assert abs(float(row["monte_carlo"]) - float(row["fused"])) < 0.002

    assert main(["recall-model", "--p1", "0.5", "--p2", "0.5", "--p3", "0.9", "--k", "0.3", "--trials", "10"]) == 0
    row = next(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert float(row["gain"]) == 0.0


def test_malformed_manifest_exits_with_error(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    assert main(["train", "--manifest", str(empty), "--model-dir", str(tmp_path / "m")]) == EXIT_ERROR

    listing = tmp_path / "list.json"
    listing.write_text("[]")
    assert main(["train", "--manifest", str(listing), "--model-dir", str(tmp_path / "m")]) == EXIT_ERROR

    assert main(["train", "--manifest", str(tmp_path), "--model-dir", str(tmp_path / "m")]) == EXIT_ERROR


def test_non_object_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("[1, 2, 3]")
    assert main(["config", "dump", "--config", str(path)]) == EXIT_ERROR


def test_malformed_gmm_file(small_manifest, model_dir, tmp_path):
    broken = tmp_path / "models"
    shutil.copytree(model_dir, broken)
    (broken / config.VAD_SPEECH_FILE).write_text(json.dumps({"dim": 26}))
    argv = ["sweep", "single", "--manifest", str(small_manifest), "--model-dir", str(broken),
            "--sensitivities", "0.5", "--out", str(tmp_path / "sweep")]
    assert main(argv) == EXIT_ERROR
