"""Synthetic keyword corpora, model training and precision / recall sweeps over sensitivity grids."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

import config
from audio_io import load_wav, save_wav
from dnn import NetworkParams, Topology, TrainingSet, frame_accuracy, train_sgd
from dsp_frontend import AudioBuffer, FeatureExtractor
from fusion import KwsPipeline, ScoredAudio, SensitivityPair
from kws_scorer import DetectionEvent
from telemetry import ManeuverState, sensitive_runs
from vad import VadConfig, VoiceActivityDetector, fit_gmm_em

logger = logging.getLogger(__name__)

# Sub-word "chords": three tones each (Hz). Confusable variants share at most
# one tone with the keyword sub-word they imitate.
SUBWORD_TONES = {
    "HEY": (500.0, 1250.0, 2600.0),
    "ATOM": (750.0, 1800.0, 3400.0),
    "ATO": (750.0, 1500.0, 2900.0),
    "TOM": (1100.0, 2200.0, 3400.0),
    "HELLO": (500.0, 1600.0, 2300.0),
    "UM": (400.0, 950.0, 2000.0),
    "RADIO": (900.0, 1450.0, 3100.0),
    "NAVI": (600.0, 2050.0, 2750.0),
    "MUSIC": (1300.0, 2400.0, 3700.0),
}
FILLER_WORDS = ("UM", "RADIO", "NAVI", "MUSIC")
TONE_AMPLITUDES = (0.25, 0.15, 0.1)

# (sub-word, frame label) sequences; label 0 is filler
UTTERANCE_TEMPLATES = {
    "hey_atom": (("HEY", 1), ("ATOM", 2)),
    "hey_ato": (("HEY", 1), ("ATO", 0)),
    "hey_tom": (("HEY", 1), ("TOM", 0)),
    "hello_atom": (("HELLO", 0), ("ATOM", 2)),
    "filler": None,
}

SUBWORD_S = 0.3
GAP_S = 0.08
EDGE_S = 0.02
SILENCE_RANGE_S = (0.2, 0.4)

SWEEP_HEADER = ["config_id", "sen_1", "sen_2", "tp", "fp", "fn", "tn", "precision", "recall"]
SUMMARY_HEADER = ["system", "mean_precision", "mse_precision", "mean_recall", "mse_recall"]


class CorpusSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_positive: int = Field(default=config.N_POSITIVE, ge=0)
    n_negative: int = Field(default=config.N_NEGATIVE, ge=0)
    snr_range_db: tuple[float, float] = config.SNR_RANGE_DB
    keyword_template_id: str = "hey_atom"
    negative_variant_ids: tuple[str, ...] = ("hey_ato", "hey_tom", "hello_atom", "filler")
    tempo_range: tuple[float, float] = (0.8, 1.2)
    pitch_range: tuple[float, float] = (0.97, 1.03)
    seed: int = config.SEED

    @field_validator("snr_range_db", "tempo_range", "pitch_range")
    @classmethod
    def _ordered(cls, value):
        if value[0] > value[1]:
            raise ValueError(f"Range low {value[0]} exceeds high {value[1]}")
        return value

    @field_validator("keyword_template_id")
    @classmethod
    def _known_keyword(cls, value):
        if UTTERANCE_TEMPLATES.get(value) is None:
            raise ValueError(f"Unknown keyword template {value!r}")
        return value

    @field_validator("negative_variant_ids")
    @classmethod
    def _known_variants(cls, value):
        unknown = [v for v in value if v not in UTTERANCE_TEMPLATES]
        if unknown or not value:
            raise ValueError(f"Unknown or empty negative variants: {unknown}")
        return value


@dataclass(frozen=True)
class Segment:
    word: str
    start_s: float
    end_s: float
    label: int

    def to_dict(self) -> dict:
        return {"word": self.word, "start_s": self.start_s, "end_s": self.end_s, "label": self.label}


@dataclass(frozen=True, eq=False)
class Utterance:
    uid: str
    audio: AudioBuffer
    label: str  # positive | negative
    variant: str
    segments: tuple[Segment, ...]
    snr_db: float
    clipped_fraction: float = 0.0
    timestamp_s: float | None = None

    @property
    def is_positive(self) -> bool:
        return self.label == "positive"

    def frame_labels(self, frame_len_ms: float = config.FRAME_LEN_MS, hop_ms: float = config.HOP_MS,
                     n_frames: int | None = None) -> np.ndarray:
        return frame_labels(self.segments, self.audio.duration, frame_len_ms, hop_ms, n_frames=n_frames)

    def speech_labels(self, frame_len_ms: float = config.FRAME_LEN_MS, hop_ms: float = config.HOP_MS,
                      n_frames: int | None = None) -> np.ndarray:
        return frame_labels(self.segments, self.audio.duration, frame_len_ms, hop_ms, True, n_frames)


@dataclass(eq=False)
class TestCorpus:
    utterances: list[Utterance]
    spec: CorpusSpec = field(default_factory=CorpusSpec)

    __test__ = False  # not a pytest class

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def positives(self) -> list[Utterance]:
        return [u for u in self.utterances if u.is_positive]

    @property
    def negatives(self) -> list[Utterance]:
        return [u for u in self.utterances if not u.is_positive]


def frame_labels(segments: Sequence[Segment], duration_s: float, frame_len_ms: float = config.FRAME_LEN_MS,
                 hop_ms: float = config.HOP_MS, speech_only: bool = False,
                 n_frames: int | None = None) -> np.ndarray:
    """Label of the segment holding each frame's centre (0 elsewhere); 0/1 speech flags if `speech_only`."""
    if n_frames is None:
        len_ms = duration_s * 1000.0
        n_frames = int(math.floor((len_ms - frame_len_ms) / hop_ms + 1e-9)) + 1 if len_ms >= frame_len_ms else 0
    centres = (np.arange(n_frames) * hop_ms + frame_len_ms / 2.0) / 1000.0
    labels = np.zeros(n_frames, dtype=np.int64)
    for seg in segments:
        inside = (centres >= seg.start_s) & (centres < seg.end_s)
        labels[inside] = 1 if speech_only else seg.label
    return labels


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_subword(word: str, duration_s: float, pitch: float, rng: np.random.Generator,
                   sample_rate: int = config.SAMPLE_RATE) -> np.ndarray:
    """Three-tone chord with raised-cosine on/off ramps."""
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    chord = np.zeros(n)
    for freq, amp, phase in zip(SUBWORD_TONES[word], TONE_AMPLITUDES, phases):
        chord += amp * np.sin(2.0 * np.pi * freq * pitch * t + phase)
    edge = min(int(round(EDGE_S * sample_rate)), n // 2)
    if edge > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
        chord[:edge] *= ramp
        chord[n - edge:] *= ramp[::-1]
    return chord


def mix_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> tuple[np.ndarray, float, float]:
    """
    Add white Gaussian noise at an exact SNR over the whole signal.

    Returns:
        (mixed samples clipped to [-1, 1], achieved SNR in dB, clipped fraction)
    """
    samples = np.asarray(samples, dtype=np.float64)
    signal_power = float(np.mean(samples ** 2)) if samples.size else 0.0
    if signal_power <= 0.0:
        raise ValueError("Signal is silent; SNR is undefined")
    noise = rng.standard_normal(samples.shape)
    noise *= math.sqrt(signal_power / 10.0 ** (snr_db / 10.0) / np.mean(noise ** 2))
    mixed = samples + noise
    clipped = np.abs(mixed) > 1.0
    mixed = np.clip(mixed, -1.0, 1.0)
    achieved = 10.0 * math.log10(signal_power / float(np.mean((mixed - samples) ** 2)))
    clipped_fraction = float(clipped.mean())
    if clipped_fraction > 0:
        logger.warning(f"Clipped {clipped_fraction:.2%} of samples while mixing noise at {snr_db:.2f} dB")
    return mixed, achieved, clipped_fraction


@dataclass(frozen=True, eq=False)
class NoisyAudio:
    audio: AudioBuffer
    achieved_snr_db: float
    clipped_fraction: float


def add_noise_with_report(signal: AudioBuffer, snr_db: float, seed: int = config.SEED) -> NoisyAudio:
    """add_noise that also returns the achieved SNR and the fraction of samples clipped to [-1, 1]."""
    mixed, achieved, clipped = mix_noise(signal.samples, snr_db, np.random.default_rng(seed))
    return NoisyAudio(AudioBuffer(mixed, signal.sample_rate, signal.start_time), achieved, clipped)


def add_noise(signal: AudioBuffer, snr_db: float, seed: int = config.SEED) -> AudioBuffer:
    """`signal` plus seeded white noise at `snr_db`; raises ValueError for a silent signal."""
    result = add_noise_with_report(signal, snr_db, seed)
    logger.debug(f"Mixed noise: target {snr_db:.2f} dB, achieved {result.achieved_snr_db:.4f} dB, "
                 f"clipped {result.clipped_fraction:.2%}")
    return result.audio


def _render_utterance(uid: str, label: str, variant: str, spec: CorpusSpec,
                      seed_seq: np.random.SeedSequence) -> Utterance:
    rng = np.random.default_rng(seed_seq)
    tempo = rng.uniform(*spec.tempo_range)
    pitch = rng.uniform(*spec.pitch_range)
    snr_db = rng.uniform(*spec.snr_range_db)
    words = UTTERANCE_TEMPLATES[variant]
    if words is None:
        first, second = rng.choice(len(FILLER_WORDS), size=2, replace=False)
        words = ((FILLER_WORDS[first], 0), (FILLER_WORDS[second], 0))

    sr = config.SAMPLE_RATE
    pieces = [np.zeros(int(round(rng.uniform(*SILENCE_RANGE_S) * sr)))]
    segments = []
    cursor = len(pieces[0])
    for i, (word, word_label) in enumerate(words):
        if i > 0:
            gap = np.zeros(int(round(GAP_S / tempo * sr)))
            pieces.append(gap)
            cursor += len(gap)
        chord = render_subword(word, SUBWORD_S / tempo, pitch, rng, sr)
        segments.append(Segment(word, cursor / sr, (cursor + len(chord)) / sr, word_label))
        pieces.append(chord)
        cursor += len(chord)
    pieces.append(np.zeros(int(round(rng.uniform(*SILENCE_RANGE_S) * sr))))

    mixed, achieved, clipped = mix_noise(np.concatenate(pieces), snr_db, rng)
    return Utterance(uid, AudioBuffer(mixed, sr), label, variant, tuple(segments), achieved, clipped)


def synthesize_corpus(spec: CorpusSpec | None = None) -> TestCorpus:
    """
    Render the positive and negative utterances of a corpus.

    Positives use the keyword template; negatives cycle through the
    confusable variants and filler. Each utterance draws tempo, pitch, SNR,
    silences and noise from its own child seed, so the corpus is bit-exact
    per `spec.seed`.

    Args:
        spec: Counts, SNR range, variants and seed

    Returns:
        TestCorpus with positives first
    """
    spec = spec or CorpusSpec()
    total = spec.n_positive + spec.n_negative
    children = np.random.SeedSequence(spec.seed).spawn(total)
    utterances = []
    for i in range(total):
        if i < spec.n_positive:
            label, variant = "positive", spec.keyword_template_id
        else:
            label = "negative"
            variant = spec.negative_variant_ids[(i - spec.n_positive) % len(spec.negative_variant_ids)]
        utterances.append(_render_utterance(f"utt{i:03d}", label, variant, spec, children[i]))
    logger.info(f"Synthesized corpus: {spec.n_positive} positives, {spec.n_negative} negatives (seed {spec.seed})")
    return TestCorpus(utterances, spec)


def write_corpus(corpus: TestCorpus, out_dir) -> Path:
    """WAV per utterance plus manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in corpus.utterances:
        wav_name = f"{utt.uid}_{utt.label[:3]}.wav"
        save_wav(utt.audio, wav_dir / wav_name)
        entries.append({
            "id": utt.uid, "wav": f"wav/{wav_name}", "label": utt.label, "variant": utt.variant,
            "snr_db": utt.snr_db, "clipped_fraction": utt.clipped_fraction, "timestamp_s": utt.timestamp_s,
            "segments": [s.to_dict() for s in utt.segments],
        })
    manifest = {"spec": json.loads(corpus.spec.model_dump_json()), "utterances": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Wrote {len(entries)} utterances and manifest to {out_dir}")
    return path


def load_corpus(manifest_path) -> TestCorpus:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"Corpus manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if not isinstance(manifest, dict):
        raise ValueError(f"Corpus manifest {manifest_path} must be a JSON object")
    utterances = []
    where = "header"
    try:
        spec = CorpusSpec(**manifest["spec"])
        for i, entry in enumerate(manifest["utterances"]):
            where = f"utterance {i}"
            segments = tuple(Segment(s["word"], s["start_s"], s["end_s"], s["label"]) for s in entry["segments"])
            audio = load_wav(manifest_path.parent / entry["wav"])
            utterances.append(Utterance(entry["id"], audio, entry["label"], entry["variant"], segments,
                                        entry["snr_db"], entry.get("clipped_fraction", 0.0),
                                        entry.get("timestamp_s")))
    except KeyError as e:
        raise ValueError(f"Corpus manifest {manifest_path} is missing key {e} ({where})") from e
    except TypeError as e:
        raise ValueError(f"Malformed corpus manifest {manifest_path} ({where}): {e}") from e
    return TestCorpus(utterances, spec)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainingData:
    dnn: TrainingSet
    speech: np.ndarray     # VAD features of speech frames
    nonspeech: np.ndarray  # VAD features of non-speech frames


@dataclass(frozen=True, eq=False)
class TrainedModels:
    params: NetworkParams
    vad: VoiceActivityDetector
    frame_accuracy: float
    final_loss: float | None


def build_training_set(corpus: TestCorpus, extractor: FeatureExtractor | None = None,
                       max_filler_frames: int = config.MAX_FILLER_FRAMES, seed: int = config.SEED) -> TrainingData:
    """Frame-labelled DNN data and speech / non-speech VAD data.

    Every keyword frame is kept. Per utterance at most `max_filler_frames`
    filler frames inside sub-words and half as many silence frames are drawn.
    """
    extractor = extractor or FeatureExtractor()
    rng = np.random.default_rng(seed)
    inputs, labels, speech, nonspeech = [], [], [], []
    for utt in corpus.utterances:
        features = extractor.extract(utt.audio)
        n = len(features)
        if n == 0:
            continue
        frame_lab = utt.frame_labels(extractor.frame_len_ms, extractor.hop_ms, n)
        speech_lab = utt.speech_labels(extractor.frame_len_ms, extractor.hop_ms, n).astype(bool)
        stacked = extractor.stacked(features)

        keyword = np.flatnonzero(frame_lab > 0)
        filler_speech = np.flatnonzero((frame_lab == 0) & speech_lab)
        silence = np.flatnonzero(~speech_lab)
        chosen = [keyword]
        for pool, cap in ((filler_speech, max_filler_frames), (silence, max_filler_frames // 2)):
            if len(pool) > cap:
                pool = np.sort(rng.choice(pool, size=cap, replace=False))
            chosen.append(pool)
        rows = np.concatenate(chosen).astype(np.int64)
        inputs.append(stacked[rows])
        labels.append(frame_lab[rows])
        speech.append(features.vad[speech_lab])
        nonspeech.append(features.vad[~speech_lab])

    if not inputs:
        raise ValueError("Corpus yields no frames to train on")
    data = TrainingSet(np.vstack(inputs), np.concatenate(labels))
    logger.info(f"Training set: {len(data)} frames, label counts {np.bincount(data.labels).tolist()}")
    return TrainingData(data, np.vstack(speech), np.vstack(nonspeech))


def train_models(corpus: TestCorpus, hidden_layers: int = config.HIDDEN_LAYERS,
                 hidden_nodes: int = config.HIDDEN_NODES, epochs: int = config.EPOCHS,
                 learning_rate: float = config.LEARNING_RATE, batch_size: int = config.BATCH_SIZE,
                 vad_components: int = config.VAD_COMPONENTS, em_iters: int = config.VAD_EM_ITERS,
                 seed: int = config.SEED, extractor: FeatureExtractor | None = None,
                 vad_config: VadConfig | None = None) -> TrainedModels:
    """
    Fit both VAD GMMs and the keyword DNN on a corpus.

    Returns:
        TrainedModels with the training-set frame accuracy and last epoch loss
    """
    extractor = extractor or FeatureExtractor()
    data = build_training_set(corpus, extractor, seed=seed)

    speech_model = fit_gmm_em(data.speech, vad_components, em_iters, seed)
    nonspeech_model = fit_gmm_em(data.nonspeech, vad_components, em_iters, seed + 1)
    vad = VoiceActivityDetector(speech_model, nonspeech_model, vad_config)

    topology = Topology(extractor.stacked_dim, hidden_layers, hidden_nodes, config.N_LABELS)
    params = train_sgd(topology, data.dnn, epochs, learning_rate, batch_size, seed, normalize=True)
    accuracy = frame_accuracy(params, data.dnn.inputs, data.dnn.labels)
    final_loss = params.loss_history[-1] if params.loss_history else None
    logger.info(f"Trained models: frame accuracy {accuracy:.4f}, final loss {final_loss}")
    return TrainedModels(params, vad, accuracy, final_loss)


# ---------------------------------------------------------------------------
# Drive pairing
# ---------------------------------------------------------------------------

def assign_drive_timestamps(corpus: TestCorpus, states: Sequence[ManeuverState],
                            inside_fraction: float = config.INSIDE_MANEUVER_FRACTION,
                            seed: int = config.SEED) -> list[float]:
    """
    Place each utterance on the drive clock.

    About `inside_fraction` of the positives and of the negatives start inside
    a run of sensitive states long enough to cover the whole utterance; the
    rest are placed where every frame sees normal telemetry.

    Returns:
        Start time per utterance, in corpus order
    """
    if not 0.0 <= inside_fraction <= 1.0:
        raise ValueError(f"inside_fraction must lie in [0, 1], got {inside_fraction}")
    if len(states) == 0:
        raise ValueError("Cannot place utterances on an empty drive")
    rng = np.random.default_rng(seed)
    times = np.array([s.timestamp for s in states])
    period = float(np.min(np.diff(times))) if len(times) > 1 else 1.0
    covered = [(first, last + period) for first, last in sensitive_runs(states)]

    normal_spans = []
    cursor = float(times[0])
    for lo, hi in covered:
        normal_spans.append((cursor, lo))
        cursor = hi
    normal_spans.append((cursor, float(times[-1]) + period))

    def place(duration: float, spans: list[tuple[float, float]]) -> float | None:
        fitting = [(lo, hi - duration) for lo, hi in spans if hi - lo > duration + 1e-6]
        if not fitting:
            return None
        lo, hi = fitting[int(rng.integers(len(fitting)))]
        return float(rng.uniform(lo, hi))

    inside = np.zeros(len(corpus), dtype=bool)
    for group in (np.array([i for i, u in enumerate(corpus.utterances) if u.is_positive], dtype=np.int64),
                  np.array([i for i, u in enumerate(corpus.utterances) if not u.is_positive], dtype=np.int64)):
        n_inside = int(round(inside_fraction * len(group)))
        if n_inside:
            inside[rng.permutation(group)[:n_inside]] = True

    stamps = []
    missed = 0
    for i, utt in enumerate(corpus.utterances):
        start = place(utt.audio.duration, covered) if inside[i] else None
        if inside[i] and start is None:
            missed += 1
        if start is None:
            start = place(utt.audio.duration, normal_spans)
        if start is None:
            start = float(times[0])
        stamps.append(start)
    if missed:
        logger.warning(f"{missed} utterances found no sensitive window long enough; placed in normal driving")
    return stamps


def with_timestamps(corpus: TestCorpus, stamps: Sequence[float]) -> TestCorpus:
    utterances = [Utterance(u.uid, u.audio.at(t), u.label, u.variant, u.segments, u.snr_db,
                            u.clipped_fraction, float(t)) for u, t in zip(corpus.utterances, stamps)]
    return TestCorpus(utterances, corpus.spec)


# ---------------------------------------------------------------------------
# Metrics and sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @classmethod
    def from_outcomes(cls, positives: Sequence[bool], activated: Sequence[bool]) -> "Metrics":
        tp = fp = fn = tn = 0
        for positive, fired in zip(positives, activated):
            if positive and fired:
                tp += 1
            elif fired:
                fp += 1
            elif positive:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)


@dataclass(frozen=True)
class SweepRow:
    config_id: int
    sen_1: float
    sen_2: float
    metrics: Metrics


@dataclass(frozen=True)
class SweepSummary:
    rows: tuple[SweepRow, ...]
    mean_precision: float
    mean_recall: float
    mse_precision: float
    mse_recall: float


def summarize(values: Sequence[float], ddof: int = config.MSE_DDOF) -> tuple[float, float]:
    """(mean, mean square error around the mean); ddof=0 gives the population variance."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("summarize needs at least one value")
    mean = float(values.mean())
    if values.size - ddof <= 0:
        return mean, 0.0
    return mean, float(np.sum((values - mean) ** 2) / (values.size - ddof))


def summarize_rows(rows: Sequence[SweepRow], ddof: int = config.MSE_DDOF) -> SweepSummary:
    mean_p, mse_p = summarize([r.metrics.precision for r in rows], ddof)
    mean_r, mse_r = summarize([r.metrics.recall for r in rows], ddof)
    return SweepSummary(tuple(rows), mean_p, mean_r, mse_p, mse_r)


def evaluate(runner: Callable[[Utterance], Sequence[DetectionEvent]], corpus: TestCorpus) -> Metrics:
    """One or more events on an utterance counts as an activation."""
    return Metrics.from_outcomes([u.is_positive for u in corpus.utterances],
                                 [len(runner(u)) > 0 for u in corpus.utterances])


def score_corpus(pipeline: KwsPipeline, corpus: TestCorpus, workers: int = config.EVAL_WORKERS) -> list[ScoredAudio]:
    """Pipeline scores per utterance, in corpus order whatever the worker count."""
    audios = [u.audio for u in corpus.utterances]
    if workers <= 1:
        scored = [pipeline.score(a) for a in audios]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(pipeline.score, audios))
    total_audio = sum(a.duration for a in audios)
    if total_audio > 0:
        mean_rtf = sum(s.rtf * a.duration for s, a in zip(scored, audios)) / total_audio
        logger.info(f"Scored {len(audios)} utterances ({total_audio:.1f} s audio), mean RTF {mean_rtf:.3f}")
    return scored


def _pair_metrics(pipeline: KwsPipeline, corpus: TestCorpus, scored: Sequence[ScoredAudio],
                  pair: SensitivityPair, states: Sequence[ManeuverState]) -> Metrics:
    activated = [len(pipeline.events(s, states, pair)) > 0 for s in scored]
    return Metrics.from_outcomes([u.is_positive for u in corpus.utterances], activated)


def sweep_single(sensitivities: Sequence[float], corpus: TestCorpus, pipeline: KwsPipeline,
                 scored: Sequence[ScoredAudio] | None = None) -> SweepSummary:
    """Audio-only system evaluated at each sensitivity."""
    if len(sensitivities) == 0:
        raise ValueError("sweep_single needs at least one sensitivity")
    scored = scored if scored is not None else score_corpus(pipeline, corpus)
    rows = []
    for i, sen in enumerate(sensitivities, start=1):
        metrics = _pair_metrics(pipeline, corpus, scored, SensitivityPair(sen, sen), ())
        rows.append(SweepRow(i, sen, sen, metrics))
        logger.info(f"single #{i} sen={sen}: precision {metrics.precision:.4f}, recall {metrics.recall:.4f}")
    return summarize_rows(rows)


def sweep_double(pairs: Sequence[SensitivityPair | tuple[float, float]], corpus: TestCorpus,
                 states: Sequence[ManeuverState], pipeline: KwsPipeline,
                 scored: Sequence[ScoredAudio] | None = None) -> SweepSummary:
    """Fused system per sensitivity pair; utterance audio must already sit on the drive clock."""
    if len(pairs) == 0:
        raise ValueError("sweep_double needs at least one sensitivity pair")
    pairs = [p if isinstance(p, SensitivityPair) else SensitivityPair(*p) for p in pairs]
    for p in pairs:
        if not p.strict:
            raise ValueError(f"Sensitivity pair ({p.sen_1}, {p.sen_2}) must satisfy sen_1 < sen_2")
    scored = scored if scored is not None else score_corpus(pipeline, corpus)
    rows = []
    for i, pair in enumerate(pairs, start=1):
        metrics = _pair_metrics(pipeline, corpus, scored, pair, states)
        rows.append(SweepRow(i, pair.sen_1, pair.sen_2, metrics))
        logger.info(f"double #{i} ({pair.sen_1}, {pair.sen_2}): "
                    f"precision {metrics.precision:.4f}, recall {metrics.recall:.4f}")
    return summarize_rows(rows)


def relative_improvement(single: SweepSummary, fused: SweepSummary) -> dict:
    """Percent change of mean precision / recall and percent reduction of their mean square errors."""
    def change(before: float, after: float) -> float | None:
        return (after - before) / before * 100.0 if before else None

    def reduction(before: float, after: float) -> float | None:
        return (before - after) / before * 100.0 if before else None

    return {
        "mean_precision": change(single.mean_precision, fused.mean_precision),
        "mse_precision": reduction(single.mse_precision, fused.mse_precision),
        "mean_recall": change(single.mean_recall, fused.mean_recall),
        "mse_recall": reduction(single.mse_recall, fused.mse_recall),
    }


def write_sweep_csv(path, summary: SweepSummary) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_HEADER)
        for row in summary.rows:
            m = row.metrics
            writer.writerow([row.config_id, row.sen_1, row.sen_2, m.tp, m.fp, m.fn, m.tn,
                             repr(m.precision), repr(m.recall)])
    return path


def write_summary_csv(path, summaries: dict[str, SweepSummary], improvement: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_HEADER)
        for name, s in summaries.items():
            writer.writerow([name, repr(s.mean_precision), repr(s.mse_precision),
                             repr(s.mean_recall), repr(s.mse_recall)])
        if improvement is not None:
            writer.writerow(["improvement_pct"] + ["" if improvement[k] is None else repr(improvement[k])
                                                   for k in SUMMARY_HEADER[1:]])
    return path
