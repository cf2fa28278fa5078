"""Posterior smoothing, sliding-window confidence scores and thresholded keyword detection."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import config
from dnn import PosteriorFrame
from telemetry import ManeuverMode

logger = logging.getLogger(__name__)


class SmoothingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    w_s: int = Field(default=config.W_SMOOTH, ge=1)


class ScoringConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    w_max: int = Field(default=config.W_MAX, ge=1)


@dataclass(frozen=True)
class Sensitivity:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"Sensitivity must lie in [0, 1], got {self.value}")

    @property
    def threshold(self) -> float:
        return 1.0 - self.value


def _value(sensitivity: Sensitivity | float) -> float:
    return sensitivity.value if isinstance(sensitivity, Sensitivity) else Sensitivity(float(sensitivity)).value


@dataclass(frozen=True)
class DetectionEvent:
    frame_index: int
    timestamp: float
    score: float
    sensitivity: float
    maneuver_state: ManeuverMode = ManeuverMode.NORMAL

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"frame_index": self.frame_index, "timestamp_s": self.timestamp, "score": self.score,
                "sensitivity": self.sensitivity, "maneuver_state": self.maneuver_state.value}


@dataclass(frozen=True)
class FrameGate:
    """What the detector needs to know about one frame besides its posterior."""
    sensitivity: float
    maneuver_state: ManeuverMode = ManeuverMode.NORMAL
    in_speech: bool = True


# Both the streaming and the batch path reduce windows through these two
# helpers so their results agree bit for bit.

def _window_mean(block: np.ndarray) -> np.ndarray:
    block = np.ascontiguousarray(block)
    return block.sum(axis=0) / block.shape[0]


def _score_from_maxes(maxes: np.ndarray) -> float:
    keyword = maxes[1:]
    return float(np.prod(keyword) ** (1.0 / keyword.shape[0]))


def _posterior_matrix(posteriors) -> np.ndarray:
    if isinstance(posteriors, np.ndarray):
        return np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    return np.vstack([p.probs if isinstance(p, PosteriorFrame) else np.asarray(p, dtype=np.float64)
                      for p in posteriors])


def smooth_matrix(posteriors: np.ndarray, smoothing: SmoothingConfig | None = None) -> np.ndarray:
    """Trailing mean over at most w_s frames, row by row."""
    w_s = (smoothing or SmoothingConfig()).w_s
    P = _posterior_matrix(posteriors)
    out = np.empty_like(P)
    for j in range(P.shape[0]):
        out[j] = _window_mean(P[max(0, j - w_s + 1):j + 1])
    return out


def smooth_posteriors(posteriors: Sequence[PosteriorFrame] | np.ndarray,
                      smoothing: SmoothingConfig | None = None) -> list[PosteriorFrame]:
    P = _posterior_matrix(posteriors)
    if P.shape[0] == 0:
        raise ValueError("smooth_posteriors needs at least one frame")
    indices = ([p.frame_index for p in posteriors] if not isinstance(posteriors, np.ndarray)
               and all(isinstance(p, PosteriorFrame) for p in posteriors) else range(P.shape[0]))
    return [PosteriorFrame(row, int(i)) for row, i in zip(smooth_matrix(P, smoothing), indices)]


def confidence_score(smoothed: Sequence[PosteriorFrame] | np.ndarray, scoring: ScoringConfig | None, j: int) -> float:
    """
    Geometric mean over keyword labels of their maximum smoothed posterior in the window ending at j.

    Args:
        smoothed: Smoothed posteriors, label 0 being filler
        scoring: Window size w_max
        j: 1-based frame index, 1 <= j <= number of frames

    Returns:
        Score in [0, 1]
    """
    w_max = (scoring or ScoringConfig()).w_max
    S = _posterior_matrix(smoothed)
    n_frames, n_labels = S.shape
    if n_labels < 2:
        raise ValueError(f"Confidence score needs at least one keyword label, got {n_labels} labels")
    if not 1 <= j <= n_frames:
        raise ValueError(f"Frame index {j} outside [1, {n_frames}]")
    lo = max(1, j - w_max + 1)
    return _score_from_maxes(S[lo - 1:j].max(axis=0))


def detect(score: float, sensitivity: Sensitivity | float) -> bool:
    """Fires when the score reaches 1 - sensitivity (ties detect)."""
    return score >= 1.0 - _value(sensitivity)


def batch_scores(posteriors, smoothing: SmoothingConfig | None = None, scoring: ScoringConfig | None = None,
                 speech_mask: np.ndarray | None = None) -> np.ndarray:
    """Per-frame score over a whole buffer; 0 for frames outside speech."""
    S = smooth_matrix(posteriors, smoothing)
    n_frames = S.shape[0]
    scores = np.array([confidence_score(S, scoring, j + 1) for j in range(n_frames)]) if n_frames else np.zeros(0)
    if speech_mask is not None:
        scores = np.where(np.asarray(speech_mask, dtype=bool), scores, 0.0)
    return scores


def detected_frames(scores: np.ndarray, sensitivities) -> np.ndarray:
    """Indices of frames whose score reaches their threshold, before refractory suppression."""
    scores = np.asarray(scores, dtype=np.float64)
    sens = np.broadcast_to(np.asarray(sensitivities, dtype=np.float64), scores.shape)
    return np.flatnonzero(scores >= 1.0 - sens)


class RefractoryDetector:
    """Suppresses detections within `refractory_frames` of the previous event."""

    def __init__(self, refractory_frames: int = config.REFRACTORY_FRAMES):
        if refractory_frames < 0:
            raise ValueError(f"refractory_frames must be >= 0, got {refractory_frames}")
        self.refractory_frames = refractory_frames
        self.last_event: int | None = None

    def update(self, frame_index: int, fires: bool) -> bool:
        if not fires:
            return False
        if self.last_event is not None and frame_index - self.last_event < self.refractory_frames:
            return False
        self.last_event = frame_index
        return True


def events_from_scores(scores: np.ndarray, gates: Sequence[FrameGate], timestamps: Sequence[float],
                       refractory_frames: int = config.REFRACTORY_FRAMES) -> list[DetectionEvent]:
    refractory = RefractoryDetector(refractory_frames)
    events = []
    for k, (score, gate, t) in enumerate(zip(scores, gates, timestamps)):
        if refractory.update(k, detect(float(score), gate.sensitivity)):
            events.append(DetectionEvent(k, float(t), float(score), gate.sensitivity, gate.maneuver_state))
    return events


class StreamingScorer:
    """Incremental smoothing and scoring, one posterior frame at a time."""

    def __init__(self, n_labels: int, smoothing: SmoothingConfig | None = None,
                 scoring: ScoringConfig | None = None):
        if n_labels < 2:
            raise ValueError(f"Scoring needs at least one keyword label, got {n_labels} labels")
        self.n_labels = n_labels
        self.smoothing = smoothing or SmoothingConfig()
        self.scoring = scoring or ScoringConfig()
        self.reset()

    def reset(self):
        self._raw: deque[np.ndarray] = deque(maxlen=self.smoothing.w_s)
        self._smoothed: deque[np.ndarray] = deque(maxlen=self.scoring.w_max)
        self.frames_seen = 0

    def push(self, probs, in_speech: bool = True) -> float:
        """Add one posterior frame; returns its score (0 outside speech)."""
        probs = probs.probs if isinstance(probs, PosteriorFrame) else np.asarray(probs, dtype=np.float64)
        if probs.shape != (self.n_labels,):
            raise ValueError(f"Expected {self.n_labels} posteriors, got shape {probs.shape}")
        self._raw.append(probs)
        self._smoothed.append(_window_mean(np.array(self._raw)))
        self.frames_seen += 1
        if not in_speech:
            return 0.0
        return _score_from_maxes(np.array(self._smoothed).max(axis=0))


def score_stream(posteriors: Iterable, smoothing: SmoothingConfig | None = None,
                 scoring: ScoringConfig | None = None, sensitivity_source: Iterable | None = None,
                 start_time: float = 0.0, hop_s: float = config.HOP_MS / 1000.0,
                 refractory_frames: int = config.REFRACTORY_FRAMES) -> Iterator[DetectionEvent]:
    """
    Emit DetectionEvents as posterior frames arrive.

    Args:
        posteriors: PosteriorFrames or probability vectors, in frame order
        smoothing: Smoothing window
        scoring: Score window
        sensitivity_source: One FrameGate (or bare sensitivity) per frame
        start_time: Timestamp of frame 0
        hop_s: Frame hop in seconds
        refractory_frames: Minimum distance between events

    Yields:
        DetectionEvent per accepted detection
    """
    if sensitivity_source is None:
        raise ValueError("score_stream needs a sensitivity for every frame")
    refractory = RefractoryDetector(refractory_frames)
    scorer = None
    gates = iter(sensitivity_source)
    for k, frame in enumerate(posteriors):
        try:
            gate = next(gates)
        except StopIteration:
            raise ValueError(f"Sensitivity source exhausted at frame {k}") from None
        if not isinstance(gate, FrameGate):
            gate = FrameGate(_value(gate))
        probs = frame.probs if isinstance(frame, PosteriorFrame) else np.asarray(frame, dtype=np.float64)
        if scorer is None:
            scorer = StreamingScorer(probs.shape[0], smoothing, scoring)
        score = scorer.push(probs, gate.in_speech)
        if refractory.update(k, detect(score, gate.sensitivity)):
            yield DetectionEvent(k, start_time + k * hop_s, score, gate.sensitivity, gate.maneuver_state)


def write_events_jsonl(path, events: Sequence[DetectionEvent]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for event in events:
            f.write(json.dumps(event.to_dict()) + "\n")
    return path
