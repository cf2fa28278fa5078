"""Telemetry-driven sensitivity switching and the end-to-end keyword spotting pipeline."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import config
from dnn import NetworkParams, forward_batch
from dsp_frontend import AudioBuffer, FeatureExtractor
from kws_scorer import (DetectionEvent, FrameGate, ScoringConfig, Sensitivity, SmoothingConfig,
                        StreamingScorer, events_from_scores)
from telemetry import GeoSample, ManeuverMode, ManeuverState, ManeuverThresholds, maneuver_states
from vad import VoiceActivityDetector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensitivityPair:
    sen_1: float  # normal state
    sen_2: float  # sensitive state

    def __post_init__(self):
        Sensitivity(self.sen_1)
        Sensitivity(self.sen_2)
        if self.sen_1 > self.sen_2:
            raise ValueError(f"sen_1 ({self.sen_1}) must not exceed sen_2 ({self.sen_2})")

    @property
    def strict(self) -> bool:
        return self.sen_1 < self.sen_2


class FusionConfig(BaseModel):
    """Flat run configuration; the keys double as CLI flags and config-file keys."""
    model_config = ConfigDict(frozen=True)

    sen_1: float = Field(default=config.SEN_1, ge=0.0, le=1.0)
    sen_2: float = Field(default=config.SEN_2, ge=0.0, le=1.0)
    s_thd: float = Field(default=config.S_THD, ge=0.0)
    d_thd: float = Field(default=config.D_THD, ge=0.0)
    w_s: int = Field(default=config.W_SMOOTH, ge=1)
    w_max: int = Field(default=config.W_MAX, ge=1)
    staleness_limit_s: float = Field(default=config.STALENESS_LIMIT_S, gt=0.0)
    refractory_frames: int = Field(default=config.REFRACTORY_FRAMES, ge=0)

    @model_validator(mode="after")
    def _ordered_pair(self):
        if self.sen_1 > self.sen_2:
            raise ValueError(f"sen_1 ({self.sen_1}) must not exceed sen_2 ({self.sen_2})")
        return self

    @property
    def pair(self) -> SensitivityPair:
        return SensitivityPair(self.sen_1, self.sen_2)

    @property
    def thresholds(self) -> ManeuverThresholds:
        return ManeuverThresholds(s_thd=self.s_thd, d_thd=self.d_thd)

    @property
    def smoothing(self) -> SmoothingConfig:
        return SmoothingConfig(w_s=self.w_s)

    @property
    def scoring(self) -> ScoringConfig:
        return ScoringConfig(w_max=self.w_max)


@dataclass(frozen=True)
class AlignedFrameContext:
    timestamp: float
    maneuver_state: ManeuverMode
    telemetry_age: float  # inf when no telemetry precedes the frame


def select_sensitivity(state: ManeuverState | ManeuverMode, pair: SensitivityPair) -> float:
    mode = state.state if isinstance(state, ManeuverState) else ManeuverMode(state)
    return pair.sen_2 if mode is ManeuverMode.SENSITIVE else pair.sen_1


def align_telemetry(frame_timestamps: Sequence[float], states: Sequence[ManeuverState],
                    staleness_limit: float = config.STALENESS_LIMIT_S) -> list[AlignedFrameContext]:
    """Latest maneuver state at or before each frame; stale or missing telemetry means normal."""
    frame_timestamps = np.asarray(frame_timestamps, dtype=np.float64)
    if len(states) == 0:
        return [AlignedFrameContext(float(t), ManeuverMode.NORMAL, math.inf) for t in frame_timestamps]

    state_times = np.array([s.timestamp for s in states])
    latest = np.searchsorted(state_times, frame_timestamps, side="right") - 1
    contexts = []
    for t, idx in zip(frame_timestamps, latest):
        if idx < 0:
            contexts.append(AlignedFrameContext(float(t), ManeuverMode.NORMAL, math.inf))
            continue
        age = float(t - state_times[idx])
        mode = states[idx].state if age <= staleness_limit else ManeuverMode.NORMAL
        contexts.append(AlignedFrameContext(float(t), mode, age))
    return contexts


@dataclass(frozen=True, eq=False)
class ScoredAudio:
    """Per-frame pipeline output for one buffer, before any sensitivity is applied."""
    scores: np.ndarray
    timestamps: np.ndarray
    speech_mask: np.ndarray
    posteriors: np.ndarray
    rtf: float = 0.0

    def __len__(self) -> int:
        return self.scores.shape[0]


class KwsPipeline:
    """Framing, VAD, DNN posteriors and confidence scoring for whole audio buffers."""

    def __init__(self, params: NetworkParams, vad: VoiceActivityDetector,
                 fusion_config: FusionConfig | None = None, extractor: FeatureExtractor | None = None):
        self.params = params
        self.vad = vad
        self.config = fusion_config or FusionConfig()
        self.extractor = extractor or FeatureExtractor()
        if self.extractor.stacked_dim != params.topology.input_dim:
            raise ValueError(
                f"Network expects {params.topology.input_dim} inputs, front end stacks {self.extractor.stacked_dim}"
            )

    def score(self, audio: AudioBuffer) -> ScoredAudio:
        """
        Run the audio side of the pipeline.

        Args:
            audio: 16 kHz mono buffer; `start_time` anchors the frame timestamps

        Returns:
            ScoredAudio with one score per frame (0 outside speech regions)
        """
        started = time.perf_counter()
        features = self.extractor.extract(audio)
        n_frames = len(features)
        if n_frames == 0:
            empty = np.zeros(0)
            return ScoredAudio(empty, empty, np.zeros(0, dtype=bool),
                               np.zeros((0, self.params.topology.n_labels)))

        speech = self.vad.speech_mask(features.vad, features.energy)
        posteriors = forward_batch(self.params, self.extractor.stacked(features))
        scorer = StreamingScorer(self.params.topology.n_labels, self.config.smoothing, self.config.scoring)
        scores = np.array([scorer.push(p, bool(s)) for p, s in zip(posteriors, speech)])

        elapsed = time.perf_counter() - started
        rtf = elapsed / audio.duration if audio.duration > 0 else 0.0
        logger.debug(f"Scored {n_frames} frames ({audio.duration:.2f} s audio) in {elapsed:.3f} s, RTF {rtf:.3f}")
        return ScoredAudio(scores, features.timestamps, speech, posteriors, rtf)

    def gates(self, scored: ScoredAudio, states: Sequence[ManeuverState] = (),
              pair: SensitivityPair | None = None) -> list[FrameGate]:
        pair = pair or self.config.pair
        contexts = align_telemetry(scored.timestamps, states, self.config.staleness_limit_s)
        return [FrameGate(select_sensitivity(c.maneuver_state, pair), c.maneuver_state, bool(s))
                for c, s in zip(contexts, scored.speech_mask)]

    def events(self, scored: ScoredAudio, states: Sequence[ManeuverState] = (),
               pair: SensitivityPair | None = None) -> list[DetectionEvent]:
        return events_from_scores(scored.scores, self.gates(scored, states, pair), scored.timestamps,
                                  self.config.refractory_frames)

    def run_single(self, audio: AudioBuffer, sensitivity: float | None = None) -> list[DetectionEvent]:
        """Audio-only detection at one sensitivity (sen_1 by default)."""
        value = self.config.sen_1 if sensitivity is None else sensitivity
        return self.events(self.score(audio), (), SensitivityPair(value, value))

    def run_fused(self, audio: AudioBuffer, trace: Sequence[GeoSample]) -> list[DetectionEvent]:
        if len(trace) == 0:
            logger.warning("Empty telemetry trace; running single-source at sen_1")
        states = maneuver_states(trace, self.config.thresholds) if len(trace) else []
        return self.events(self.score(audio), states)


def run_fused(audio: AudioBuffer, trace: Sequence[GeoSample], fusion_config: FusionConfig,
              dnn_params: NetworkParams, vad_models: VoiceActivityDetector) -> list[DetectionEvent]:
    """Full fused detection: audio pipeline plus per-frame sensitivity from the GPS trace."""
    try:
        return KwsPipeline(dnn_params, vad_models, fusion_config).run_fused(audio, trace)
    except (ValueError, FileNotFoundError):
        raise
    except Exception as e:
        logger.error(f"Fused detection failed: {e}", exc_info=True)
        raise RuntimeError(f"Fused detection failed: {e}") from e
