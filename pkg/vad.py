"""Voice activity detection: speech / non-speech GMMs and a majority-vote state machine."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, logsumexp

import config
from dsp_frontend import FeatureInput, FeatureVector, as_matrix

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class EMConvergenceError(RuntimeError):
    """EM produced a lower data log-likelihood than the previous iteration."""


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Diagonal-covariance Gaussian mixture."""
    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, D)
    variances: np.ndarray  # (K, D)
    log_likelihood_trace: tuple = field(default=(), repr=False)

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.array(self.means, dtype=np.float64))
        variances = np.atleast_2d(np.array(self.variances, dtype=np.float64))
        if means.shape != variances.shape or means.shape[0] != weights.shape[0]:
            raise ValueError(
                f"Inconsistent GMM shapes: weights {weights.shape}, means {means.shape}, variances {variances.shape}"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"GMM weights must be non-negative and sum to 1, got sum {weights.sum()!r}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise ValueError("GMM parameters must be finite")
        if np.any(variances < config.VARIANCE_FLOOR * (1.0 - 1e-12)):
            raise ValueError(f"GMM variances must be >= {config.VARIANCE_FLOOR}")
        for name, arr in (("weights", weights), ("means", means), ("variances", variances)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"weight": float(w), "means": m.tolist(), "variances": v.tolist()}
                for w, m, v in zip(self.weights, self.means, self.variances)
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GmmModel":
        try:
            components = payload["components"]
            model = cls(
                weights=[c["weight"] for c in components],
                means=[c["means"] for c in components],
                variances=[c["variances"] for c in components],
            )
            declared = int(payload["dim"])
        except KeyError as e:
            raise ValueError(f"GMM file is missing key {e}") from e
        except TypeError as e:
            raise ValueError(f"Malformed GMM entry: {e}") from e
        if model.dim != declared:
            raise ValueError(f"GMM declares dim {declared} but components have dim {model.dim}")
        return model

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "GmmModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"GMM file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def _component_log_joint(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """log w_c + log N(x; mu_c, diag var_c) for every row and component, shape (N, K)."""
    n = X.shape[0]
    out = np.empty((n, model.n_components))
    log_norm = -0.5 * (model.dim * LOG_2PI + np.sum(np.log(model.variances), axis=1))
    with np.errstate(divide="ignore"):
        log_weights = np.log(model.weights)
    for k in range(model.n_components):
        maha = np.sum((X - model.means[k]) ** 2 / model.variances[k], axis=1)
        out[:, k] = log_weights[k] + log_norm[k] - 0.5 * maha
    return out


def _check_dim(model: GmmModel, X: np.ndarray):
    if X.shape[1] != model.dim:
        raise ValueError(f"Feature dimension {X.shape[1]} does not match GMM dimension {model.dim}")


def gmm_log_likelihoods(model: GmmModel, features: FeatureInput) -> np.ndarray:
    X = as_matrix(features)
    _check_dim(model, X)
    return logsumexp(_component_log_joint(model, X), axis=1)


def gmm_log_likelihood(model: GmmModel, x) -> float:
    """log sum_c w_c N(x; mu_c, diag var_c), evaluated with log-sum-exp."""
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    return float(gmm_log_likelihoods(model, values.reshape(1, -1))[0])


def speech_posteriors(speech_model: GmmModel, nonspeech_model: GmmModel, features: FeatureInput,
                      prior_speech: float = config.VAD_PRIOR_SPEECH) -> np.ndarray:
    if not 0.0 <= prior_speech <= 1.0:
        raise ValueError(f"prior_speech must lie in [0, 1], got {prior_speech}")
    X = as_matrix(features)
    ll_speech = gmm_log_likelihoods(speech_model, X)
    ll_nonspeech = gmm_log_likelihoods(nonspeech_model, X)
    with np.errstate(divide="ignore"):
        log_odds = (ll_speech + np.log(prior_speech)) - (ll_nonspeech + np.log(1.0 - prior_speech))
    return expit(log_odds)


def speech_posterior(speech_model: GmmModel, nonspeech_model: GmmModel, x,
                     prior_speech: float = config.VAD_PRIOR_SPEECH) -> float:
    """Bayes posterior P(speech | x)."""
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    return float(speech_posteriors(speech_model, nonspeech_model, values.reshape(1, -1), prior_speech)[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    first = int(rng.integers(n))
    centers = [X[first]]
    d2 = np.sum((X - X[first]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        index = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(X[index])
        d2 = np.minimum(d2, np.sum((X - X[index]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm_em(data: FeatureInput, n_components: int = config.VAD_COMPONENTS,
               max_iters: int = config.VAD_EM_ITERS, seed: int = config.SEED, tol: float = 1e-6,
               variance_floor: float = config.VARIANCE_FLOOR) -> GmmModel:
    """
    Fit a diagonal GMM with k-means++ seeding followed by EM.

    Args:
        data: Training vectors (FeatureVectors or an (N, D) matrix)
        n_components: Mixture size
        max_iters: Upper bound on EM iterations
        seed: Seed for the k-means++ draws; identical seeds give identical models
        tol: Stop once the relative log-likelihood gain falls below this
        variance_floor: Lower bound applied to every variance

    Returns:
        GmmModel whose `log_likelihood_trace` holds the data log-likelihood per iteration
    """
    X = as_matrix(data)
    n = X.shape[0]
    if n < n_components:
        raise ValueError(f"Need at least {n_components} points to fit {n_components} components, got {n}")
    if n_components < 1:
        raise ValueError("n_components must be positive")

    rng = np.random.default_rng(seed)
    means = _kmeans_plus_plus(X, n_components, rng)
    variances = np.tile(np.maximum(X.var(axis=0), variance_floor), (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    trace: list[float] = []
    for iteration in range(max_iters + 1):
        model = GmmModel(weights, means, variances)
        log_joint = _component_log_joint(model, X)
        per_point = logsumexp(log_joint, axis=1)
        total = float(per_point.sum())

        if trace and total < trace[-1] - 1e-8 * max(1.0, abs(trace[-1])):
            logger.error(f"EM log-likelihood fell from {trace[-1]} to {total} at iteration {iteration}")
            raise EMConvergenceError(f"EM log-likelihood decreased at iteration {iteration}")
        trace.append(total)
        if iteration == max_iters:
            break
        if len(trace) > 1 and total - trace[-2] <= tol * max(1.0, abs(total)):
            break

        resp = np.exp(log_joint - per_point[:, None])
        nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        means = means.copy()
        variances = variances.copy()
        for k in range(n_components):
            if nk[k] <= 1e-12:
                continue
            means[k] = resp[:, k] @ X / nk[k]
            variances[k] = np.maximum(resp[:, k] @ (X - means[k]) ** 2 / nk[k], variance_floor)

    logger.info(f"Fitted {n_components}-component GMM on {n} points: "
                f"{len(trace)} evaluations, log-likelihood {trace[-1]:.3f}")
    return GmmModel(model.weights, model.means, model.variances, tuple(trace))


# ---------------------------------------------------------------------------
# Region state machine
# ---------------------------------------------------------------------------

class VadConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    posterior_threshold: float = Field(default=config.VAD_THRESHOLD, gt=0.0, lt=1.0)
    window_frames: int = Field(default=config.VAD_WINDOW_FRAMES, ge=1)
    majority_fraction: float = Field(default=config.VAD_MAJORITY, gt=0.0, le=1.0)
    hangover_frames: int = Field(default=config.VAD_HANGOVER_FRAMES, ge=0)
    prior_speech: float = Field(default=config.VAD_PRIOR_SPEECH, ge=0.0, le=1.0)
    min_frame_energy: float = Field(default=config.VAD_MIN_FRAME_ENERGY, ge=0.0)


@dataclass(frozen=True)
class SpeechRegion:
    start_frame: int
    end_frame: int  # inclusive

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ValueError(f"Region start {self.start_frame} after end {self.end_frame}")


def _runs(mask: np.ndarray) -> list[SpeechRegion]:
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [SpeechRegion(int(s), int(e)) for s, e in zip(starts, ends)]


def speech_frame_mask(posteriors: Sequence[float], vad_config: VadConfig | None = None) -> np.ndarray:
    """Boolean per-frame speech decision of the majority-vote state machine.

    Every window of `window_frames` posteriors in which at least
    `majority_fraction` exceed the threshold marks all of its frames as
    speech; each speech run is then held open for `hangover_frames` more.
    """
    cfg = vad_config or VadConfig()
    p = np.asarray(posteriors, dtype=np.float64)
    n = p.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)

    width = min(cfg.window_frames, n)
    needed = math.ceil(cfg.majority_fraction * width - 1e-9)
    counts = np.concatenate([[0], np.cumsum(p > cfg.posterior_threshold)])
    active_starts = np.flatnonzero(counts[width:] - counts[:-width] >= needed)

    marks = np.zeros(n + 1, dtype=np.int64)
    np.add.at(marks, active_starts, 1)
    np.add.at(marks, active_starts + width, -1)
    speech = np.cumsum(marks)[:n] > 0

    if cfg.hangover_frames > 0 and speech.any():
        seen = np.concatenate([[0], np.cumsum(speech)])
        lookback = np.maximum(np.arange(n) - cfg.hangover_frames, 0)
        speech = (seen[np.arange(n) + 1] - seen[lookback]) > 0
    return speech


def detect_speech_regions(posteriors: Sequence[float], vad_config: VadConfig | None = None) -> list[SpeechRegion]:
    """Disjoint, sorted speech regions from per-frame speech posteriors."""
    return _runs(speech_frame_mask(posteriors, vad_config))


def regions_to_mask(regions: Sequence[SpeechRegion], n_frames: int) -> np.ndarray:
    mask = np.zeros(n_frames, dtype=bool)
    for region in regions:
        mask[region.start_frame:region.end_frame + 1] = True
    return mask


def write_regions_jsonl(path, regions: Sequence[SpeechRegion]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for region in regions:
            f.write(json.dumps({"start_frame": region.start_frame, "end_frame": region.end_frame}) + "\n")
    return path


class VoiceActivityDetector:
    """Speech / non-speech GMM pair plus the region state machine."""

    def __init__(self, speech_model: GmmModel, nonspeech_model: GmmModel, vad_config: VadConfig | None = None):
        if speech_model.dim != nonspeech_model.dim:
            raise ValueError(
                f"Speech model dim {speech_model.dim} differs from non-speech model dim {nonspeech_model.dim}"
            )
        self.speech_model = speech_model
        self.nonspeech_model = nonspeech_model
        self.config = vad_config or VadConfig()

    def frame_posteriors(self, features: FeatureInput, energy: np.ndarray | None = None) -> np.ndarray:
        X = as_matrix(features)
        if X.shape[0] == 0:
            return np.zeros(0)
        posteriors = speech_posteriors(self.speech_model, self.nonspeech_model, X, self.config.prior_speech)
        if energy is not None:
            silent = np.asarray(energy) < self.config.min_frame_energy
            posteriors = np.where(silent, 0.0, posteriors)
        return posteriors

    def speech_mask(self, features: FeatureInput, energy: np.ndarray | None = None) -> np.ndarray:
        return speech_frame_mask(self.frame_posteriors(features, energy), self.config)

    def regions(self, features: FeatureInput, energy: np.ndarray | None = None) -> list[SpeechRegion]:
        return _runs(self.speech_mask(features, energy))

    def save(self, model_dir) -> None:
        model_dir = Path(model_dir)
        self.speech_model.save(model_dir / config.VAD_SPEECH_FILE)
        self.nonspeech_model.save(model_dir / config.VAD_NONSPEECH_FILE)
        logger.info(f"Saved VAD models to {model_dir}")

    @classmethod
    def load(cls, model_dir, vad_config: VadConfig | None = None) -> "VoiceActivityDetector":
        model_dir = Path(model_dir)
        return cls(GmmModel.load(model_dir / config.VAD_SPEECH_FILE),
                   GmmModel.load(model_dir / config.VAD_NONSPEECH_FILE), vad_config)
