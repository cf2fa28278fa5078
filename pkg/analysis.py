"""Closed-form recall model for single-source vs fused detection, with a Monte Carlo check."""
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import config

logger = logging.getLogger(__name__)


class RecallModelParams(BaseModel):
    """
    p1: recall in normal state; p2: recall in sensitive state;
    p3: probability the telemetry platform reports the right state;
    k: fraction of time spent in the sensitive state.
    """
    model_config = ConfigDict(frozen=True)

    p1: float = Field(ge=0.0, le=1.0)
    p2: float = Field(ge=0.0, le=1.0)
    p3: float = Field(ge=0.0, le=1.0)
    k: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _warn_on_inverted_recall(self):
        if self.p2 < self.p1:
            logger.warning(f"p2 ({self.p2}) below p1 ({self.p1}); fusion cannot improve recall")
        return self


def recall_single(params: RecallModelParams) -> float:
    return params.p1


def recall_fused(params: RecallModelParams) -> float:
    p1, p2, p3, k = params.p1, params.p2, params.p3, params.k
    return p1 * ((1 - k) * p3 + k * (1 - p3)) + p2 * (k * p3 + (1 - k) * (1 - p3))


def recall_gain(params: RecallModelParams) -> float:
    """Fused minus single-source recall; positive iff p2 > p1 and the bracket is non-zero."""
    p1, p2, p3, k = params.p1, params.p2, params.p3, params.k
    return (p2 - p1) * ((1 - k) * (1 - p3) + k * p3)


def monte_carlo_recall(params: RecallModelParams, trials: int = 1_000_000, seed: int = config.SEED) -> float:
    """
    Simulate utterances under the recall model.

    Each trial draws the true state (sensitive with probability k) and whether
    the platform reports it correctly (probability p3). A wrong report flips
    the mode; detection then succeeds with p2 in sensitive mode, p1 otherwise.

    Returns:
        Fraction of successful detections
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    sensitive = rng.random(trials) < params.k
    correct = rng.random(trials) < params.p3
    mode_sensitive = np.where(correct, sensitive, ~sensitive)
    success = rng.random(trials) < np.where(mode_sensitive, params.p2, params.p1)
    return float(success.mean())


def recall_table_row(params: RecallModelParams, trials: int = 1_000_000, seed: int = config.SEED) -> dict:
    return {
        "p1": params.p1, "p2": params.p2, "p3": params.p3, "k": params.k,
        "single": recall_single(params), "fused": recall_fused(params),
        "gain": recall_gain(params), "monte_carlo": monte_carlo_recall(params, trials, seed),
    }
