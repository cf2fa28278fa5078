import itertools
import logging

import numpy as np
import pytest

from analysis import (RecallModelParams, monte_carlo_recall, recall_fused, recall_gain, recall_single,
                      recall_table_row)


def _params(p1, p2, p3, k):
    return RecallModelParams(p1=p1, p2=p2, p3=p3, k=k)


def test_single_source_recall():
    for p1 in (0.4733, 0.0, 1.0):
        assert recall_single(_params(p1, 1.0, 0.9, 0.3)) == p1


def test_fused_recall_examples():
    assert recall_fused(_params(0.4733, 0.6, 1.0, 0.0)) == 0.4733
    assert recall_fused(_params(0.4733, 0.6, 1.0, 1.0)) == 0.6
    assert recall_fused(_params(0.4733, 0.6, 0.9, 0.3)) == pytest.approx(0.51638, abs=1e-5)


def test_gain_examples():
    assert recall_gain(_params(0.5, 0.5, 0.7, 0.2)) == 0.0
    for p3 in np.linspace(0, 1, 11):
        assert recall_gain(_params(0.4, 0.6, float(p3), 0.5)) > 0
    assert recall_gain(_params(0.4, 0.6, 1.0, 0.0)) == 0.0


def test_gain_identity_and_positivity_on_grid():
    grid = [float(v) for v in np.linspace(0.0, 1.0, 21)]
    worst = 0.0
    for p1, p2, p3, k in itertools.product(grid, repeat=4):
        params = RecallModelParams.model_construct(p1=p1, p2=p2, p3=p3, k=k)
        gain = recall_gain(params)
        fused = recall_fused(params)
        worst = max(worst, abs(fused - recall_single(params) - gain))
        assert min(p1, p2) - 2e-15 <= fused <= max(p1, p2) + 2e-15
        if p2 > p1 and (1 - k) * (1 - p3) + k * p3 > 0:
            assert gain > 0
    assert worst <= 2e-15  # a few ulp


def test_monte_carlo_examples():
    assert abs(monte_carlo_recall(_params(0.5, 0.5, 0.3, 0.8), 1_000_000, seed=1) - 0.5) < 0.002
    assert abs(monte_carlo_recall(_params(0.4733, 0.6, 0.9, 0.3), 1_000_000, seed=2) - 0.51638) < 0.002
    one = monte_carlo_recall(_params(0.4733, 0.6, 0.9, 0.3), 1, seed=3)
    assert one in (0.0, 1.0)
    assert one == monte_carlo_recall(_params(0.4733, 0.6, 0.9, 0.3), 1, seed=3)
    with pytest.raises(ValueError):
        monte_carlo_recall(_params(0.5, 0.5, 0.5, 0.5), 0)


def test_monte_carlo_within_binomial_sigma():
    rng = np.random.default_rng(4)
    trials = 1_000_000
    for draw in range(50):
        params = _params(*(float(v) for v in rng.random(4)))
        expected = recall_fused(params)
        sigma = np.sqrt(max(expected * (1 - expected), 1e-12) / trials)
        assert abs(monte_carlo_recall(params, trials, seed=draw) - expected) < 4 * sigma + 1e-12


def test_inverted_recall_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="analysis"):
        _params(0.7, 0.5, 0.9, 0.3)
    assert "fusion cannot improve recall" in caplog.text
    with pytest.raises(ValueError):
        _params(1.2, 0.5, 0.9, 0.3)


def test_table_row_keys():
    row = recall_table_row(_params(0.4733, 0.6, 0.9, 0.3), trials=10_000)
    assert list(row) == ["p1", "p2", "p3", "k", "single", "fused", "gain", "monte_carlo"]
    assert row["gain"] == pytest.approx(row["fused"] - row["single"])
