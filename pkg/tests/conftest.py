import sys

import numpy as np
import pytest

from tokencd.data import FeatureDataset, generate_synthetic_ridge, partition_even
from tokencd.objective import GlmSpec


def ridge_problem(N=50, d=20, K=4, seed=0, alpha=10.0):
    return partition_even(generate_synthetic_ridge(N, d, seed), K), GlmSpec.ridge(alpha)


def logistic_problem(N=60, d=24, K=4, seed=0, beta=1.0):
    rng = np.random.default_rng(1000 + seed)
    X = rng.choice([-1.0, 0.0, 1.0], size=(N, d))
    w = rng.standard_normal(d)
    y = (rng.random(N) < 1.0 / (1.0 + np.exp(-X @ w))).astype(float)
    return partition_even(FeatureDataset((X,), y), K), GlmSpec.logistic_l1(beta)


@pytest.fixture
def ridge_small():
    return ridge_problem()


@pytest.fixture
def logistic_small():
    return logistic_problem()


def pytest_terminal_summary(terminalreporter):
    """Print one pass/fail line per acceptance criterion when that module ran."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
