"""Shared fixtures: an isolated runs directory and small programs."""
from typing import Any, Dict

import numpy as np
import pytest

from sdvi.distributions import Normal
from sdvi.ppl import Handler, Program


def _conjugate(h: Handler, data: Dict[str, Any]) -> Any:
    x = h.sample("x", Normal(0.0, 1.0))
    h.observe("y", Normal(x, 1.0), data["y"])
    return x


def _prior_only(h: Handler, data: Dict[str, Any]) -> Any:
    return h.sample("x", Normal(0.0, 1.0))


def _batched(h: Handler, data: Dict[str, Any]) -> Any:
    mu = h.sample("mu", Normal(0.0, 1.0))
    for i, y in enumerate(data["y"]):
        h.observe("y", Normal(mu, 1.0), y)
    return mu


@pytest.fixture(autouse=True)
def runs_dir(tmp_path, monkeypatch):
    """Every test writes its runs under a fresh directory."""
    directory = tmp_path / "runs"
    monkeypatch.setenv("SDVI_RUNS_DIR", str(directory))
    return directory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def conjugate_program():
    """x ~ N(0, 1), y | x ~ N(x, 1) with y = 2: posterior N(1, 1/2), log Z = log N(2; 0, 2)."""
    return Program("conjugate", _conjugate, {"y": 2.0})


@pytest.fixture
def prior_program():
    return Program("prior_only", _prior_only)


@pytest.fixture
def batched_program():
    return Program("batched", _batched, {"y": np.array([0.5, 1.0, 1.5, 2.0])}, batch_field="y")


@pytest.fixture
def small_fit() -> Dict[str, Any]:
    """Settings for a fig1 fit that finishes in a few seconds."""
    return {
        "model": "fig1",
        "seed": 0,
        "budget": 100,
        "discovery_sims": 200,
        "init_samples": 50,
        "init_iters": 20,
        "weight_samples": 200,
        "estimate_samples": 50,
        "surrogate_estimate_samples": 50,
        "lppd_samples": 20,
    }
