"""Full-budget runs against the analytic oracles; run with `pytest -m slow`."""
from typing import Dict, List

import numpy as np
import pytest

from sdvi.config import build_config
from sdvi.inference import evaluate, evaluate_bbvi, fit_sdvi, run_bbvi
from sdvi.mixture import SdviResult, global_elbo
from sdvi.models import build_model
from sdvi.utils import RngStreams

pytestmark = pytest.mark.slow

SEEDS = range(5)


def _fit(model_name: str, seed: int, **settings):
    config = build_config({"model": model_name, "seed": seed, **settings})
    model = build_model(config.model, **config.model_params)
    result = fit_sdvi(model, config, RngStreams(seed))
    return model, config, result


def _assert_weights_beat_random_simplex_points(result: SdviResult, seed: int):
    elbos = np.array(result.local_elbos)
    best = global_elbo(result.weights, elbos)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        other = rng.dirichlet(np.ones(len(elbos)))
        assert global_elbo(other, elbos) <= best + 1e-12


@pytest.fixture(scope="module")
def fig1_runs() -> List[Dict]:
    runs = []
    for seed in SEEDS:
        model, config, result = _fit("fig1", seed)
        bbvi = run_bbvi(model, config.model_copy(update={"algorithm": "bbvi"}), RngStreams(seed))
        runs.append({"model": model, "config": config, "result": result, "bbvi": bbvi})
    return runs


@pytest.fixture(scope="module")
def normal_intervals_runs() -> List[Dict]:
    runs = []
    for seed in SEEDS:
        model, config, result = _fit("normal_intervals", seed)
        runs.append({"result": result, "metrics": evaluate(model, result, config, RngStreams(seed))})
    return runs


@pytest.fixture(scope="module")
def gmm_runs() -> List[Dict]:
    runs = []
    for seed in SEEDS:
        model, config, result = _fit("gmm", seed, model_params={"dim": 2, "n": 200, "k_true": 3})
        metrics = evaluate(model, result, config, RngStreams(seed))
        bbvi_config = config.model_copy(update={"algorithm": "bbvi"})
        bbvi = run_bbvi(model, bbvi_config, RngStreams(seed))
        bbvi_metrics = evaluate_bbvi(model, bbvi, bbvi_config, RngStreams(seed))
        runs.append({"result": result, "metrics": metrics, "bbvi_metrics": bbvi_metrics})
    return runs


def test_fig1_recovers_the_branch_weights_and_beats_bbvi(fig1_runs):
    bbvi_below = 0
    for run in fig1_runs:
        result = run["result"]
        np.testing.assert_allclose(result.weights.probs, [0.0832, 0.9168], atol=0.02)
        assert result.global_elbo == pytest.approx(-2.430, abs=0.05)
        bbvi_below += run["bbvi"].elbo.value < result.global_elbo
    assert bbvi_below >= 4


def test_normal_intervals_weights_and_evidence(normal_intervals_runs):
    squared_errors = [run["metrics"]["weights_squared_error"] for run in normal_intervals_runs]
    gaps = [abs(run["metrics"]["elbo_gap"]) for run in normal_intervals_runs]
    assert all(len(run["result"].slps) == 10 for run in normal_intervals_runs)
    assert np.mean(squared_errors) <= 1e-3
    assert np.mean(gaps) <= 0.1


def test_normal_intervals_survivors_accept_almost_every_proposal(normal_intervals_runs):
    for run in normal_intervals_runs:
        result = run["result"]
        for k in result.diagnostics["survivors"]:
            assert result.estimates[k].acceptance_rate >= 0.95


def test_gmm_recovers_the_component_count(gmm_runs):
    assert sum(run["metrics"]["map_components"] == 3 for run in gmm_runs) >= 4


def test_gmm_predictive_density_is_at_least_bbvi(gmm_runs):
    for run in gmm_runs:
        assert run["metrics"]["lppd"] >= run["bbvi_metrics"]["lppd"]


def test_gmm_minibatch_training_matches_full_data():
    params = {"dim": 2, "n": 200, "k_true": 3}
    _, _, full = _fit("gmm", 0, model_params=params)
    _, _, batched = _fit("gmm", 0, model_params=params, batch_size=80)
    assert abs(batched.global_elbo - full.global_elbo) <= 1.0


def test_optimal_weights_are_optimal_on_every_run(fig1_runs, normal_intervals_runs, gmm_runs):
    for seed, run in enumerate(fig1_runs + normal_intervals_runs + gmm_runs):
        _assert_weights_beat_random_simplex_points(run["result"], seed)


def test_gp_prefers_a_periodic_kernel():
    periodic = 0
    for seed in SEEDS:
        model, _, result = _fit("gp_kernel", seed)
        periodic += "PER" in model.slp_summary(result.slps[result.top_slp()])
    assert periodic >= 3
