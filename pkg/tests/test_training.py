import math

import numpy as np
import pytest
from scipy import stats

from sdvi.distributions import IdentityTransform
from sdvi.errors import EstimatorSelectionError
from sdvi.guide import LocalGuide, TruncatedGuide, softplus_inverse
from sdvi.models import model_fig1
from sdvi.optim import MovingAverageBaseline
from sdvi.ppl import Address
from sdvi.slp import SlpMode, density_for, discover
from sdvi.training import (
    GradEstimatorKind, TrainingState, estimate_local_elbo, estimate_surrogate_elbo, select_estimator,
    surrogate_elbo_grad_step, train,
)

CONJUGATE_LOG_Z = stats.norm.logpdf(2.0, 0.0, math.sqrt(2.0))


def _single_slp(program, rng):
    slp = discover(program, 50, rng).slps[0]
    return slp, density_for(slp)


def test_estimator_selection():
    assert select_estimator(SlpMode.ELIMINATED) is GradEstimatorKind.REPARAMETERIZED
    assert select_estimator(SlpMode.SURROGATE) is GradEstimatorKind.SCORE_FUNCTION
    assert select_estimator(SlpMode.ELIMINATED, GradEstimatorKind.SCORE_FUNCTION) is GradEstimatorKind.SCORE_FUNCTION
    assert select_estimator(SlpMode.SURROGATE, GradEstimatorKind.REPARAMETERIZED) \
        is GradEstimatorKind.REPARAMETERIZED
    assert select_estimator(SlpMode.ELIMINATED, differentiable=False) is GradEstimatorKind.SCORE_FUNCTION
    with pytest.raises(EstimatorSelectionError):
        select_estimator(SlpMode.ELIMINATED, GradEstimatorKind.REPARAMETERIZED, differentiable=False)


def test_score_function_gradient_is_unbiased(rng):
    # target N(0, 1), guide N(mu, sigma): d ELBO / d mu = -mu, d ELBO / d sigma = 1 / sigma - sigma
    mu, sigma = 0.6, 1.4
    rho = softplus_inverse(sigma)
    guide = LocalGuide(0, [Address("x", 0)], [IdentityTransform()], np.array([[mu, rho]]))
    n = 200000
    x = guide.sample_batch(rng, n)
    rewards = stats.norm.logpdf(x[:, 0]) - guide.log_prob_batch(x)
    baselines = MovingAverageBaseline().baselines(rewards)
    per_particle = guide.score_batch(x)[:, 0, :] * (rewards - baselines)[:, None]
    estimate = per_particle.mean(axis=0)
    std_error = per_particle.std(axis=0) / math.sqrt(n)
    sigmoid = 1.0 / (1.0 + math.exp(-rho))
    exact = np.array([-mu, (1.0 / sigma - sigma) * sigmoid])
    assert np.all(np.abs(estimate - exact) < 4 * std_error + 1e-3)


def test_baseline_uses_earlier_batches_only():
    baseline = MovingAverageBaseline(momentum=0.5)
    first = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(baseline.baselines(first), [2.5, 2.0, 1.5])
    baseline.update(first)
    np.testing.assert_allclose(baseline.baselines(np.array([10.0, 20.0])), [2.0, 2.0])
    baseline.update(np.array([4.0, -np.inf]))
    assert baseline.value == pytest.approx(3.0)


def test_reparameterized_training_finds_the_conjugate_posterior(conjugate_program, rng):
    slp, density = _single_slp(conjugate_program, rng)
    assert density.mode is SlpMode.ELIMINATED
    state = TrainingState.create(LocalGuide.for_slp(slp, density.mode), 0.02, GradEstimatorKind.REPARAMETERIZED)
    rows = train(state, lambda r: density, 2500, 5, rng)
    assert len(rows) == 2500
    assert rows[-1]["iteration"] == 2500
    assert state.guide.loc[0] == pytest.approx(1.0, abs=0.15)
    assert state.guide.scale[0] == pytest.approx(math.sqrt(0.5), abs=0.15)
    estimate = estimate_local_elbo(TruncatedGuide(state.guide, density), 2000, rng)
    assert estimate.n_accepted == 2000
    assert estimate.value == pytest.approx(CONJUGATE_LOG_Z, abs=0.05)
    assert estimate.value <= CONJUGATE_LOG_Z + 4 * estimate.std_error


def test_score_function_training_improves_the_surrogate_elbo(conjugate_program, rng):
    slp, density = _single_slp(conjugate_program, rng)
    state = TrainingState.create(LocalGuide.for_slp(slp, density.mode), 0.02, GradEstimatorKind.SCORE_FUNCTION)
    before = estimate_surrogate_elbo(state.guide, density, 2000, np.random.default_rng(3))
    train(state, lambda r: density, 2000, 10, rng)
    after = estimate_surrogate_elbo(state.guide, density, 2000, np.random.default_rng(3))
    assert after > before
    assert state.guide.loc[0] == pytest.approx(1.0, abs=0.25)


def test_exact_guide_has_zero_gap(conjugate_program, rng):
    slp, density = _single_slp(conjugate_program, rng)
    guide = LocalGuide.for_slp(slp, density.mode)
    guide.params[0] = [1.0, softplus_inverse(math.sqrt(0.5))]
    estimate = estimate_local_elbo(TruncatedGuide(guide, density), 100, rng)
    assert estimate.value == pytest.approx(CONJUGATE_LOG_Z, abs=1e-9)
    assert estimate.std_error == pytest.approx(0.0, abs=1e-9)


def test_truncated_estimate_adds_the_acceptance_correction(rng):
    slp = discover(model_fig1().program, 500, rng).slps[0]
    density = density_for(slp)
    guide = LocalGuide.for_slp(slp)
    tguide = TruncatedGuide(guide, density)
    estimate = estimate_local_elbo(tguide, 4000, np.random.default_rng(11))
    assert 0.4 < estimate.acceptance_rate < 0.6
    assert tguide.acceptance_rate == estimate.acceptance_rate
    assert estimate.std_error > 0
    x = guide.sample_batch(np.random.default_rng(11), 4000)
    log_q = guide.log_prob_batch(x)
    terms = [density.log_density(row.tolist()) - lq for row, lq in zip(x, log_q) if row[0] < 0]
    assert estimate.n_accepted == len(terms)
    assert estimate.value == pytest.approx(np.mean(terms) + math.log(len(terms) / 4000), rel=1e-12)


def test_no_accepted_proposal_gives_minus_infinity(rng):
    slp = discover(model_fig1().program, 500, rng).slps[0]
    guide = LocalGuide.for_slp(slp)
    guide.params[0] = [10.0, softplus_inverse(0.01)]
    estimate = estimate_local_elbo(TruncatedGuide(guide, density_for(slp)), 50, rng)
    assert estimate.value == -math.inf
    assert estimate.n_accepted == 0


def test_step_counts_skipped_non_finite_gradients(rng):
    slp = discover(model_fig1().program, 500, rng).slps[0]
    density = density_for(slp)
    guide = LocalGuide.for_slp(slp)
    state = TrainingState.create(guide, 0.01, GradEstimatorKind.SCORE_FUNCTION)
    guide.params[0, 1] = math.inf
    before = guide.params.copy()
    step = surrogate_elbo_grad_step(state, density, 3, rng)
    assert step.skipped
    assert state.skipped_steps == 1
    np.testing.assert_array_equal(guide.params, before)
    with pytest.raises(EstimatorSelectionError):
        surrogate_elbo_grad_step(state, density, 0, rng)
