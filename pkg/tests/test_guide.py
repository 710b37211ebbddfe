import math

import numpy as np
import pytest
from scipy import stats

from sdvi.autodiff import Tape, value_of
from sdvi.distributions import ExpTransform, IdentityTransform
from sdvi.errors import ConfigurationError, InitializationError
from sdvi.guide import (
    LocalGuide, Proposal, RejectionExhausted, TruncatedGuide, guide_log_prob, guide_sample, init_from_prior,
    prior_fit_objective, prior_samples_in_slp, softplus_inverse, truncated_sample,
)
from sdvi.models import model_fig1
from sdvi.ppl import Address
from sdvi.slp import SurrogateDensity, density_for, discover


def _two_site_guide():
    params = np.array([[0.5, softplus_inverse(2.0)], [-1.0, softplus_inverse(0.5)]])
    return LocalGuide(0, [Address("a", 0), Address("b", 0)], [IdentityTransform(), ExpTransform()], params)


def _fig1_slps(rng):
    return discover(model_fig1().program, 500, rng).slps


def test_log_prob_includes_the_jacobian():
    guide = _two_site_guide()
    x = np.array([[0.3, 0.8], [1.0, 2.0]])
    expected = stats.norm.logpdf(x[:, 0], 0.5, 2.0) + stats.lognorm.logpdf(x[:, 1], 0.5, scale=math.exp(-1.0))
    assert guide.log_prob_batch(x) == pytest.approx(expected, rel=1e-10)
    assert guide.log_prob_batch(np.array([[0.3, -1.0]]))[0] == -math.inf


def test_standard_sites():
    real = LocalGuide(0, [Address("a", 0)], [IdentityTransform()])
    positive = LocalGuide(0, [Address("b", 0)], [ExpTransform()])
    assert guide_log_prob(real, [0.0]) == pytest.approx(-0.9189385, abs=1e-7)
    assert guide_log_prob(positive, [1.0]) == pytest.approx(-0.9189385, abs=1e-7)
    assert guide_log_prob(positive, [0.0]) == -math.inf


def test_recorded_sample_carries_its_log_prob(rng):
    guide = _two_site_guide()
    leaves, values, log_q = guide_sample(guide, rng, Tape())
    assert len(leaves) == 4
    draws = [value_of(v) for v in values]
    assert value_of(log_q) == pytest.approx(guide_log_prob(guide, draws), rel=1e-10)
    assert len(guide_sample(guide, rng)) == 2


def test_score_matches_finite_differences():
    guide = _two_site_guide()
    x = np.array([[0.3, 0.8]])
    score = guide.score_batch(x)[0]
    h = 1e-6
    for i in range(2):
        for j in range(2):
            up, down = guide.copy(), guide.copy()
            up.params[i, j] += h
            down.params[i, j] -= h
            fd = (up.log_prob_batch(x)[0] - down.log_prob_batch(x)[0]) / (2 * h)
            assert score[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_samples_have_the_guide_moments(rng):
    guide = _two_site_guide()
    draws = guide.sample_batch(rng, 20000)
    assert draws[:, 0].mean() == pytest.approx(0.5, abs=0.05)
    assert draws[:, 0].std() == pytest.approx(2.0, rel=0.03)
    assert np.all(draws[:, 1] > 0)
    assert np.log(draws[:, 1]).mean() == pytest.approx(-1.0, abs=0.02)


def test_dict_round_trip_keeps_parameters():
    guide = _two_site_guide()
    restored = LocalGuide.from_dict(guide.to_dict())
    assert restored.addresses == guide.addresses
    assert [t.name for t in restored.transforms] == ["identity", "exp"]
    np.testing.assert_array_equal(restored.params, guide.params)


def test_for_slp_covers_continuous_sites(rng):
    slp = _fig1_slps(rng)[1]
    guide = LocalGuide.for_slp(slp)
    assert guide.addresses == (Address("x", 0), Address("z2", 0))
    with pytest.raises(ConfigurationError):
        guide.log_prob([0.1])


def test_prior_samples_are_filtered_by_membership(rng):
    slps = _fig1_slps(rng)
    program = model_fig1().program
    samples = prior_samples_in_slp(slps[0], program, 400, rng)
    assert 120 < samples.shape[0] < 280
    assert np.all(samples[:, 0] < 0)


def test_init_from_prior_fits_the_slp_prior(rng):
    slp = _fig1_slps(rng)[1]
    program = model_fig1().program
    guide = LocalGuide.for_slp(slp)
    samples = prior_samples_in_slp(slp, program, 500, np.random.default_rng(5))
    start = prior_fit_objective(guide, samples, 500)
    init_from_prior(slp, program, guide, 500, 200, np.random.default_rng(5), lr=0.01)
    assert prior_fit_objective(guide, samples, 500) > start
    # x restricted to x >= 0 has mean sqrt(2/pi); z2 ~ N(3, 1)
    assert guide.loc[0] == pytest.approx(math.sqrt(2 / math.pi), abs=0.15)
    assert guide.loc[1] == pytest.approx(3.0, abs=0.2)


def test_init_without_samples_in_the_slp_fails(rng):
    slp = _fig1_slps(rng)[0]
    program = model_fig1().program
    guide = LocalGuide.for_slp(slp)
    with pytest.raises(ConfigurationError):
        init_from_prior(slp, program, guide, 0, 10, rng)
    slp.path = (Address("x", 0), Address("nowhere", 0))
    with pytest.raises(InitializationError):
        init_from_prior(slp, program, guide, 50, 10, rng)


def test_truncated_sample_stays_in_the_slp(rng):
    slp = _fig1_slps(rng)[0]
    guide = LocalGuide.for_slp(slp)
    tguide = TruncatedGuide(guide, SurrogateDensity(slp))
    for _ in range(50):
        proposal = truncated_sample(tguide, rng)
        assert isinstance(proposal, Proposal)
        assert proposal.values[0] < 0
        assert proposal.attempts >= 1


def test_rejection_exhaustion_is_reported(rng):
    slp = _fig1_slps(rng)[0]
    guide = LocalGuide.for_slp(slp)
    guide.params[0] = [10.0, softplus_inverse(0.01)]
    tguide = TruncatedGuide(guide, density_for(slp), max_attempts=20)
    outcome = truncated_sample(tguide, rng)
    assert outcome == RejectionExhausted(slp.index, 20)
    with pytest.raises(ConfigurationError):
        truncated_sample(TruncatedGuide(guide, density_for(slp), max_attempts=0), rng)
