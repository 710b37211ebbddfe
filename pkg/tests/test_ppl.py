import math

import numpy as np
import pytest
from scipy import stats

from sdvi.distributions import Categorical, Normal
from sdvi.errors import ConfigurationError, ModelDomainError
from sdvi.models import build_model
from sdvi.ppl import (
    Address, PathDeviation, Program, Trace, log_density_at, replay, run_prior, sample_minibatch, set_minibatch,
)
from sdvi.slp import discover, membership, slp_log_density


def _repeated_sites(h, data):
    n = h.sample("n", Categorical((0.5, 0.5)), branching=True) + 1
    return [h.sample("x", Normal(0.0, 1.0)) for _ in range(n)]


def _bad_scale(h, data):
    s = h.sample("s", Normal(0.0, 1.0))
    h.observe("y", Normal(0.0, 1.0 / (s - s)), 0.0)


def test_addresses_count_repeated_sites(rng):
    program = Program("repeated", _repeated_sites)
    trace = replay(program, [1, 0.1, 0.2])
    assert isinstance(trace, Trace)
    assert trace.path == (Address("n", 0), Address("x", 0), Address("x", 1))
    assert trace.samples[0].branching
    assert not trace.samples[1].branching
    assert trace.return_value == [0.1, 0.2]


def test_replay_reproduces_prior_log_density(conjugate_program, rng):
    trace = run_prior(conjugate_program, rng)
    log_density, replayed = log_density_at(conjugate_program, trace.draws)
    assert log_density == trace.log_density
    x = trace.draws[0]
    expected = stats.norm.logpdf(x) + stats.norm.logpdf(2.0, x, 1.0)
    assert log_density == pytest.approx(expected, rel=1e-12)


def test_replay_deviations():
    program = Program("repeated", _repeated_sites)
    exhausted = replay(program, [1, 0.1])
    assert isinstance(exhausted, PathDeviation)
    assert exhausted.position == 2
    leftover = replay(program, [0, 0.1, 0.2])
    assert isinstance(leftover, PathDeviation)
    non_integer = replay(program, [0.5, 0.1])
    assert isinstance(non_integer, PathDeviation)
    assert non_integer.position == 0


def test_domain_error_names_the_last_address_reached():
    program = Program("bad", _bad_scale)
    with pytest.raises(ModelDomainError) as info:
        replay(program, [0.3])
    assert info.value.address == Address("s", 0)


def test_minibatch_scales_the_likelihood(batched_program):
    full = replay(batched_program, [0.7])
    view = set_minibatch(batched_program, [0, 2])
    assert view.scale == pytest.approx(2.0)
    half = replay(view, [0.7])
    y = batched_program.data["y"]
    expected = stats.norm.logpdf(0.7) + 2.0 * (stats.norm.logpdf(y[0], 0.7) + stats.norm.logpdf(y[2], 0.7))
    assert half.log_density == pytest.approx(expected, rel=1e-12)
    assert full.scale == 1.0


def test_minibatch_errors(batched_program, conjugate_program, rng):
    with pytest.raises(ConfigurationError):
        set_minibatch(batched_program, [])
    with pytest.raises(ConfigurationError):
        set_minibatch(batched_program, [0, 4])
    with pytest.raises(ConfigurationError):
        set_minibatch(set_minibatch(batched_program, [0, 1]), [0])
    with pytest.raises(ConfigurationError):
        set_minibatch(conjugate_program, [0])
    with pytest.raises(ConfigurationError):
        sample_minibatch(batched_program, 5, rng)
    assert sample_minibatch(batched_program, 4, rng) is batched_program


def test_sample_minibatch_draws_without_replacement(batched_program, rng):
    view = sample_minibatch(batched_program, 3, rng)
    assert len(view.data["y"]) == 3
    assert len(set(np.asarray(view.data["y"]).tolist())) == 3
    assert view.scale == pytest.approx(4 / 3)


def test_out_of_support_value_gives_minus_infinity():
    program = Program("repeated", _repeated_sites)
    trace = replay(program, [2, 0.1, 0.2, 0.3])
    assert isinstance(trace, Trace)
    assert trace.log_density == -math.inf
    assert trace.stopped
    assert trace.path == (Address("n", 0),)


@pytest.mark.parametrize("name, draws", [
    ("gp_kernel", [6, 1.0, 0.5]),
    ("gmm", [-1]),
    ("gmm", [-3, 0.1, 0.2]),
])
def test_benchmark_draws_outside_a_discrete_support_score_minus_infinity(name, draws):
    program = build_model(name, n=20).program
    log_density, trace = log_density_at(program, draws)
    assert log_density == -math.inf
    assert trace.stopped
    assert trace.return_value is None


def test_draws_outside_a_discrete_support_belong_to_no_slp(rng):
    model = build_model("gmm", n=20)
    slp = discover(model.program, 50, rng).slps[0]
    draws = [-1] + slp.full_draws([0.0] * len(slp.free_positions))[1:]
    assert not membership(slp, draws)
    assert slp_log_density(slp, draws) == -math.inf
    with pytest.raises(ConfigurationError):
        model.replay_return([-1])
