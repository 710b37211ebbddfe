import math

import numpy as np
import pytest

from sdvi.distributions import Normal
from sdvi.errors import ConfigurationError, DiscoveryError, ModelDomainError
from sdvi.models import model_fig1, model_gmm, model_gp_kernel, model_normal_intervals
from sdvi.ppl import Address, Program, run_prior
from sdvi.slp import (
    LOG_FLOOR_FRACTION, NotApplicable, ReducedDensity, SlpMode, SurrogateDensity, density_for, discover,
    eliminate_discrete_branching, floor_from_d_min, membership, merge_reports, reindex, slp_log_density,
    surrogate_log_density,
)


def _never_finite(h, data):
    x = h.sample("x", Normal(0.0, 1.0))
    h.observe("y", Normal(x, 1.0), math.inf)


def test_fig1_has_two_slps(rng):
    report = discover(model_fig1().program, 1000, rng)
    assert len(report.slps) == 2
    assert [s.path for s in report.slps] == [
        (Address("x", 0), Address("z1", 0)),
        (Address("x", 0), Address("z2", 0)),
    ]
    assert sum(report.hit_counts) == 1000
    assert report.slps[0].log_c == pytest.approx(report.d_min + LOG_FLOOR_FRACTION)
    assert floor_from_d_min(-10.0) == pytest.approx(-14.605, abs=1e-3)
    assert all(s.log_c < report.d_min for s in report.slps)


def test_normal_intervals_has_ten_slps(rng):
    report = discover(model_normal_intervals().program, 1000, rng)
    assert [s.path[1] for s in report.slps] == [Address(f"x_{k}", 0) for k in range(10)]


def test_discovery_does_not_depend_on_workers():
    program = model_normal_intervals().program
    one = discover(program, 600, np.random.default_rng(7), workers=1)
    four = discover(program, 600, np.random.default_rng(7), workers=4)
    assert [s.path for s in one.slps] == [s.path for s in four.slps]
    assert one.hit_counts == four.hit_counts
    assert one.d_min == four.d_min


def test_discovery_without_finite_traces_fails(rng):
    with pytest.raises(DiscoveryError):
        discover(Program("never", _never_finite), 10, rng)
    with pytest.raises(ConfigurationError):
        discover(model_fig1().program, 0, rng)


@pytest.mark.parametrize("factory", [
    model_fig1, model_normal_intervals, lambda: model_gmm(n=20), lambda: model_gp_kernel(n=20),
], ids=["fig1", "normal_intervals", "gmm", "gp_kernel"])
def test_every_trace_lies_in_exactly_one_slp(factory, rng):
    program = factory().program
    slps = discover(program, 2000, rng).slps
    known = {s.path for s in slps}
    covered = 0
    for _ in range(1000):
        try:
            trace = run_prior(program, rng)
        except ModelDomainError:
            continue
        owners = [s for s in slps if membership(s, trace.draws)]
        if trace.path not in known:
            assert owners == []
            continue
        covered += 1
        assert len(owners) == 1
        assert owners[0].path == trace.path
        assert slp_log_density(owners[0], trace.draws) == trace.log_density
        for other in slps:
            if other is not owners[0]:
                assert slp_log_density(other, trace.draws) == -math.inf
    assert covered >= 900


def test_surrogate_floor_outside_the_slp(rng):
    slps = discover(model_fig1().program, 500, rng).slps
    left = slps[0]
    inside = [-0.5, -3.0]
    outside = [0.5, -3.0]
    assert surrogate_log_density(left, inside) == slp_log_density(left, inside)
    assert surrogate_log_density(left, outside) == left.log_c
    left.log_c = None
    with pytest.raises(ConfigurationError):
        surrogate_log_density(left, outside)


def test_density_modes(rng):
    fig1 = discover(model_fig1().program, 500, rng).slps[0]
    assert isinstance(eliminate_discrete_branching(fig1), NotApplicable)
    assert isinstance(density_for(fig1), SurrogateDensity)

    gmm = discover(model_gmm(n=20).program, 50, rng).slps[0]
    reduced = density_for(gmm)
    assert isinstance(reduced, ReducedDensity)
    assert reduced.mode is SlpMode.ELIMINATED
    assert gmm.free_positions == tuple(range(1, gmm.n_sites))
    assert len(gmm.full_draws([0.0] * (gmm.n_sites - 1))) == gmm.n_sites


def test_merge_and_reindex(rng):
    program = model_normal_intervals().program
    first = discover(program, 20, np.random.default_rng(1))
    second = discover(program, 2000, np.random.default_rng(2))
    known = list(first.slps)
    merged, fresh = merge_reports(known, second, min(first.d_min, second.d_min))
    assert len(merged) == 10
    assert len(fresh) == 10 - len(first.slps)
    assert [s.index for s in merged] == list(range(10))
    assert all(s.log_c == merged[0].log_c for s in merged)
    ordered = reindex(merged)
    assert [s.path for s in ordered] == sorted(s.path for s in merged)
    assert [s.index for s in ordered] == list(range(10))
