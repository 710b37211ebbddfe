import math

import numpy as np
import pytest
from scipy import stats

from sdvi.distributions import MultivariateNormal
from sdvi.errors import ConfigurationError, ModelDomainError
from sdvi.models import (
    BASE_KERNELS, GP_JITTER, Kernel, build_model, gmm_dataset, gp_dataset, interval_index, interval_masses,
    model_fig1, model_gmm, model_gp_kernel, model_normal_intervals,
)
from sdvi.ppl import Address, run_prior
from sdvi.slp import discover


def test_fig1_oracle():
    oracle = model_fig1().oracle
    left = oracle.slp_weights[(Address("x", 0), Address("z1", 0))]
    right = oracle.slp_weights[(Address("x", 0), Address("z2", 0))]
    assert left == pytest.approx(0.0832, abs=1e-4)
    assert right == pytest.approx(0.9168, abs=1e-4)
    assert oracle.log_z == pytest.approx(-2.430, abs=1e-3)


def test_interval_index_edges():
    assert interval_index(-4.0) == 0
    assert interval_index(-4.5) == 0
    assert interval_index(-3.999) == 1
    assert interval_index(-2.0) == 2
    assert interval_index(0.5) == 5
    assert interval_index(4.0) == 8
    assert interval_index(4.001) == 9


def test_normal_intervals_oracle():
    masses = interval_masses()
    assert masses.sum() == pytest.approx(1.0)
    assert masses[0] == pytest.approx(0.21186, abs=1e-5)
    model = model_normal_intervals()
    weights = model.oracle.slp_weights
    total = math.exp(model.oracle.log_z)
    z0 = weights[(Address("u", 0), Address("x_0", 0))] * total
    z2 = weights[(Address("u", 0), Address("x_2", 0))] * total
    assert z0 == pytest.approx(0.02199, abs=1e-5)
    assert z2 == pytest.approx(0.01984, abs=1e-5)
    assert sum(weights.values()) == pytest.approx(1.0)


def test_normal_intervals_program_follows_the_interval(rng):
    program = model_normal_intervals().program
    for _ in range(100):
        trace = run_prior(program, rng)
        u = trace.draws[0]
        assert trace.path[1] == Address(f"x_{interval_index(u)}", 0)


def test_gmm_dataset_is_deterministic_and_separated():
    first, means = gmm_dataset(2, 200, 3, seed=4)
    second, _ = gmm_dataset(2, 200, 3, seed=4)
    np.testing.assert_array_equal(first.columns["y_train"], second.columns["y_train"])
    assert first.split == {"train": 160, "test": 40}
    gaps = [np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)]
    assert min(gaps) >= 2.0


def test_gmm_slps_have_k_times_d_mean_sites(rng):
    model = model_gmm(dim=2, n=20)
    for slp in discover(model.program, 100, rng).slps:
        k = model.component_count(slp)
        assert slp.n_sites == 1 + 2 * k
        assert slp.branching == ((0, k - 1),)
    assert model.oracle.lppd is not None
    assert model.dataset.manifest()["sizes"]["y_test"] == 4


def test_gmm_predictive_shape(rng):
    model = model_gmm(dim=2, n=20)
    trace = run_prior(model.program, rng)
    assert model.predictive(trace.return_value).shape == (4,)


def test_gp_linear_kernel_on_one_point():
    kernel = Kernel("LIN", {"bias": 0.7})
    gram = kernel(np.array([0.0]), np.array([0.0]))
    np.testing.assert_allclose(gram, [[0.7]])
    dist = MultivariateNormal(np.zeros(1), gram + 0.25 * np.eye(1))
    assert dist.log_prob([0.4]) == pytest.approx(stats.norm.logpdf(0.4, 0.0, math.sqrt(0.95)), rel=1e-12)


def test_gp_marginal_likelihood_matches_a_direct_solve():
    x = np.array([0.0, 0.5, 1.3])
    y = np.array([0.2, -0.1, 0.4])
    kernel = Kernel("+", left=Kernel("SE", {"lengthscale": 0.8}),
                    right=Kernel("PER", {"lengthscale": 1.1, "period": 0.9}))
    cov = kernel(x, x) + 0.1 ** 2 * np.eye(3)
    sign, log_det = np.linalg.slogdet(cov)
    expected = -0.5 * y @ np.linalg.solve(cov, y) - 0.5 * log_det - 1.5 * math.log(2 * math.pi)
    assert sign > 0
    assert MultivariateNormal(np.zeros(3), cov, jitter=GP_JITTER).log_prob(y) == pytest.approx(expected, rel=1e-8)


def test_gp_kernel_structures(rng):
    model = model_gp_kernel(n=20)
    assert not model.differentiable
    expressions = set()
    for _ in range(200):
        try:
            trace = run_prior(model.program, rng)
        except ModelDomainError:
            continue
        sample = trace.return_value
        assert len(sample.kernel.base_kinds()) in (1, 2)
        assert set(sample.kernel.base_kinds()) <= set(BASE_KERNELS)
        expressions.add(sample.expression())
    assert len(expressions) > 4
    assert model.predictive(trace.return_value).shape == (2,)


def test_gp_dataset_is_standardized():
    data = gp_dataset(40, seed=0)
    y = np.concatenate([data.columns["y_train"], data.columns["y_test"]])
    assert y.mean() == pytest.approx(0.0, abs=1e-12)
    assert y.std() == pytest.approx(1.0)
    assert data.split == {"train": 36, "test": 4}


def test_slp_summary_uses_the_model_description(rng):
    model = model_gmm(n=20)
    slp = discover(model.program, 20, rng).slps[0]
    assert model.slp_summary(slp) == f"K={model.component_count(slp)}"
    fig1 = model_fig1()
    left = discover(fig1.program, 100, rng).slps[0]
    assert fig1.slp_summary(left) == "x[0] z1[0]"


def test_replay_return_of_bad_draws_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        model_fig1().replay_return([0.5])


def test_build_model():
    assert build_model("normal_intervals", y=1.0).params == {"y": 1.0}
    with pytest.raises(ConfigurationError):
        build_model("nope")
    with pytest.raises(ConfigurationError):
        build_model("fig1", unknown=1)
    with pytest.raises(ConfigurationError):
        model_gp_kernel(n=100)
