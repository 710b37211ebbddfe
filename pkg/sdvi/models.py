"""
Benchmark programs and their oracles.

    fig1              two-branch toy: x < 0 selects z1 or z2
    normal_intervals  u ~ N(0, 5^2) picks one of 10 intervals, x ~ N(z, 1)
    gmm               Gaussian mixture with K ~ Poisson(9) + 1 components
    gp_kernel         GP regression with a kernel drawn from a grammar

Oracles are computed in closed form with scipy, never by the engine.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from sdvi.autodiff import value_of
from sdvi.distributions import (
    Categorical, HalfNormal, InverseGamma, MixtureOfNormals, MultivariateNormal, Normal, Poisson,
)
from sdvi.errors import ConfigurationError
from sdvi.ppl import Address, AddressPath, Handler, PathDeviation, Program, replay
from sdvi.slp import Slp


logger = logging.getLogger(__name__)


@dataclass
class Oracle:
    slp_weights: Dict[AddressPath, float] = field(default_factory=dict)
    log_z: Optional[float] = None
    lppd: Optional[float] = None

    def weights_for(self, slps: Sequence[Slp]) -> Optional[np.ndarray]:
        """True weights aligned with the discovered SLPs (0 for unknown paths)."""
        if not self.slp_weights:
            return None
        return np.array([self.slp_weights.get(s.path, 0.0) for s in slps])


@dataclass
class Dataset:
    name: str
    seed: int
    columns: Dict[str, np.ndarray]
    split: Dict[str, int] = field(default_factory=dict)

    def manifest(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "sizes": {k: int(np.asarray(v).shape[0]) for k, v in self.columns.items()},
            "split": self.split,
        }


@dataclass
class BenchmarkModel:
    name: str
    program: Program
    oracle: Oracle = field(default_factory=Oracle)
    dataset: Optional[Dataset] = None
    differentiable: bool = True
    predictive: Optional[Callable[[Any], np.ndarray]] = None
    describe: Optional[Callable[[Any], str]] = None
    component_count: Optional[Callable[[Slp], int]] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def replay_return(self, draws: Sequence[Any]) -> Any:
        outcome = replay(self.program, draws)
        if isinstance(outcome, PathDeviation):
            raise ConfigurationError(f"{self.name}: draws do not replay ({outcome.reason})")
        if outcome.stopped:
            raise ConfigurationError(f"{self.name}: draws leave the support at {outcome.entries[-1].address.key()}")
        return outcome.return_value

    def pointwise_log_density(self, slp: Slp, draws: Sequence[Any]) -> np.ndarray:
        """Held-out pointwise predictive log-densities under one posterior sample."""
        if self.predictive is None:
            raise ConfigurationError(f"{self.name} has no held-out data")
        return self.predictive(self.replay_return(draws))

    def slp_summary(self, slp: Slp) -> str:
        if self.describe is None:
            return slp.label()
        try:
            return self.describe(self.replay_return(_representative_draws(slp)))
        except ConfigurationError:
            return slp.label()


def _representative_draws(slp: Slp) -> List[Any]:
    """A draw vector inside the SLP: fixed values plus 1.0 at free positions."""
    return slp.full_draws([1.0] * len(slp.free_positions))


# ============================================================================
# Two-branch toy
# ============================================================================

FIG1_Y = 2.0
FIG1_NOISE = 2.0


def _fig1(h: Handler, data: Dict[str, Any]) -> Any:
    x = h.sample("x", Normal(0.0, 1.0), branching=True)
    if x < 0:
        z = h.sample("z1", Normal(-3.0, 1.0))
    else:
        z = h.sample("z2", Normal(3.0, 1.0))
    h.observe("y", Normal(z, FIG1_NOISE), data["y"])
    return z


def model_fig1(y: float = FIG1_Y) -> BenchmarkModel:
    scale = math.sqrt(1.0 + FIG1_NOISE ** 2)
    z_left = 0.5 * stats.norm.pdf(y, loc=-3.0, scale=scale)
    z_right = 0.5 * stats.norm.pdf(y, loc=3.0, scale=scale)
    total = z_left + z_right
    oracle = Oracle(
        slp_weights={
            (Address("x", 0), Address("z1", 0)): z_left / total,
            (Address("x", 0), Address("z2", 0)): z_right / total,
        },
        log_z=math.log(total),
    )
    return BenchmarkModel("fig1", Program("fig1", _fig1, {"y": y}), oracle=oracle, params={"y": y})


# ============================================================================
# Ten-interval model
# ============================================================================

N_INTERVALS = 10
INTERVAL_PRIOR_SCALE = 5.0


def interval_index(u: float) -> int:
    """0 for u <= -4, k for u in (-5 + k, -4 + k], 9 for u > 4."""
    return int(min(max(math.ceil(u + 4.0), 0), N_INTERVALS - 1))


def _normal_intervals(h: Handler, data: Dict[str, Any]) -> Any:
    u = h.sample("u", Normal(0.0, INTERVAL_PRIOR_SCALE), branching=True)
    z = interval_index(value_of(u))
    x = h.sample(f"x_{z}", Normal(float(z), 1.0))
    h.observe("y", Normal(x, 1.0), data["y"])
    return z


def interval_masses() -> np.ndarray:
    edges = np.concatenate([[-np.inf], np.arange(-4.0, 5.0), [np.inf]])
    return np.diff(stats.norm.cdf(edges, loc=0.0, scale=INTERVAL_PRIOR_SCALE))


def model_normal_intervals(y: float = 2.0) -> BenchmarkModel:
    masses = interval_masses()
    evidence = masses * stats.norm.pdf(y, loc=np.arange(N_INTERVALS), scale=math.sqrt(2.0))
    total = float(evidence.sum())
    oracle = Oracle(
        slp_weights={(Address("u", 0), Address(f"x_{k}", 0)): float(evidence[k] / total) for k in range(N_INTERVALS)},
        log_z=math.log(total),
    )
    return BenchmarkModel("normal_intervals", Program("normal_intervals", _normal_intervals, {"y": y}),
                          oracle=oracle, params={"y": y})


# ============================================================================
# Gaussian mixture with unknown K
# ============================================================================

GMM_RATE = 9.0
GMM_PRIOR_SCALE = math.sqrt(10.0)
GMM_NOISE = math.sqrt(0.1)
GMM_MIN_SEPARATION = 2.0


def _gmm(h: Handler, data: Dict[str, Any]) -> Any:
    dim = data["dim"]
    k = h.sample("K", Poisson(GMM_RATE), branching=True) + 1
    means = [[h.sample("mu", Normal(0.0, GMM_PRIOR_SCALE)) for _ in range(dim)] for _ in range(k)]
    h.observe("y", MixtureOfNormals(means, GMM_NOISE), data["y"])
    return means


def gmm_dataset(dim: int, n: int, k_true: int, seed: int) -> Tuple[Dataset, np.ndarray]:
    """Well-separated clusters; returns the dataset and the true means."""
    rng = np.random.default_rng(seed)
    while True:
        means = rng.normal(0.0, GMM_PRIOR_SCALE, size=(k_true, dim))
        gaps = [np.linalg.norm(means[i] - means[j]) for i in range(k_true) for j in range(i + 1, k_true)]
        if not gaps or min(gaps) >= GMM_MIN_SEPARATION:
            break
    labels = rng.integers(k_true, size=n)
    y = means[labels] + GMM_NOISE * rng.standard_normal((n, dim))
    n_train = int(round(0.8 * n))
    dataset = Dataset(
        "gmm", seed,
        {"y_train": y[:n_train], "y_test": y[n_train:], "labels_train": labels[:n_train],
         "labels_test": labels[n_train:]},
        split={"train": n_train, "test": n - n_train},
    )
    return dataset, means


def _gmm_predictive(y_test: np.ndarray) -> Callable[[Any], np.ndarray]:
    def predictive(means: Any) -> np.ndarray:
        return MixtureOfNormals(means, GMM_NOISE).pointwise_log_prob(y_test)
    return predictive


def _gmm_components(slp: Slp) -> int:
    return int(slp.branching[0][1]) + 1


def model_gmm(dim: int = 2, n: int = 200, k_true: int = 3, data_seed: int = 0) -> BenchmarkModel:
    if dim < 1 or n < 2 or k_true < 1:
        raise ConfigurationError("gmm needs dim >= 1, n >= 2 and k_true >= 1")
    dataset, true_means = gmm_dataset(dim, n, k_true, data_seed)
    y_test = dataset.columns["y_test"]
    comp = stats.multivariate_normal
    log_pdf = np.stack([comp.logpdf(y_test, mean=m, cov=GMM_NOISE ** 2 * np.eye(dim)) for m in true_means])
    log_pdf = log_pdf.reshape(k_true, -1)
    oracle = Oracle(lppd=float(np.sum(logsumexp(log_pdf, axis=0) - math.log(k_true))))
    program = Program("gmm", _gmm, {"dim": dim, "y": dataset.columns["y_train"]}, batch_field="y")
    return BenchmarkModel(
        "gmm", program, oracle=oracle, dataset=dataset,
        predictive=_gmm_predictive(y_test),
        describe=lambda means: f"K={len(means)}",
        component_count=_gmm_components,
        params={"dim": dim, "n": n, "k_true": k_true, "data_seed": data_seed},
    )


# ============================================================================
# GP kernel structure
# ============================================================================

BASE_KERNELS = ("SE", "RQ", "PER", "LIN")
PRODUCTION_PROBS = (0.2, 0.2, 0.2, 0.2, 0.1, 0.1)
BASE_ONLY_PROBS = (0.25, 0.25, 0.25, 0.25, 0.0, 0.0)
PRODUCT, SUM = 4, 5
KERNEL_PARAMS = {
    "SE": ("lengthscale",),
    "RQ": ("lengthscale", "scale_mixture"),
    "PER": ("lengthscale", "period"),
    "LIN": ("bias",),
}
HYPER_PRIOR = (2.0, 1.0)
GP_JITTER = 1e-6


@dataclass
class Kernel:
    kind: str
    params: Dict[str, float] = field(default_factory=dict)
    left: Optional["Kernel"] = None
    right: Optional["Kernel"] = None

    def expression(self) -> str:
        if self.kind == "+":
            return f"({self.left.expression()} + {self.right.expression()})"
        if self.kind == "*":
            return f"({self.left.expression()} x {self.right.expression()})"
        return self.kind

    def base_kinds(self) -> List[str]:
        if self.kind in ("+", "*"):
            return self.left.base_kinds() + self.right.base_kinds()
        return [self.kind]

    def __call__(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        if self.kind == "+":
            return self.left(x1, x2) + self.right(x1, x2)
        if self.kind == "*":
            return self.left(x1, x2) * self.right(x1, x2)
        r = x1[:, None] - x2[None, :]
        p = self.params
        if self.kind == "SE":
            return np.exp(-0.5 * r ** 2 / p["lengthscale"] ** 2)
        if self.kind == "RQ":
            alpha = p["scale_mixture"]
            return (1.0 + 0.5 * r ** 2 / (alpha * p["lengthscale"] ** 2)) ** (-alpha)
        if self.kind == "PER":
            return np.exp(-2.0 * np.sin(np.pi * r / p["period"]) ** 2 / p["lengthscale"] ** 2)
        return p["bias"] + x1[:, None] * x2[None, :]


@dataclass
class GpSample:
    kernel: Kernel
    noise: float

    def expression(self) -> str:
        return self.kernel.expression()


def _sample_kernel(h: Handler, node: str, budget: int) -> Kernel:
    probs = PRODUCTION_PROBS if budget >= 3 else BASE_ONLY_PROBS
    choice = h.sample(node, Categorical(probs), branching=True)
    if choice in (PRODUCT, SUM):
        child_budget = (budget - 1) // 2
        left = _sample_kernel(h, f"{node}.l", child_budget)
        right = _sample_kernel(h, f"{node}.r", child_budget)
        return Kernel("*" if choice == PRODUCT else "+", left=left, right=right)
    kind = BASE_KERNELS[choice]
    params = {
        name: float(value_of(h.sample(f"{node}.{kind.lower()}.{name}", InverseGamma(*HYPER_PRIOR))))
        for name in KERNEL_PARAMS[kind]
    }
    return Kernel(kind, params)


def _gp(h: Handler, data: Dict[str, Any]) -> Any:
    kernel = _sample_kernel(h, "k", data["max_productions"])
    noise = float(value_of(h.sample("noise", HalfNormal(1.0))))
    x = data["x"]
    gram = kernel(x, x) + noise ** 2 * np.eye(x.shape[0])
    h.observe("y", MultivariateNormal(np.zeros(x.shape[0]), gram, jitter=GP_JITTER), data["y"])
    return GpSample(kernel, noise)


def gp_dataset(n: int, seed: int) -> Dataset:
    """Periodic signal plus linear trend, standardized; last 10% held out."""
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 5.0, n)
    f = np.sin(2.0 * np.pi * x) + 0.4 * x
    y = f + 0.1 * rng.standard_normal(n)
    y = (y - y.mean()) / y.std()
    n_test = max(1, int(round(0.1 * n)))
    n_train = n - n_test
    return Dataset("gp_kernel", seed,
                   {"x_train": x[:n_train], "y_train": y[:n_train], "x_test": x[n_train:], "y_test": y[n_train:]},
                   split={"train": n_train, "test": n_test})


def gp_predictive(sample: GpSample, x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray,
                  y_test: np.ndarray) -> np.ndarray:
    """Pointwise log N(y*; predictive mean, predictive variance + noise^2)."""
    gram = sample.kernel(x_train, x_train) + (sample.noise ** 2 + GP_JITTER) * np.eye(x_train.shape[0])
    factor = linalg.cho_factor(gram, lower=True)
    cross = sample.kernel(x_train, x_test)
    mean = cross.T @ linalg.cho_solve(factor, y_train)
    var = np.diag(sample.kernel(x_test, x_test)) - np.sum(cross * linalg.cho_solve(factor, cross), axis=0)
    var = np.maximum(var, 0.0) + sample.noise ** 2
    return stats.norm.logpdf(y_test, loc=mean, scale=np.sqrt(var))


def model_gp_kernel(n: int = 40, data_seed: int = 0, max_productions: int = 3) -> BenchmarkModel:
    if not 2 <= n <= 64:
        raise ConfigurationError("gp_kernel supports 2 <= n <= 64 points")
    if max_productions < 1:
        raise ConfigurationError("max_productions must be at least 1")
    dataset = gp_dataset(n, data_seed)
    cols = dataset.columns
    program = Program("gp_kernel", _gp, {"x": cols["x_train"], "y": cols["y_train"],
                                         "max_productions": max_productions})
    return BenchmarkModel(
        "gp_kernel", program, dataset=dataset, differentiable=False,
        predictive=lambda sample: gp_predictive(sample, cols["x_train"], cols["y_train"],
                                                cols["x_test"], cols["y_test"]),
        describe=lambda sample: sample.expression(),
        params={"n": n, "data_seed": data_seed, "max_productions": max_productions},
    )


MODELS: Dict[str, Callable[..., BenchmarkModel]] = {
    "fig1": model_fig1,
    "normal_intervals": model_normal_intervals,
    "gmm": model_gmm,
    "gp_kernel": model_gp_kernel,
}


def build_model(name: str, **params: Any) -> BenchmarkModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {', '.join(MODELS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for model {name}: {exc}") from exc
