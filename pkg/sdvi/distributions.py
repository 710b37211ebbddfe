"""
Distribution kernels used by the benchmark programs.

Every family exposes log_prob / sample / support; log_prob works on floats
and on DualVars alike, so the same density code serves prior simulation,
replay and reparameterized gradients. Positive-support families are paired
with a bijection to the real line (see biject_to) so that mean-field normal
guides can live in unconstrained space.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, softmax

from sdvi import autodiff as ad
from sdvi.autodiff import DualVar, Scalar, Tape, value_of
from sdvi.errors import ConfigurationError, EstimatorSelectionError


HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)
SQRT_2 = math.sqrt(2.0)


class SupportSpec(str, Enum):
    REAL = "real"
    POSITIVE = "positive"
    NONNEGATIVE_INTEGER = "nonnegative_integer"
    FINITE = "finite"

    @property
    def is_discrete(self) -> bool:
        return self in (SupportSpec.NONNEGATIVE_INTEGER, SupportSpec.FINITE)


def _is_integral(value: Any) -> bool:
    try:
        return float(value_of(value)).is_integer()
    except (TypeError, ValueError):
        return False


def _require_positive(name: str, value: Scalar) -> None:
    v = value_of(value)
    if not v > 0 or math.isinf(v):
        raise ConfigurationError(f"{name} must be positive and finite, got {v}")


class Distribution:
    """Common interface of all families."""

    support: SupportSpec = SupportSpec.REAL

    def log_prob(self, value: Any) -> Scalar:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> Any:
        raise NotImplementedError

    def in_support(self, value: Any) -> bool:
        return True

    def describe(self) -> Dict[str, Any]:
        return {"family": type(self).__name__}


@dataclass(frozen=True)
class Normal(Distribution):
    loc: Scalar
    scale: Scalar
    support = SupportSpec.REAL

    def __post_init__(self) -> None:
        _require_positive("Normal scale", self.scale)

    def log_prob(self, value: Any) -> Scalar:
        z = (value - self.loc) / self.scale
        return -0.5 * z * z - ad.log(self.scale) - HALF_LOG_2PI

    def sample(self, rng: np.random.Generator) -> float:
        return value_of(self.loc) + value_of(self.scale) * rng.standard_normal()

    def describe(self) -> Dict[str, Any]:
        return {"family": "Normal", "loc": value_of(self.loc), "scale": value_of(self.scale)}


@dataclass(frozen=True)
class HalfNormal(Distribution):
    scale: Scalar
    support = SupportSpec.POSITIVE

    def __post_init__(self) -> None:
        _require_positive("HalfNormal scale", self.scale)

    def in_support(self, value: Any) -> bool:
        return value_of(value) >= 0

    def log_prob(self, value: Any) -> Scalar:
        if not self.in_support(value):
            return -math.inf
        z = value / self.scale
        return LOG_2 - 0.5 * z * z - ad.log(self.scale) - HALF_LOG_2PI

    def sample(self, rng: np.random.Generator) -> float:
        return abs(value_of(self.scale) * rng.standard_normal())

    def describe(self) -> Dict[str, Any]:
        return {"family": "HalfNormal", "scale": value_of(self.scale)}


@dataclass(frozen=True)
class Poisson(Distribution):
    rate: Scalar
    support = SupportSpec.NONNEGATIVE_INTEGER

    def __post_init__(self) -> None:
        _require_positive("Poisson rate", self.rate)

    def in_support(self, value: Any) -> bool:
        return _is_integral(value) and value_of(value) >= 0

    def log_prob(self, value: Any) -> Scalar:
        if not self.in_support(value):
            return -math.inf
        k = int(value_of(value))
        return k * ad.log(self.rate) - self.rate - math.lgamma(k + 1)

    def sample(self, rng: np.random.Generator) -> int:
        # inversion with cumulative summation of the pmf
        rate = value_of(self.rate)
        u = rng.random()
        k = 0
        p = math.exp(-rate)
        cdf = p
        while u > cdf and p > 0.0:
            k += 1
            p *= rate / k
            cdf += p
        return k

    def describe(self) -> Dict[str, Any]:
        return {"family": "Poisson", "rate": value_of(self.rate)}


@dataclass(frozen=True)
class Categorical(Distribution):
    probs: Tuple[float, ...]
    support = SupportSpec.FINITE

    def __post_init__(self) -> None:
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs or any(p < 0 for p in probs):
            raise ConfigurationError("Categorical probabilities must be non-empty and nonnegative")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigurationError(f"Categorical probabilities sum to {sum(probs)}, not 1")

    def in_support(self, value: Any) -> bool:
        return _is_integral(value) and 0 <= value_of(value) < len(self.probs)

    def log_prob(self, value: Any) -> float:
        if not self.in_support(value):
            return -math.inf
        p = self.probs[int(value_of(value))]
        return math.log(p) if p > 0 else -math.inf

    def sample(self, rng: np.random.Generator) -> int:
        cumulative = np.cumsum(self.probs)
        index = int(np.searchsorted(cumulative, rng.random(), side="right"))
        return min(index, len(self.probs) - 1)

    def describe(self) -> Dict[str, Any]:
        return {"family": "Categorical", "probs": list(self.probs)}


@dataclass(frozen=True)
class InverseGamma(Distribution):
    concentration: Scalar
    rate: Scalar
    support = SupportSpec.POSITIVE

    def __post_init__(self) -> None:
        _require_positive("InverseGamma concentration", self.concentration)
        _require_positive("InverseGamma rate", self.rate)

    def in_support(self, value: Any) -> bool:
        return value_of(value) > 0

    def log_prob(self, value: Any) -> Scalar:
        if not self.in_support(value):
            return -math.inf
        a = self.concentration
        b = self.rate
        return a * ad.log(b) - math.lgamma(value_of(a)) - (a + 1.0) * ad.log(value) - b / value

    def sample(self, rng: np.random.Generator) -> float:
        return value_of(self.rate) / rng.gamma(value_of(self.concentration), 1.0)

    def describe(self) -> Dict[str, Any]:
        return {"family": "InverseGamma", "concentration": value_of(self.concentration),
                "rate": value_of(self.rate)}


@dataclass(frozen=True)
class MixtureOfNormals(Distribution):
    """
    Uniform mixture of isotropic normals sharing one scale.

    means is a (K, D) nested sequence whose entries may be DualVars; values
    are a single D-vector or an (N, D) batch, in which case log_prob returns
    the summed log-density of all rows.
    """
    means: Any
    scale: float
    support = SupportSpec.REAL

    def __post_init__(self) -> None:
        _require_positive("MixtureOfNormals scale", self.scale)
        if len(self.means) == 0:
            raise ConfigurationError("MixtureOfNormals needs at least one component")

    def _mean_values(self) -> np.ndarray:
        return np.array([[value_of(m) for m in row] for row in self.means], dtype=float)

    def _component_log_probs(self, values: np.ndarray, means: np.ndarray) -> np.ndarray:
        diff = values[:, None, :] - means[None, :, :]
        d = values.shape[1]
        sq = np.sum(diff * diff, axis=2) / (self.scale * self.scale)
        return -0.5 * sq - d * math.log(self.scale) - d * HALF_LOG_2PI

    def pointwise_log_prob(self, values: Any) -> np.ndarray:
        y = np.atleast_2d(np.asarray(values, dtype=float))
        comp = self._component_log_probs(y, self._mean_values())
        return logsumexp(comp, axis=1) - math.log(comp.shape[1])

    def log_prob(self, values: Any) -> Scalar:
        y = np.atleast_2d(np.asarray(values, dtype=float))
        means = self._mean_values()
        comp = self._component_log_probs(y, means)
        total = float(np.sum(logsumexp(comp, axis=1))) - y.shape[0] * math.log(comp.shape[1])
        flat = [m for row in self.means for m in row]
        if not any(isinstance(m, DualVar) for m in flat):
            return total
        # d total / d mean[k, d] = sum_n r_nk (y_nd - mean_kd) / scale^2
        resp = softmax(comp, axis=1)
        grad = np.einsum("nk,nkd->kd", resp, y[:, None, :] - means[None, :, :]) / (self.scale ** 2)
        return ad.linearized(total, flat, grad.ravel().tolist())

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        means = self._mean_values()
        k = int(rng.integers(means.shape[0]))
        return means[k] + self.scale * rng.standard_normal(means.shape[1])

    def describe(self) -> Dict[str, Any]:
        return {"family": "MixtureOfNormals", "n_components": len(self.means), "scale": self.scale}


class MultivariateNormal(Distribution):
    """
    Dense-covariance normal, float-only, factorized once by Cholesky.

    A covariance that fails to factorize gets jitter * I added once; a
    second failure is a domain error.
    """

    support = SupportSpec.REAL

    def __init__(self, loc: Any, covariance: Any, jitter: float = 1e-6):
        self.loc = np.asarray(loc, dtype=float)
        self.covariance = np.asarray(covariance, dtype=float)
        if not np.all(np.isfinite(self.covariance)):
            raise ad.DomainError("covariance has non-finite entries")
        try:
            self.factor = linalg.cho_factor(self.covariance, lower=True)
        except linalg.LinAlgError:
            try:
                jittered = self.covariance + jitter * np.eye(self.covariance.shape[0])
                self.factor = linalg.cho_factor(jittered, lower=True)
            except linalg.LinAlgError as exc:
                raise ad.DomainError("covariance is not positive definite") from exc

    def log_prob(self, value: Any) -> float:
        r = np.asarray(value, dtype=float) - self.loc
        alpha = linalg.cho_solve(self.factor, r)
        log_det = 2.0 * float(np.sum(np.log(np.diag(self.factor[0]))))
        n = r.shape[0]
        return float(-0.5 * r @ alpha - 0.5 * log_det - n * HALF_LOG_2PI)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        lower = np.tril(self.factor[0])
        return self.loc + lower @ rng.standard_normal(self.loc.shape[0])

    def describe(self) -> Dict[str, Any]:
        return {"family": "MultivariateNormal", "dim": int(self.loc.shape[0])}


def log_prob(dist: Distribution, value: Any) -> Scalar:
    return dist.log_prob(value)


def sample(dist: Distribution, rng: np.random.Generator) -> Any:
    return dist.sample(rng)


def reparam_sample(dist: Distribution, rng: np.random.Generator, tape: Tape,
                   eps: Optional[float] = None) -> DualVar:
    """Draw loc + scale * eps with eps ~ N(0, 1), recorded on the tape."""
    if not isinstance(dist, Normal):
        raise EstimatorSelectionError(f"no reparameterization for {type(dist).__name__}")
    if eps is None:
        eps = float(rng.standard_normal())
    return tape.lift(dist.loc) + tape.lift(dist.scale) * eps


def normal_cdf(x: Scalar, mu: Scalar = 0.0, sigma: Scalar = 1.0) -> Scalar:
    """Phi((x - mu) / sigma) through erf."""
    _require_positive("normal_cdf sigma", sigma)
    return 0.5 * (1.0 + ad.erf((x - mu) / (sigma * SQRT_2)))


# ============================================================================
# Bijections to unconstrained space
# ============================================================================

class Transform:
    """Map from unconstrained z to the support: x = forward(z)."""

    name = "identity"

    def forward(self, z: Scalar) -> Scalar:
        return z

    def inverse(self, x: Scalar) -> Scalar:
        return x

    def log_abs_det_jacobian(self, z: Scalar) -> Scalar:
        return 0.0


class IdentityTransform(Transform):
    name = "identity"


class ExpTransform(Transform):
    name = "exp"

    def forward(self, z: Scalar) -> Scalar:
        return ad.exp(z)

    def inverse(self, x: Scalar) -> Scalar:
        if value_of(x) <= 0:
            raise ad.DomainError(f"value {value_of(x)} outside the positive reals")
        return ad.log(x)

    def log_abs_det_jacobian(self, z: Scalar) -> Scalar:
        return z


_TRANSFORMS = {
    SupportSpec.REAL: IdentityTransform(),
    SupportSpec.POSITIVE: ExpTransform(),
}


def biject_to(support: SupportSpec) -> Transform:
    try:
        return _TRANSFORMS[support]
    except KeyError:
        raise ConfigurationError(f"no bijection to the real line for {support.value} support") from None


def transform_by_name(name: str) -> Transform:
    for transform in _TRANSFORMS.values():
        if transform.name == name:
            return transform
    raise ConfigurationError(f"unknown transform {name}")
