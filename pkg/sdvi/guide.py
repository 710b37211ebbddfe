"""
Local variational guides.

A LocalGuide is a mean-field normal over the unconstrained images of one
SLP's free coordinates: positive sites go through a log bijection, real
sites through the identity. Scales are parameterized as softplus(rho).

Parameters live in one (n_sites, 2) array of [mu, rho] rows so optimizers
can treat the guide as a flat vector.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from sdvi import autodiff as ad
from sdvi.autodiff import DualVar, Scalar, Tape
from sdvi.distributions import HALF_LOG_2PI, Transform, biject_to, transform_by_name
from sdvi.errors import ConfigurationError, InitializationError, ModelDomainError
from sdvi.optim import AdamState
from sdvi.ppl import Address, Handler, Program, execute, Trace
from sdvi.slp import Slp, SlpDensity, SlpMode


logger = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 1000


def softplus_inverse(sigma: float) -> float:
    return sigma + math.log(-math.expm1(-sigma))


class LocalGuide:
    """Mean-field normal guide over one SLP's free coordinates."""

    def __init__(self, slp_index: int, addresses: Sequence[Address], transforms: Sequence[Transform],
                 params: Optional[np.ndarray] = None, mode: SlpMode = SlpMode.SURROGATE):
        if len(addresses) != len(transforms):
            raise ConfigurationError("one transform per guide site is required")
        self.slp_index = slp_index
        self.addresses = tuple(addresses)
        self.transforms = tuple(transforms)
        self.mode = mode
        n = len(self.addresses)
        if params is None:
            params = np.zeros((n, 2))
            params[:, 1] = softplus_inverse(1.0)
        self.params = np.array(params, dtype=float).reshape(n, 2)
        self._positive = np.array([t.name == "exp" for t in self.transforms], dtype=bool)

    @classmethod
    def for_slp(cls, slp: Slp, mode: SlpMode = SlpMode.SURROGATE) -> "LocalGuide":
        positions = slp.free_positions
        for p in positions:
            if slp.supports[p].is_discrete:
                raise ConfigurationError(
                    f"SLP {slp.index}: local guides cover continuous sites only ({slp.path[p].key()})")
        return cls(slp.index, [slp.path[p] for p in positions],
                   [biject_to(slp.supports[p]) for p in positions], mode=mode)

    @property
    def n_sites(self) -> int:
        return len(self.addresses)

    @property
    def loc(self) -> np.ndarray:
        return self.params[:, 0]

    @property
    def scale(self) -> np.ndarray:
        return np.logaddexp(0.0, self.params[:, 1])

    def copy(self) -> "LocalGuide":
        return LocalGuide(self.slp_index, self.addresses, self.transforms, self.params.copy(), self.mode)

    # --- unconstrained <-> constrained -----------------------------------

    def to_unconstrained(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self._positive, np.log(np.where(self._positive, x, 1.0)), x)

    def to_constrained(self, z: np.ndarray) -> np.ndarray:
        return np.where(self._positive, np.exp(np.where(self._positive, z, 0.0)), z)

    def _log_jacobian(self, z: np.ndarray) -> np.ndarray:
        return np.sum(np.where(self._positive, z, 0.0), axis=-1)

    # --- density and sampling -------------------------------------------

    def log_prob_batch(self, x: np.ndarray) -> np.ndarray:
        """log q for each row of an (n, n_sites) array; -inf outside the support."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        outside = np.any(self._positive & ~(x > 0), axis=1)
        z = self.to_unconstrained(x)
        mu, sigma = self.loc, self.scale
        u = (z - mu) / sigma
        lp = np.sum(-0.5 * u * u - np.log(sigma) - HALF_LOG_2PI, axis=1) - self._log_jacobian(z)
        return np.where(outside, -np.inf, lp)

    def log_prob(self, values: Sequence[Any]) -> float:
        if len(values) != self.n_sites:
            raise ConfigurationError(f"expected {self.n_sites} values, got {len(values)}")
        if self.n_sites == 0:
            return 0.0
        return float(self.log_prob_batch(np.array([ad.value_of(v) for v in values]))[0])

    def score_batch(self, x: np.ndarray) -> np.ndarray:
        """Gradient of log q w.r.t. [mu, rho] for each row: shape (n, n_sites, 2)."""
        z = self.to_unconstrained(np.atleast_2d(np.asarray(x, dtype=float)))
        mu, rho = self.params[:, 0], self.params[:, 1]
        sigma = np.logaddexp(0.0, rho)
        diff = z - mu
        d_mu = diff / sigma ** 2
        d_sigma = diff ** 2 / sigma ** 3 - 1.0 / sigma
        return np.stack([d_mu, d_sigma * expit(rho)], axis=-1)

    def sample_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        eps = rng.standard_normal((n, self.n_sites))
        return self.to_constrained(self.loc + self.scale * eps)

    def sample(self, rng: np.random.Generator) -> List[float]:
        return [float(v) for v in self.sample_batch(rng, 1)[0]]

    def reparam_sample(self, rng: np.random.Generator, tape: Tape) -> Tuple[List[DualVar], List[Scalar], Scalar]:
        """
        Draw x = T(mu + sigma * eps) on the tape.

        Returns the parameter leaves in params.ravel() order, the constrained
        values and log q(x) as tape expressions.
        """
        eps = rng.standard_normal(self.n_sites)
        leaves: List[DualVar] = []
        values: List[Scalar] = []
        log_q: Scalar = 0.0
        for i, transform in enumerate(self.transforms):
            mu = tape.variable(self.params[i, 0])
            rho = tape.variable(self.params[i, 1])
            leaves.extend((mu, rho))
            sigma = ad.softplus(rho)
            z = mu + sigma * float(eps[i])
            values.append(transform.forward(z))
            log_q = log_q + (-0.5 * float(eps[i]) ** 2 - HALF_LOG_2PI) - ad.log(sigma) \
                - transform.log_abs_det_jacobian(z)
        return leaves, values, log_q

    # --- serialization --------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return {
            "slp_index": self.slp_index,
            "mode": self.mode.value,
            "sites": [
                {"address": a.as_list(), "transform": t.name, "loc": float(p[0]), "raw_scale": float(p[1])}
                for a, t, p in zip(self.addresses, self.transforms, self.params)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LocalGuide":
        sites = data["sites"]
        return cls(
            data["slp_index"],
            [Address(s["address"][0], int(s["address"][1])) for s in sites],
            [transform_by_name(s["transform"]) for s in sites],
            np.array([[s["loc"], s["raw_scale"]] for s in sites], dtype=float).reshape(len(sites), 2),
            SlpMode(data.get("mode", SlpMode.SURROGATE.value)),
        )


def guide_log_prob(guide: LocalGuide, draws: Sequence[Any]) -> float:
    """log q(draws) in constrained space; -inf outside a site's range."""
    return guide.log_prob(draws)


def guide_sample(guide: LocalGuide, rng: np.random.Generator, tape: Optional[Tape] = None):
    """Plain draws, or (leaves, values, log q) recorded on tape for reparameterization."""
    if tape is None:
        return guide.sample(rng)
    return guide.reparam_sample(rng, tape)


# ============================================================================
# Initialization from the prior
# ============================================================================

class _ConditionedPriorHandler(Handler):
    """Prior simulation with selected path positions pinned to fixed values."""

    def __init__(self, rng: np.random.Generator, fixed: Dict[int, Any]):
        super().__init__()
        self.rng = rng
        self.fixed = fixed

    def _draw(self, address, dist, position):
        if position in self.fixed:
            return self.fixed[position]
        return dist.sample(self.rng)


def prior_samples_in_slp(slp: Slp, program: Program, n_samples: int, rng: np.random.Generator,
                         conditioned: bool = False) -> np.ndarray:
    """
    Free-coordinate values of prior traces that fall in the SLP.

    Whole-program prior simulations filtered by membership; with
    conditioned=True the SLP's discrete branching values are pinned, which
    puts every simulation on the SLP's path.
    """
    fixed = slp.fixed_values if conditioned else {}
    positions = slp.free_positions
    rows = []
    for _ in range(n_samples):
        try:
            outcome = execute(program, _ConditionedPriorHandler(rng, fixed))
        except ModelDomainError:
            continue
        if not isinstance(outcome, Trace) or outcome.path != slp.path:
            continue
        draws = outcome.draws
        if any(draws[p] != v for p, v in slp.fixed_values.items()):
            continue
        rows.append([float(draws[p]) for p in positions])
    return np.array(rows, dtype=float).reshape(len(rows), len(positions))


def prior_fit_objective(guide: LocalGuide, samples: np.ndarray, n_total: int) -> float:
    """(1/N) sum over in-SLP samples of log q; the other samples contribute 0."""
    if samples.shape[0] == 0:
        return -math.inf
    return float(np.sum(guide.log_prob_batch(samples)) / n_total)


def init_from_prior(slp: Slp, program: Program, guide: LocalGuide, n_init_samples: int, n_init_iters: int,
                    rng: np.random.Generator, lr: float = 0.01) -> LocalGuide:
    """
    Fit the guide to the SLP's prior by maximizing the mean log q of a fixed
    set of prior samples, starting from the empirical moments.
    """
    if n_init_samples < 1:
        raise ConfigurationError("n_init_samples must be at least 1")
    if guide.n_sites == 0:
        return guide
    conditioned = guide.mode is SlpMode.ELIMINATED
    samples = prior_samples_in_slp(slp, program, n_init_samples, rng, conditioned=conditioned)
    if samples.shape[0] == 0:
        raise InitializationError(f"SLP {slp.index}: none of {n_init_samples} prior samples fell in the SLP",
                                  slp_index=slp.index)

    z = guide.to_unconstrained(samples)
    guide.params[:, 0] = z.mean(axis=0)
    if z.shape[0] >= 2:
        std = z.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    else:
        std = np.ones(guide.n_sites)
    guide.params[:, 1] = [softplus_inverse(s) for s in std]

    adam = AdamState.for_params(guide.params, lr)
    for _ in range(n_init_iters):
        grad = guide.score_batch(samples).sum(axis=0) / n_init_samples
        if not np.all(np.isfinite(grad)):
            break
        adam.step(guide.params, grad)
    logger.debug("SLP %d initialized from %d/%d prior samples", slp.index, samples.shape[0], n_init_samples)
    return guide


# ============================================================================
# Truncation by rejection
# ============================================================================

class Proposal(NamedTuple):
    values: List[float]
    attempts: int


@dataclass(frozen=True)
class RejectionExhausted:
    slp_index: int
    attempts: int


@dataclass
class TruncatedGuide:
    guide: LocalGuide
    density: SlpDensity
    acceptance_rate: Optional[float] = None
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    @property
    def slp(self) -> Slp:
        return self.density.slp

    def accepts(self, values: Sequence[Any]) -> bool:
        if self.density.mode is SlpMode.ELIMINATED:
            return True
        return self.density.member(values)


def truncated_sample(tguide: TruncatedGuide, rng: np.random.Generator) -> Union[Proposal, RejectionExhausted]:
    if tguide.max_attempts < 1:
        raise ConfigurationError("max_attempts must be at least 1")
    for attempt in range(1, tguide.max_attempts + 1):
        values = tguide.guide.sample(rng)
        if tguide.accepts(values):
            return Proposal(values, attempt)
    logger.warning("SLP %d: rejection sampler exhausted after %d attempts", tguide.slp.index, tguide.max_attempts)
    return RejectionExhausted(tguide.slp.index, tguide.max_attempts)
