"""
Mixture of local guides.

The optimal mixture weights are the softmax of the local ELBOs and the
resulting global ELBO is their log-sum-exp. Everything here is computed in
log space; SLPs whose local ELBO is -inf get weight exactly 0.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from sdvi.errors import InferenceError, RejectionExhaustedError
from sdvi.guide import RejectionExhausted, TruncatedGuide, truncated_sample
from sdvi.slp import Slp
from sdvi.training import ElboEstimate


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixtureWeights:
    probs: np.ndarray
    log_probs: np.ndarray

    def __len__(self) -> int:
        return len(self.probs)


def _as_elbos(local_elbos: Sequence[float]) -> np.ndarray:
    elbos = np.asarray(local_elbos, dtype=float)
    elbos = np.where(np.isnan(elbos), -np.inf, elbos)
    if np.any(elbos == np.inf):
        raise InferenceError("a local ELBO estimate is +inf")
    return elbos


def optimal_weights(local_elbos: Sequence[float]) -> MixtureWeights:
    elbos = _as_elbos(local_elbos)
    if elbos.size == 0 or not np.any(np.isfinite(elbos)):
        raise InferenceError(f"no finite local ELBO among {elbos.size} SLPs")
    log_probs = elbos - logsumexp(elbos)
    probs = np.exp(log_probs)
    probs[~np.isfinite(elbos)] = 0.0
    return MixtureWeights(probs=probs, log_probs=log_probs)


def global_elbo(weights: Any, local_elbos: Sequence[float]) -> float:
    """sum_k w_k (L_k - log w_k) with 0 log 0 = 0."""
    if isinstance(weights, MixtureWeights):
        probs, log_probs = weights.probs, weights.log_probs
    else:
        probs = np.asarray(weights, dtype=float)
        with np.errstate(divide="ignore"):
            log_probs = np.log(probs)
    elbos = _as_elbos(local_elbos)
    total = 0.0
    for w, log_w, elbo in zip(probs, log_probs, elbos):
        if w > 0:
            total += w * (elbo - log_w)
    return float(total)


def log_sum_exp_elbo(local_elbos: Sequence[float]) -> float:
    return float(logsumexp(_as_elbos(local_elbos)))


@dataclass
class SdviResult:
    slps: List[Slp]
    guides: List[Optional[TruncatedGuide]]
    estimates: List[ElboEstimate]
    weights: MixtureWeights
    global_elbo: float
    ledger: List[Dict[str, Any]] = field(default_factory=list)
    train_metrics: List[Dict[str, Any]] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def local_elbos(self) -> List[float]:
        return [e.value for e in self.estimates]

    def top_slp(self) -> int:
        return int(np.argmax(self.weights.probs))


def posterior_sample(result: SdviResult, rng: np.random.Generator) -> Tuple[int, List[Any]]:
    """k ~ weights, then x ~ truncated guide k; returns (k, full draw vector)."""
    k = int(rng.choice(len(result.weights), p=result.weights.probs))
    tguide = result.guides[k]
    if tguide is None:
        raise InferenceError(f"SLP {k} has positive weight but no guide")
    proposal = truncated_sample(tguide, rng)
    if isinstance(proposal, RejectionExhausted):
        raise RejectionExhaustedError(proposal.slp_index, proposal.attempts)
    return k, result.slps[k].full_draws(proposal.values)


def lppd_from_matrix(pointwise: np.ndarray) -> float:
    """Sum over points of log mean_s exp(pointwise[s, point])."""
    pointwise = np.atleast_2d(np.asarray(pointwise, dtype=float))
    n_samples = pointwise.shape[0]
    return float(np.sum(logsumexp(pointwise, axis=0) - math.log(n_samples)))


def lppd(result: SdviResult, pointwise_log_density: Callable[[Slp, List[Any]], np.ndarray],
         n_posterior_samples: int, rng: np.random.Generator) -> float:
    """
    Log pointwise predictive density of held-out data.

    pointwise_log_density(slp, draws) returns one log-density per held-out
    point under the posterior sample (slp, draws).
    """
    rows = []
    for _ in range(n_posterior_samples):
        k, draws = posterior_sample(result, rng)
        rows.append(np.asarray(pointwise_log_density(result.slps[k], draws), dtype=float))
    return lppd_from_matrix(np.vstack(rows))
