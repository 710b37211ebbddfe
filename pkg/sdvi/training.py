"""
Training and evaluation of local guides.

Guides are trained on the surrogate ELBO of their SLP with either the
score-function or the reparameterized gradient estimator, and evaluated
with the truncated-guide local ELBO estimator:

    L_k = mean_{i accepted} [log gamma_k(x_i) - log q(x_i)] + log(N_A / N)
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from sdvi.autodiff import DualVar, Tape, value_of
from sdvi.errors import EstimatorSelectionError
from sdvi.guide import LocalGuide, TruncatedGuide
from sdvi.optim import AdamState, MovingAverageBaseline
from sdvi.slp import SlpDensity, SlpMode


logger = logging.getLogger(__name__)


class GradEstimatorKind(str, Enum):
    SCORE_FUNCTION = "score_function"
    REPARAMETERIZED = "reparameterized"


@dataclass
class ElboEstimate:
    value: float
    n_proposals: int
    n_accepted: int
    std_error: float = math.nan

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_proposals if self.n_proposals else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "value": self.value,
            "n_proposals": self.n_proposals,
            "n_accepted": self.n_accepted,
            "std_error": self.std_error,
        }


@dataclass
class StepResult:
    surrogate_elbo: float
    acceptance_rate: float
    grad_norm: float
    skipped: bool = False


@dataclass
class TrainingState:
    """Everything one SLP's optimization owns."""
    guide: LocalGuide
    adam: AdamState
    baseline: MovingAverageBaseline = field(default_factory=MovingAverageBaseline)
    estimator: GradEstimatorKind = GradEstimatorKind.SCORE_FUNCTION
    iterations: int = 0
    skipped_steps: int = 0
    last_surrogate_elbo: float = -math.inf

    @classmethod
    def create(cls, guide: LocalGuide, lr: float, estimator: GradEstimatorKind) -> "TrainingState":
        return cls(guide=guide, adam=AdamState.for_params(guide.params, lr), estimator=estimator)


def select_estimator(mode: SlpMode, override: Optional[GradEstimatorKind] = None,
                     differentiable: bool = True) -> GradEstimatorKind:
    """
    Reparameterized for eliminated SLPs, score-function for surrogate ones unless overridden.

    A model whose density is computed off the tape (differentiable=False)
    always gets the score-function estimator.
    """
    if not differentiable:
        if override is GradEstimatorKind.REPARAMETERIZED:
            raise EstimatorSelectionError("reparameterized gradients need a differentiable model density")
        return GradEstimatorKind.SCORE_FUNCTION
    if override is GradEstimatorKind.SCORE_FUNCTION:
        return GradEstimatorKind.SCORE_FUNCTION
    if mode is SlpMode.ELIMINATED:
        return GradEstimatorKind.REPARAMETERIZED
    if override is GradEstimatorKind.REPARAMETERIZED:
        logger.warning("reparameterized gradients on a surrogate target are biased at the SLP boundary")
        return GradEstimatorKind.REPARAMETERIZED
    return GradEstimatorKind.SCORE_FUNCTION


def _score_function_gradient(state: TrainingState, density: SlpDensity, n_particles: int,
                             rng: np.random.Generator):
    guide = state.guide
    x = guide.sample_batch(rng, n_particles)
    log_q = guide.log_prob_batch(x)
    log_t = np.empty(n_particles)
    accepted = 0
    for p in range(n_particles):
        target, member = density.evaluate(x[p].tolist())
        log_t[p] = value_of(target)
        accepted += member
    rewards = log_t - log_q
    baselines = state.baseline.baselines(rewards)
    scores = guide.score_batch(x)
    grad = np.einsum("pij,p->ij", scores, rewards - baselines) / n_particles
    state.baseline.update(rewards)
    return grad, rewards, accepted


def _reparameterized_gradient(state: TrainingState, density: SlpDensity, n_particles: int,
                              rng: np.random.Generator):
    guide = state.guide
    grad = np.zeros(guide.params.size)
    rewards = np.empty(n_particles)
    accepted = 0
    for p in range(n_particles):
        tape = Tape()
        leaves, values, log_q = guide.reparam_sample(rng, tape)
        target, member = density.evaluate(values)
        accepted += member
        objective = target - log_q
        rewards[p] = value_of(objective)
        if isinstance(objective, DualVar):
            grad += tape.backward(objective).wrt(leaves)
    return grad.reshape(guide.params.shape) / n_particles, rewards, accepted


def surrogate_elbo_grad_step(state: TrainingState, density: SlpDensity, n_particles: int,
                             rng: np.random.Generator) -> StepResult:
    """One Adam ascent step on the surrogate ELBO; non-finite gradients skip the step."""
    if n_particles < 1:
        raise EstimatorSelectionError("n_particles must be at least 1")
    if state.guide.n_sites == 0:
        return StepResult(float(value_of(density.log_target([]))), 1.0, 0.0)
    if state.estimator is GradEstimatorKind.REPARAMETERIZED:
        grad, rewards, accepted = _reparameterized_gradient(state, density, n_particles, rng)
    else:
        grad, rewards, accepted = _score_function_gradient(state, density, n_particles, rng)

    state.iterations += 1
    elbo = float(np.mean(rewards))
    state.last_surrogate_elbo = elbo
    if not np.all(np.isfinite(grad)):
        state.skipped_steps += 1
        return StepResult(elbo, accepted / n_particles, math.nan, skipped=True)
    state.adam.step(state.guide.params, grad)
    return StepResult(elbo, accepted / n_particles, float(np.linalg.norm(grad)))


def train(state: TrainingState, density_for_step: Callable[[np.random.Generator], SlpDensity], n_iters: int,
          n_particles: int, rng: np.random.Generator, slp_index: int = 0) -> List[Dict[str, Any]]:
    """
    Run n_iters steps; density_for_step(rng) supplies the target of each step
    (a fresh minibatch view when training stochastically).

    Returns one metrics row per step.
    """
    rows = []
    skipped_before = state.skipped_steps
    for _ in range(n_iters):
        step = surrogate_elbo_grad_step(state, density_for_step(rng), n_particles, rng)
        rows.append({
            "iteration": state.iterations,
            "slp_index": slp_index,
            "surrogate_elbo": step.surrogate_elbo,
            "acceptance_rate": step.acceptance_rate,
            "grad_norm": step.grad_norm,
            "skipped_steps": state.skipped_steps,
        })
    skipped = state.skipped_steps - skipped_before
    if skipped:
        logger.warning("SLP %d: skipped %d/%d steps with non-finite gradients", slp_index, skipped, n_iters)
    return rows


def estimate_local_elbo(tguide: TruncatedGuide, n_samples: int, rng: np.random.Generator) -> ElboEstimate:
    """
    Truncated-guide ELBO of one SLP from n_samples proposals.

    Records the acceptance rate N_A / N on tguide.
    """
    if n_samples < 1:
        raise EstimatorSelectionError("n_samples must be at least 1")
    guide = tguide.guide
    density = tguide.density
    x = guide.sample_batch(rng, n_samples)
    log_q = guide.log_prob_batch(x)
    terms = []
    for i in range(n_samples):
        values = x[i].tolist()
        if tguide.density.mode is SlpMode.ELIMINATED:
            log_gamma = density.log_density(values)
        else:
            trace = density.trace(values)
            if trace is None:
                continue
            log_gamma = trace.log_density
        terms.append(float(value_of(log_gamma)) - log_q[i])

    n_accepted = len(terms)
    tguide.acceptance_rate = n_accepted / n_samples
    if n_accepted == 0:
        logger.warning("SLP %d: no proposal accepted out of %d", tguide.slp.index, n_samples)
        return ElboEstimate(-math.inf, n_samples, 0)

    terms = np.array(terms)
    value = float(np.mean(terms) + math.log(n_accepted) - math.log(n_samples))
    std_error = float(np.std(terms, ddof=1) / math.sqrt(n_accepted)) if n_accepted > 1 else math.nan
    return ElboEstimate(value, n_samples, n_accepted, std_error)


def estimate_surrogate_elbo(guide: LocalGuide, density: SlpDensity, n_samples: int,
                            rng: np.random.Generator) -> float:
    """Plain Monte Carlo estimate of E_q[log target - log q]."""
    if guide.n_sites == 0:
        return float(value_of(density.log_target([])))
    x = guide.sample_batch(rng, n_samples)
    log_q = guide.log_prob_batch(x)
    log_t = np.array([value_of(density.log_target(row.tolist())) for row in x])
    return float(np.mean(log_t - log_q))
