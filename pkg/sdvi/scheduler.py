"""
Budget allocation across SLPs.

successive_halving trains all candidates for L phases, halving the active
set after each phase until m remain. online_sdvi repeats halving runs,
discovering new SLPs in between and ranking candidates by
alpha * L_surr - log(t_k), which favours SLPs that received little budget.

The scheduler only talks to a CandidateTrainer; it never touches guides.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Protocol, Sequence

from sdvi.errors import ConfigurationError


logger = logging.getLogger(__name__)


class CandidateTrainer(Protocol):
    def train(self, k: int, n_iters: int) -> None:
        """Run n_iters optimization steps on candidate k."""

    def estimate(self, k: int) -> float:
        """Truncated local ELBO estimate of candidate k."""

    def surrogate_estimate(self, k: int) -> float:
        """Monte Carlo surrogate ELBO of candidate k."""


@dataclass(frozen=True)
class ShConfig:
    budget: int
    min_candidates: int = 1
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ConfigurationError("budget T must be positive")
        if self.min_candidates < 1:
            raise ConfigurationError("m must be at least 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in (0, 1]")


class PhasePlan(NamedTuple):
    phase: int
    active: int
    iterations: int


def n_phases(n_candidates: int, min_candidates: int) -> int:
    """L = ceil(log2 K - log2 m + 1), in integer arithmetic; m is clamped to K."""
    if n_candidates < 1:
        raise ConfigurationError("at least one candidate is required")
    m = min(min_candidates, n_candidates)
    j = 0
    while m * 2 ** j < n_candidates:
        j += 1
    return j + 1


def min_budget_share(n_candidates: int, min_candidates: int) -> float:
    """Smallest fraction of T any candidate receives: 1 / (K * L)."""
    if not 1 <= min_candidates <= n_candidates:
        raise ConfigurationError("need 1 <= m <= K")
    return 1.0 / (n_candidates * n_phases(n_candidates, min_candidates))


def _n_removed(active: int, min_candidates: int) -> int:
    return max(0, min(active // 2, active - min_candidates))


def phase_plan(n_candidates: int, min_candidates: int, budget: int) -> List[PhasePlan]:
    """Active count and per-candidate iterations of every phase."""
    m = min(min_candidates, n_candidates)
    L = n_phases(n_candidates, m)
    if budget < L * n_candidates:
        raise ConfigurationError(f"budget T={budget} is below L*K={L * n_candidates}")
    plan = []
    active = n_candidates
    for phase in range(L):
        plan.append(PhasePlan(phase, active, budget // (L * active)))
        active -= _n_removed(active, m)
    return plan


def _rank_key(score: float, k: int):
    if score is None or math.isnan(score):
        score = -math.inf
    return (-score, k)


@dataclass
class HalvingOutcome:
    survivors: List[int]
    scores: Dict[int, float]
    ledger: List[dict] = field(default_factory=list)


def _map(workers: int, fn: Callable[[int], object], items: Sequence[int]) -> list:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(k) for k in items]


def _run_halving(candidates: Sequence[int], trainer: CandidateTrainer, budget: int, min_candidates: int,
                 workers: int, score: Callable[[int, Optional[float]], float], iterations: Dict[int, int],
                 run: int = 0, rank_on_surrogate: bool = False) -> HalvingOutcome:
    """score(k, surrogate) ranks candidates; surrogate is None unless rank_on_surrogate."""
    plan = phase_plan(len(candidates), min_candidates, budget)
    m = min(min_candidates, len(candidates))
    active = sorted(candidates)
    outcome = HalvingOutcome(survivors=[], scores={})
    for phase in plan:
        logger.info("run %d phase %d: %d active, %d iterations each", run, phase.phase, len(active),
                    phase.iterations)
        _map(workers, lambda k: trainer.train(k, phase.iterations), active)
        for k in active:
            iterations[k] = iterations.get(k, 0) + phase.iterations
        if rank_on_surrogate:
            surrogate = dict(zip(active, _map(workers, trainer.surrogate_estimate, active)))
        else:
            surrogate = dict.fromkeys(active)
        scores = dict(zip(active, _map(workers, lambda k: score(k, surrogate[k]), active)))
        outcome.scores.update(scores)

        ranked = sorted(active, key=lambda k: _rank_key(scores[k], k))
        keep = set(ranked[:len(active) - _n_removed(len(active), m)])
        for k in active:
            outcome.ledger.append({
                "run": run,
                "phase": phase.phase,
                "slp_index": k,
                "iterations": phase.iterations,
                "cumulative_iterations": iterations[k],
                "surrogate_elbo": surrogate[k],
                "score": scores[k],
                "active": k in keep,
            })
        active = [k for k in active if k in keep]
    outcome.survivors = active
    return outcome


def successive_halving(candidates: Sequence[int], trainer: CandidateTrainer, config: ShConfig,
                       workers: int = 1) -> HalvingOutcome:
    """
    Budgeted halving: rank on the truncated ELBO estimate after each
    phase; ties keep the lower SLP index.
    """
    iterations: Dict[int, int] = {}
    return _run_halving(candidates, trainer, config.budget, config.min_candidates, workers,
                        lambda k, surrogate: trainer.estimate(k), iterations)


StopPredicate = Callable[[int, float], bool]


def max_runs(n: int) -> StopPredicate:
    return lambda runs, elapsed: runs >= n


def wall_clock(seconds: float) -> StopPredicate:
    return lambda runs, elapsed: elapsed >= seconds


def any_of(*predicates: StopPredicate) -> StopPredicate:
    return lambda runs, elapsed: any(p(runs, elapsed) for p in predicates)


def online_reward(surrogate_elbo: float, iterations: int, alpha: float) -> float:
    """log of exp(alpha * L_surr) / t; unexplored candidates rank first."""
    if iterations <= 0:
        return math.inf
    return alpha * surrogate_elbo - math.log(iterations)


@dataclass
class OnlineOutcome:
    candidates: List[int]
    iterations: Dict[int, int]
    ledger: List[dict]
    runs: int


def online_sdvi(discover_new: Callable[[], Sequence[int]], trainer: CandidateTrainer, config: ShConfig,
                stop: StopPredicate, workers: int = 1, clock: Optional[Callable[[], float]] = None) -> OnlineOutcome:
    """
    Repeated halving runs of budget T each, with new SLPs joining at t=0.

    discover_new() returns the indices of SLPs found since its last call.
    Cumulative iterations t_k persist across runs.
    """
    clock = clock or time.monotonic
    started = clock()
    candidates = list(discover_new())
    iterations: Dict[int, int] = {}
    ledger: List[dict] = []
    runs = 0
    while True:
        counts_before = dict(iterations)

        def score(k: int, surrogate: float) -> float:
            return online_reward(surrogate, iterations.get(k, 0), config.alpha)

        outcome = _run_halving(candidates, trainer, config.budget, config.min_candidates, workers, score,
                               iterations, run=runs, rank_on_surrogate=True)
        ledger.extend(outcome.ledger)
        runs += 1
        spent = sum(iterations.values()) - sum(counts_before.values())
        logger.info("online run %d: %d candidates, %d iterations spent", runs, len(candidates), spent)
        if stop(runs, clock() - started):
            break
        fresh = [k for k in discover_new() if k not in candidates]
        if fresh:
            logger.info("online run %d: %d new SLPs", runs, len(fresh))
        candidates.extend(fresh)
    return OnlineOutcome(candidates=candidates, iterations=iterations, ledger=ledger, runs=runs)
