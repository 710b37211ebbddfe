"""
End-to-end inference pipelines.

fit_sdvi        discovery, prior initialization, successive halving, weights
fit_online      repeated halving runs with discovery rounds in between
run_bbvi        the variable-by-variable baseline
evaluate        oracle-backed metrics of a fitted result

Every random draw comes from a named stream of one master seed, keyed by
SLP index where it matters, so results do not depend on the worker count.
"""
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sdvi import baselines
from sdvi.distributions import SupportSpec
from sdvi.errors import InferenceError, InitializationError, ModelDomainError
from sdvi.guide import LocalGuide, TruncatedGuide, init_from_prior
from sdvi.mixture import SdviResult, global_elbo, lppd, lppd_from_matrix, optimal_weights, posterior_sample
from sdvi.models import BenchmarkModel
from sdvi.ppl import Address, Program, Trace, execute, sample_minibatch
from sdvi.scheduler import ShConfig, any_of, max_runs, online_sdvi, successive_halving, wall_clock
from sdvi.schemas import RunConfig
from sdvi.slp import DiscoveryReport, Slp, SlpDensity, density_for, discover, merge_reports, reindex
from sdvi.training import (
    ElboEstimate, GradEstimatorKind, TrainingState, estimate_local_elbo, estimate_surrogate_elbo,
    select_estimator, train,
)
from sdvi.utils import RngStreams


logger = logging.getLogger(__name__)


# ============================================================================
# Per-SLP trainer
# ============================================================================

class SlpTrainer:
    """
    Owns the guide, optimizer state and random streams of every SLP.

    Implements the scheduler's CandidateTrainer protocol. Calls for
    different SLPs touch disjoint state and may run concurrently.
    """

    def __init__(self, model: BenchmarkModel, config: RunConfig, streams: RngStreams):
        self.model = model
        self.config = config
        self.streams = streams
        self.slps: Dict[int, Slp] = {}
        self.densities: Dict[int, SlpDensity] = {}
        self.states: Dict[int, TrainingState] = {}
        self.metrics: Dict[int, List[Dict[str, Any]]] = {}
        self.init_failures: Dict[int, str] = {}
        self._train_rngs: Dict[int, np.random.Generator] = {}
        self._estimate_rngs: Dict[int, np.random.Generator] = {}
        self._surrogate_rngs: Dict[int, np.random.Generator] = {}
        self._lock = threading.Lock()

    def prepare(self, slp: Slp) -> bool:
        """Build the SLP's target and initialize its guide from the prior; False on failure."""
        k = slp.index
        density = density_for(slp, self.model.program)
        guide = LocalGuide.for_slp(slp, density.mode)
        override = GradEstimatorKind(self.config.estimator) if self.config.estimator else None
        estimator = select_estimator(density.mode, override, self.model.differentiable)
        with self._lock:
            self.slps[k] = slp
            self.densities[k] = density
            self.metrics[k] = []
        try:
            init_from_prior(slp, self.model.program, guide, self.config.init_samples, self.config.init_iters,
                            self.streams.get("init", k), lr=self.config.lr)
        except InitializationError as exc:
            logger.warning("%s", exc)
            with self._lock:
                self.init_failures[k] = str(exc)
            return False
        with self._lock:
            self.states[k] = TrainingState.create(guide, self.config.lr, estimator)
            self._train_rngs[k] = self.streams.get("train", k)
            self._estimate_rngs[k] = self.streams.get("estimate", k)
            self._surrogate_rngs[k] = self.streams.get("surrogate", k)
        return True

    def prepare_all(self, slps: Sequence[Slp], workers: int = 1) -> List[int]:
        """Prepare SLPs, returning the indices that initialized."""
        if workers > 1 and len(slps) > 1:
            with ThreadPoolExecutor(max_workers=min(workers, len(slps))) as pool:
                ok = list(pool.map(self.prepare, slps))
        else:
            ok = [self.prepare(slp) for slp in slps]
        return [slp.index for slp, good in zip(slps, ok) if good]

    def ready(self, k: int) -> bool:
        return k in self.states

    def _step_density(self, k: int) -> Callable[[np.random.Generator], SlpDensity]:
        density = self.densities[k]
        batch_size = self.config.batch_size
        program = self.model.program
        if batch_size is None or program.batch_field is None:
            return lambda rng: density
        if batch_size >= program.full_size:
            return lambda rng: density
        return lambda rng: density.with_program(sample_minibatch(program, batch_size, rng))

    def train(self, k: int, n_iters: int) -> None:
        rows = train(self.states[k], self._step_density(k), n_iters, self.config.elbo_particles,
                     self._train_rngs[k], slp_index=k)
        self.metrics[k].extend(rows)

    def truncated(self, k: int) -> TruncatedGuide:
        return TruncatedGuide(self.states[k].guide, self.densities[k],
                              max_attempts=self.config.max_rejection_attempts)

    def estimate(self, k: int) -> float:
        return estimate_local_elbo(self.truncated(k), self.config.estimate_samples, self._estimate_rngs[k]).value

    def surrogate_estimate(self, k: int) -> float:
        state = self.states[k]
        return estimate_surrogate_elbo(state.guide, self.densities[k], self.config.surrogate_estimate_samples,
                                       self._surrogate_rngs[k])

    def final_estimate(self, k: int) -> Tuple[Optional[TruncatedGuide], ElboEstimate]:
        """Local ELBO for the mixture weights; uninitialized SLPs get -inf."""
        if not self.ready(k):
            return None, ElboEstimate(-math.inf, 0, 0)
        tguide = self.truncated(k)
        estimate = estimate_local_elbo(tguide, self.config.weight_samples, self.streams.get("weights", k))
        return tguide, estimate

    def iterations(self, k: int) -> int:
        return self.states[k].iterations if k in self.states else 0

    def diagnostics(self) -> Dict[str, Any]:
        return {
            "init_failures": {str(k): msg for k, msg in sorted(self.init_failures.items())},
            "skipped_steps": {str(k): s.skipped_steps for k, s in sorted(self.states.items())},
            "estimators": {str(k): s.estimator.value for k, s in sorted(self.states.items())},
            "modes": {str(k): d.mode.value for k, d in sorted(self.densities.items())},
        }

    def all_metrics(self) -> List[Dict[str, Any]]:
        return [row for k in sorted(self.metrics) for row in self.metrics[k]]


def _map(workers: int, fn: Callable[[int], Any], items: Sequence[int]) -> list:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(k) for k in items]


def _assemble(slps: List[Slp], trainer: SlpTrainer, workers: int, ledger: List[Dict[str, Any]],
              diagnostics: Dict[str, Any]) -> SdviResult:
    finals = _map(workers, trainer.final_estimate, [s.index for s in slps])
    guides = [g for g, _ in finals]
    estimates = [e for _, e in finals]
    weights = optimal_weights([e.value for e in estimates])
    g = global_elbo(weights, [e.value for e in estimates])
    diagnostics.update(trainer.diagnostics())
    diagnostics["iterations"] = {str(s.index): trainer.iterations(s.index) for s in slps}
    logger.info("global ELBO %.4f; weights %s", g, np.array2string(weights.probs, precision=4))
    return SdviResult(slps=slps, guides=guides, estimates=estimates, weights=weights, global_elbo=g,
                      ledger=ledger, train_metrics=trainer.all_metrics(), diagnostics=diagnostics)


def _ready_candidates(trainer: SlpTrainer, indices: Sequence[int]) -> List[int]:
    candidates = [k for k in indices if trainer.ready(k)]
    if not candidates:
        raise InferenceError("no SLP could be initialized from the prior")
    return candidates


# ============================================================================
# SDVI
# ============================================================================

def run_discovery(model: BenchmarkModel, config: RunConfig, streams: RngStreams) -> DiscoveryReport:
    return discover(model.program, config.discovery_sims, streams.get("discovery"), config.workers)


def fit_sdvi(model: BenchmarkModel, config: RunConfig, streams: Optional[RngStreams] = None,
             report: Optional[DiscoveryReport] = None) -> SdviResult:
    """Discovery, prior initialization, successive halving and mixture weights."""
    streams = streams or RngStreams(config.seed)
    report = report or run_discovery(model, config, streams)
    slps = report.slps
    trainer = SlpTrainer(model, config, streams)
    candidates = _ready_candidates(trainer, trainer.prepare_all(slps, config.workers))
    sh = ShConfig(budget=config.budget, min_candidates=config.min_candidates, alpha=config.alpha)
    outcome = successive_halving(candidates, trainer, sh, workers=config.workers)
    diagnostics = {
        "discovery": {"n_sims": report.n_sims, "n_failed": report.n_failed, "d_min": report.d_min,
                      "n_slps": len(slps)},
        "survivors": outcome.survivors,
    }
    return _assemble(slps, trainer, config.workers, outcome.ledger, diagnostics)


def fit_online(model: BenchmarkModel, config: RunConfig, streams: Optional[RngStreams] = None) -> SdviResult:
    """
    Online SDVI: halving runs of budget T, each followed by a discovery round.

    SLP indices grow in discovery order while running; the result is
    reindexed into path order.
    """
    streams = streams or RngStreams(config.seed)
    trainer = SlpTrainer(model, config, streams)
    sims = config.online_discovery_sims or config.discovery_sims
    known: List[Slp] = []
    state = {"round": 0, "d_min": math.inf, "n_sims": 0, "n_failed": 0}

    def discover_new() -> List[int]:
        nonlocal known
        report = discover(model.program, sims, streams.get("discovery", state["round"]), config.workers)
        state["round"] += 1
        state["n_sims"] += report.n_sims
        state["n_failed"] += report.n_failed
        state["d_min"] = min(state["d_min"], report.d_min)
        known, fresh = merge_reports(known, report, state["d_min"])
        return trainer.prepare_all(fresh, config.workers)

    stop = max_runs(config.max_runs)
    if config.wall_clock_seconds is not None:
        stop = any_of(stop, wall_clock(config.wall_clock_seconds))
    sh = ShConfig(budget=config.budget, min_candidates=config.min_candidates, alpha=config.alpha)
    outcome = online_sdvi(discover_new, trainer, sh, stop, workers=config.workers)
    if not outcome.candidates:
        raise InferenceError("no SLP could be initialized from the prior")

    old_index = {id(s): s.index for s in known}
    provisional = {s.index: s for s in known}
    finals = {k: trainer.final_estimate(k) for k in sorted(provisional)}
    ordered = reindex(known)
    mapping = {old_index[id(s)]: s.index for s in ordered}

    guides = []
    estimates = []
    for slp in ordered:
        tguide, estimate = finals[old_index[id(slp)]]
        if tguide is not None:
            tguide.guide.slp_index = slp.index
        guides.append(tguide)
        estimates.append(estimate)
    ledger = [{**row, "slp_index": mapping[row["slp_index"]]} for row in outcome.ledger]
    metrics = [{**row, "slp_index": mapping[row["slp_index"]]} for row in trainer.all_metrics()]

    weights = optimal_weights([e.value for e in estimates])
    g = global_elbo(weights, [e.value for e in estimates])
    raw = trainer.diagnostics()
    diagnostics = {
        "discovery": {"n_sims": state["n_sims"], "n_failed": state["n_failed"], "d_min": state["d_min"],
                      "n_slps": len(ordered), "rounds": state["round"]},
        "runs": outcome.runs,
        "iterations": {str(mapping[k]): t for k, t in sorted(outcome.iterations.items())},
    }
    for key, per_slp in raw.items():
        diagnostics[key] = {str(mapping[int(k)]): v for k, v in per_slp.items()}
    logger.info("online SDVI: %d runs, %d SLPs, global ELBO %.4f", outcome.runs, len(ordered), g)
    return SdviResult(slps=ordered, guides=guides, estimates=estimates, weights=weights, global_elbo=g,
                      ledger=ledger, train_metrics=metrics, diagnostics=diagnostics)


# ============================================================================
# BBVI baseline
# ============================================================================

@dataclass
class BbviResult:
    guide: baselines.GlobalGuide
    trajectory: List[Dict[str, Any]]
    elbo: ElboEstimate
    slp_mass: Dict[str, float] = field(default_factory=dict)


def run_bbvi(model: BenchmarkModel, config: RunConfig, streams: Optional[RngStreams] = None) -> BbviResult:
    streams = streams or RngStreams(config.seed)
    guide, trajectory = baselines.bbvi_fit(model.program, config.bbvi_iters, config.elbo_particles, config.lr,
                                           streams.get("train"), cap=config.bbvi_cap)
    elbo = baselines.bbvi_elbo(guide, model.program, config.weight_samples, streams.get("estimate"))
    mass = baselines.slp_mass(guide, model.program, config.weight_samples, streams.get("mass"))
    labels = {" ".join(a.key() for a in path): share for path, share in mass.items()}
    logger.info("BBVI ELBO %.4f over %d sites", elbo.value, len(guide.sites))
    return BbviResult(guide=guide, trajectory=trajectory, elbo=elbo, slp_mass=labels)


def bbvi_lppd(model: BenchmarkModel, guide: baselines.GlobalGuide, n_samples: int,
              rng: np.random.Generator) -> float:
    """LPPD of held-out data under guide-driven executions."""
    if model.predictive is None:
        raise InferenceError(f"{model.name} has no held-out data")
    rows = []
    for _ in range(n_samples):
        try:
            trace = execute(model.program, baselines.GuideHandler(guide, rng))
        except ModelDomainError:
            continue
        if isinstance(trace, Trace) and not trace.stopped:
            rows.append(model.predictive(trace.return_value))
    if not rows:
        raise InferenceError("no guide execution produced a predictive density")
    return lppd_from_matrix(np.vstack(rows))


# ============================================================================
# Evaluation
# ============================================================================

def evaluate(model: BenchmarkModel, result: SdviResult, config: RunConfig,
             streams: Optional[RngStreams] = None) -> Dict[str, Any]:
    """
    Metrics against the model's oracle; metrics without an oracle are None
    and listed under "unavailable".
    """
    streams = streams or RngStreams(config.seed)
    metrics: Dict[str, Any] = {"global_elbo": result.global_elbo}
    unavailable: List[str] = []
    oracle = model.oracle

    metrics["log_z"] = oracle.log_z
    if oracle.log_z is not None:
        metrics["elbo_gap"] = oracle.log_z - result.global_elbo
    else:
        metrics["elbo_gap"] = None
        unavailable.extend(["log_z", "elbo_gap"])

    true_weights = oracle.weights_for(result.slps)
    if true_weights is not None:
        metrics["weights_squared_error"] = float(np.sum((true_weights - result.weights.probs) ** 2))
    else:
        metrics["weights_squared_error"] = None
        unavailable.append("weights_squared_error")

    if model.predictive is not None:
        metrics["lppd"] = lppd(result, model.pointwise_log_density, config.lppd_samples, streams.get("eval"))
    else:
        metrics["lppd"] = None
        unavailable.append("lppd")
    metrics["oracle_lppd"] = oracle.lppd
    if oracle.lppd is None:
        unavailable.append("oracle_lppd")

    top = result.slps[result.top_slp()]
    if model.component_count is not None:
        metrics["map_components"] = model.component_count(top)
    else:
        metrics["map_components"] = None
        unavailable.append("map_components")
    metrics["top_slp"] = model.slp_summary(top)
    metrics["unavailable"] = unavailable
    return metrics


def evaluate_bbvi(model: BenchmarkModel, bbvi: BbviResult, config: RunConfig,
                  streams: Optional[RngStreams] = None) -> Dict[str, Any]:
    streams = streams or RngStreams(config.seed)
    metrics: Dict[str, Any] = {"global_elbo": bbvi.elbo.value, "log_z": model.oracle.log_z}
    unavailable = ["weights_squared_error", "map_components"]
    if model.oracle.log_z is not None:
        metrics["elbo_gap"] = model.oracle.log_z - bbvi.elbo.value
    else:
        metrics["elbo_gap"] = None
        unavailable.extend(["log_z", "elbo_gap"])
    if model.predictive is not None:
        metrics["lppd"] = bbvi_lppd(model, bbvi.guide, config.lppd_samples, streams.get("eval"))
    else:
        metrics["lppd"] = None
        unavailable.append("lppd")
    metrics["oracle_lppd"] = model.oracle.lppd
    if model.oracle.lppd is None:
        unavailable.append("oracle_lppd")
    metrics["top_slp"] = max(bbvi.slp_mass, key=bbvi.slp_mass.get) if bbvi.slp_mass else None
    metrics["unavailable"] = unavailable
    return metrics


# ============================================================================
# Serialization of results
# ============================================================================

def _path_from(data: Sequence[Sequence[Any]]) -> Tuple[Address, ...]:
    return tuple(Address(site, int(count)) for site, count in data)


def slp_to_dict(slp: Slp, model: Optional[BenchmarkModel] = None) -> Dict[str, Any]:
    record = {
        "index": slp.index,
        "path": [a.as_list() for a in slp.path],
        "supports": [s.value for s in slp.supports],
        "branching": [[p, v] for p, v in slp.branching],
        "hits": slp.hits,
        "log_c": slp.log_c,
    }
    if model is not None:
        record["summary"] = model.slp_summary(slp)
    return record


def slp_from_dict(data: Dict[str, Any], program: Program) -> Slp:
    supports = tuple(SupportSpec(s) for s in data["supports"])
    branching = tuple(
        (int(p), int(v) if supports[int(p)].is_discrete else float(v)) for p, v in data["branching"]
    )
    return Slp(index=int(data["index"]), path=_path_from(data["path"]), supports=supports, branching=branching,
               program=program, log_c=data.get("log_c"), hits=int(data.get("hits", 0)))


def result_to_dict(result: SdviResult, model: BenchmarkModel) -> Dict[str, Any]:
    """Everything eval needs to rebuild the mixture guide without retraining."""
    slps = []
    for slp, tguide, estimate, w in zip(result.slps, result.guides, result.estimates, result.weights.probs):
        record = slp_to_dict(slp, model)
        record["weight"] = float(w)
        record["estimate"] = estimate.to_dict()
        record["acceptance_rate"] = tguide.acceptance_rate if tguide is not None else None
        record["guide"] = tguide.guide.to_dict() if tguide is not None else None
        slps.append(record)
    return {
        "model": model.name,
        "model_params": model.params,
        "global_elbo": result.global_elbo,
        "weights": [float(w) for w in result.weights.probs],
        "local_elbos": result.local_elbos,
        "slps": slps,
        "diagnostics": result.diagnostics,
    }


def result_from_dict(data: Dict[str, Any], model: BenchmarkModel, max_attempts: int = 1000) -> SdviResult:
    slps: List[Slp] = []
    guides: List[Optional[TruncatedGuide]] = []
    estimates: List[ElboEstimate] = []
    for record in data["slps"]:
        slp = slp_from_dict(record, model.program)
        slps.append(slp)
        estimate = record["estimate"]
        estimates.append(ElboEstimate(
            value=float(estimate["value"]), n_proposals=int(estimate["n_proposals"]),
            n_accepted=int(estimate["n_accepted"]), std_error=float(estimate["std_error"]),
        ))
        if record.get("guide") is None:
            guides.append(None)
            continue
        guide = LocalGuide.from_dict(record["guide"])
        guides.append(TruncatedGuide(guide, density_for(slp, model.program),
                                     acceptance_rate=record.get("acceptance_rate"), max_attempts=max_attempts))
    weights = optimal_weights([e.value for e in estimates])
    return SdviResult(slps=slps, guides=guides, estimates=estimates, weights=weights,
                      global_elbo=float(data["global_elbo"]), diagnostics=data.get("diagnostics", {}))


def posterior_rows(result: SdviResult, n_samples: int, rng: np.random.Generator) -> List[Dict[str, Any]]:
    """Posterior draws as CSV rows: SLP index plus one column per address."""
    rows = []
    for _ in range(n_samples):
        k, draws = posterior_sample(result, rng)
        row: Dict[str, Any] = {"slp_index": k}
        row.update({a.key(): v for a, v in zip(result.slps[k].path, draws)})
        rows.append(row)
    return rows
