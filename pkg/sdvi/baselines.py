"""
Variable-by-variable black-box VI baseline.

One global guide holds a variational site per unique address. The guide is
run *as* the program's handler, so its draws steer control flow; sites are
created the first time their address is visited and persist afterwards.
Gradients are score-function estimates; a site absent from a particle's
path gets no gradient from that particle.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from sdvi.distributions import Categorical, Distribution, Normal, Poisson, biject_to, transform_by_name
from sdvi.errors import ConfigurationError, ModelDomainError
from sdvi.guide import LocalGuide, softplus_inverse
from sdvi.optim import AdamState, MovingAverageBaseline
from sdvi.ppl import Address, AddressPath, Handler, Program, Trace, execute
from sdvi.training import ElboEstimate


logger = logging.getLogger(__name__)

DEFAULT_CAP = 25
PRIOR_INIT_SAMPLES = 100


class NormalSite:
    """Mean-field normal in unconstrained space for one continuous address."""

    kind = "normal"

    def __init__(self, guide: LocalGuide):
        self.guide = guide

    @property
    def params(self) -> np.ndarray:
        return self.guide.params

    def sample(self, rng: np.random.Generator) -> float:
        return self.guide.sample(rng)[0]

    def log_prob(self, value: Any) -> float:
        return self.guide.log_prob([value])

    def score(self, value: Any) -> np.ndarray:
        return self.guide.score_batch(np.array([[float(value)]]))[0]

    def to_dict(self) -> Dict[str, Any]:
        site = self.guide.to_dict()["sites"][0]
        return {"kind": self.kind, **site}


class CategoricalSite:
    """Categorical over {0..n-1} parameterized by logits."""

    kind = "categorical"

    def __init__(self, address: Address, logits: np.ndarray):
        self.address = address
        self.params = np.asarray(logits, dtype=float)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.params)

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.params.shape[0], p=self.probs))

    def log_prob(self, value: Any) -> float:
        k = int(value)
        if not 0 <= k < self.params.shape[0]:
            return -math.inf
        return float(log_softmax(self.params)[k])

    def score(self, value: Any) -> np.ndarray:
        grad = -self.probs
        grad[int(value)] += 1.0
        return np.where(np.isfinite(self.params), grad, 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "address": self.address.as_list(),
                "logits": [float(v) if np.isfinite(v) else None for v in self.params]}


SiteGuide = Union[NormalSite, CategoricalSite]


def _logits(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


@dataclass
class GlobalGuide:
    cap: int = DEFAULT_CAP
    lr: float = 0.01
    sites: Dict[Address, SiteGuide] = field(default_factory=dict)
    optimizers: Dict[Address, AdamState] = field(default_factory=dict)

    def site_for(self, address: Address, dist: Distribution, rng: np.random.Generator) -> SiteGuide:
        site = self.sites.get(address)
        if site is None:
            site = self._create(address, dist, rng)
            self.sites[address] = site
            self.optimizers[address] = AdamState.for_params(site.params, self.lr)
        return site

    def _create(self, address: Address, dist: Distribution, rng: np.random.Generator) -> SiteGuide:
        if isinstance(dist, Categorical):
            return CategoricalSite(address, _logits(np.array(dist.probs)))
        if isinstance(dist, Poisson):
            ks = np.arange(self.cap)
            log_pmf = np.array([dist.log_prob(int(k)) for k in ks])
            return CategoricalSite(address, log_pmf - np.max(log_pmf))
        if dist.support.is_discrete:
            raise ConfigurationError(f"no guide site for discrete family {type(dist).__name__}")
        transform = biject_to(dist.support)
        if isinstance(dist, Normal):
            params = np.array([[float(dist.loc), softplus_inverse(float(dist.scale))]])
        else:
            draws = np.array([dist.sample(rng) for _ in range(PRIOR_INIT_SAMPLES)], dtype=float)
            z = np.log(draws) if transform.name == "exp" else draws
            params = np.array([[z.mean(), softplus_inverse(max(float(z.std()), 1e-3))]])
        return NormalSite(LocalGuide(-1, [address], [transform], params))

    def to_dict(self) -> Dict[str, Any]:
        return {"cap": self.cap, "sites": [site.to_dict() for site in self.sites.values()]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], lr: float = 0.01) -> "GlobalGuide":
        guide = cls(cap=data.get("cap", DEFAULT_CAP), lr=lr)
        for entry in data["sites"]:
            address = Address(entry["address"][0], int(entry["address"][1]))
            if entry["kind"] == CategoricalSite.kind:
                logits = np.array([-np.inf if v is None else v for v in entry["logits"]], dtype=float)
                site: SiteGuide = CategoricalSite(address, logits)
            else:
                params = np.array([[entry["loc"], entry["raw_scale"]]])
                site = NormalSite(LocalGuide(-1, [address], [transform_by_name(entry["transform"])], params))
            guide.sites[address] = site
            guide.optimizers[address] = AdamState.for_params(site.params, lr)
        return guide


class GuideHandler(Handler):
    """Draws every sample site from the global guide, accumulating log q and its scores."""

    def __init__(self, guide: GlobalGuide, rng: np.random.Generator, scale: float = 1.0):
        super().__init__(scale)
        self.guide = guide
        self.rng = rng
        self.log_q = 0.0
        self.scores: Dict[Address, np.ndarray] = {}

    def _draw(self, address: Address, dist: Distribution, position: int) -> Any:
        site = self.guide.site_for(address, dist, self.rng)
        value = site.sample(self.rng)
        self.log_q += site.log_prob(value)
        self.scores[address] = site.score(value)
        return value


@dataclass
class _Particle:
    reward: float
    scores: Dict[Address, np.ndarray]
    path: Optional[AddressPath]


def _run_particle(guide: GlobalGuide, program: Program, rng: np.random.Generator) -> _Particle:
    handler = GuideHandler(guide, rng, program.scale)
    try:
        trace = execute(program, handler)
    except ModelDomainError:
        return _Particle(-math.inf, handler.scores, None)
    assert isinstance(trace, Trace)
    if trace.stopped:
        return _Particle(-math.inf, handler.scores, None)
    return _Particle(float(trace.log_density) - handler.log_q, handler.scores, trace.path)


def bbvi_fit(program: Program, n_iters: int, n_particles: int, lr: float, rng: np.random.Generator,
             cap: int = DEFAULT_CAP, guide: Optional[GlobalGuide] = None) -> Tuple[GlobalGuide, List[Dict[str, Any]]]:
    """Score-function ascent of the global guide; returns the guide and one trajectory row per iteration."""
    if n_particles < 1:
        raise ConfigurationError("n_particles must be at least 1")
    guide = guide or GlobalGuide(cap=cap, lr=lr)
    baseline = MovingAverageBaseline()
    trajectory = []
    skipped = 0
    for it in range(n_iters):
        particles = [_run_particle(guide, program, rng) for _ in range(n_particles)]
        rewards = np.array([p.reward for p in particles])
        baselines = baseline.baselines(rewards)
        grads: Dict[Address, np.ndarray] = {}
        for particle, b in zip(particles, baselines):
            for address, score in particle.scores.items():
                contribution = score * (particle.reward - b) / n_particles
                grads[address] = grads.get(address, 0.0) + contribution
        baseline.update(rewards)

        if all(np.all(np.isfinite(g)) for g in grads.values()):
            for address, grad in grads.items():
                guide.optimizers[address].step(guide.sites[address].params, grad)
        else:
            skipped += 1
        finite = rewards[np.isfinite(rewards)]
        trajectory.append({
            "iteration": it + 1,
            "elbo": float(rewards.mean()),
            "finite_particles": int(finite.size),
            "n_sites": len(guide.sites),
            "skipped_steps": skipped,
        })
    if skipped:
        logger.warning("BBVI: skipped %d/%d steps with non-finite gradients", skipped, n_iters)
    return guide, trajectory


def bbvi_elbo(guide: GlobalGuide, program: Program, n_samples: int, rng: np.random.Generator) -> ElboEstimate:
    """Plain Monte Carlo ELBO over guide-driven executions."""
    rewards = np.array([_run_particle(guide, program, rng).reward for _ in range(n_samples)])
    value = float(rewards.mean())
    std_error = float(rewards.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.nan
    return ElboEstimate(value, n_samples, n_samples, std_error)


def slp_mass(guide: GlobalGuide, program: Program, n_samples: int, rng: np.random.Generator) -> Dict[AddressPath, float]:
    """Fraction of guide executions following each address path."""
    counts: Counter = Counter()
    for _ in range(n_samples):
        particle = _run_particle(guide, program, rng)
        if particle.path is not None:
            counts[particle.path] += 1
    return {path: n / n_samples for path, n in counts.most_common()}
