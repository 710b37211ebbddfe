"""
Pydantic schemas for run configuration and serialized artifacts.

RunConfig is what the CLI and the HTTP layer both validate against; the
remaining models describe the JSON files written into a run directory.
"""
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


Algorithm = Literal["sdvi", "sdvi-online", "bbvi"]
EstimatorOverride = Literal["score_function", "reparameterized"]


# ============================================================================
# Run configuration
# ============================================================================

class RunConfig(BaseModel):
    """Complete configuration of one discover/fit/eval run."""
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    model: str = Field(..., min_length=1, description="Benchmark model name")
    model_params: Dict[str, Any] = Field(default_factory=dict, description="Keyword arguments of the model factory")
    algorithm: Algorithm = Field("sdvi", description="sdvi, sdvi-online or bbvi")
    seed: int = Field(..., ge=0, description="Master seed of every random stream")

    discovery_sims: int = Field(1000, gt=0, description="Prior simulations for SLP discovery")
    budget: int = Field(10000, gt=0, description="Total SH iteration budget T")
    min_candidates: int = Field(10, gt=0, description="SH stops at m active SLPs")
    alpha: float = Field(1.0, gt=0.0, le=1.0, description="Online ranking temperature")
    init_samples: int = Field(100, gt=0, description="Prior samples for guide initialization")
    init_iters: int = Field(1000, ge=0, description="Adam steps of the prior fit")
    elbo_particles: int = Field(5, gt=0, description="Particles per gradient step")
    estimate_samples: int = Field(100, gt=0, description="Proposals per local ELBO estimate between SH phases")
    surrogate_estimate_samples: int = Field(100, gt=0, description="Samples per surrogate ELBO estimate")
    weight_samples: int = Field(1000, gt=0, description="Proposals per final local ELBO estimate")
    lr: float = Field(0.01, gt=0.0, description="Adam learning rate")
    batch_size: Optional[int] = Field(None, gt=0, description="Minibatch size for stochastic training")
    estimator: Optional[EstimatorOverride] = Field(None, description="Force a gradient estimator")
    max_rejection_attempts: int = Field(1000, gt=0, description="Rejection sampler attempt cap")

    max_runs: int = Field(3, gt=0, description="Online SDVI: number of SH runs")
    wall_clock_seconds: Optional[float] = Field(None, gt=0.0, description="Online SDVI: time limit")
    online_discovery_sims: Optional[int] = Field(None, gt=0, description="Online SDVI: sims per discovery round")

    bbvi_iters: int = Field(2000, gt=0, description="BBVI optimization steps")
    bbvi_cap: int = Field(25, gt=0, description="Cap of unbounded discrete guide sites")

    lppd_samples: int = Field(100, gt=0, description="Posterior samples for LPPD")
    workers: int = Field(1, gt=0, description="Thread pool size")
    output_dir: Optional[str] = Field(None, description="Run directory; defaults to SDVI_RUNS_DIR/<run id>")

    @field_validator("model")
    @classmethod
    def validate_model(cls, v: str) -> str:
        """Validate model name against the registry."""
        from sdvi.models import MODELS
        if v not in MODELS:
            raise ValueError(f"unknown model {v!r}; choose from {', '.join(MODELS)}")
        return v

    @model_validator(mode="after")
    def validate_minibatch(self) -> "RunConfig":
        """Minibatching only makes sense for the full-data SDVI pipelines."""
        if self.batch_size is not None and self.algorithm == "bbvi":
            raise ValueError("batch_size is not supported with algorithm bbvi")
        return self


# ============================================================================
# Artifact schemas
# ============================================================================

class SlpRecord(BaseModel):
    """One discovered SLP."""
    index: int
    path: List[List[Any]] = Field(..., description="Address path as [site, counter] pairs")
    supports: List[str]
    branching: List[List[Any]] = Field(default_factory=list, description="[position, value] pairs")
    hits: int = 0
    log_c: Optional[float] = None
    summary: Optional[str] = None


class DiscoveryResponse(BaseModel):
    """Discovery report as stored in discovery.json."""
    run_id: str
    model: str
    n_sims: int
    n_failed: int
    d_min: float
    slps: List[SlpRecord]
    created_at: str


class LocalResult(BaseModel):
    """Per-SLP outcome of a fit."""
    index: int
    summary: str
    weight: float
    local_elbo: Optional[float] = None
    std_error: Optional[float] = None
    acceptance_rate: Optional[float] = None
    iterations: int = 0


class FitResponse(BaseModel):
    """Summary returned after a fit."""
    run_id: str
    model: str
    algorithm: str
    global_elbo: Optional[float] = None
    slps: List[LocalResult] = Field(default_factory=list)
    created_at: str


class RunSummary(BaseModel):
    """Entry of the run index."""
    id: str
    model: str
    algorithm: str
    seed: int
    status: str
    output_dir: str
    global_elbo: Optional[float] = None
    created_at: str


class EvalResponse(BaseModel):
    """Evaluation metrics of a fitted run; unavailable metrics are None."""
    run_id: str
    model: str
    global_elbo: Optional[float] = None
    log_z: Optional[float] = None
    elbo_gap: Optional[float] = None
    weights_squared_error: Optional[float] = None
    lppd: Optional[float] = None
    oracle_lppd: Optional[float] = None
    map_components: Optional[int] = None
    top_slp: Optional[str] = None
    unavailable: List[str] = Field(default_factory=list)


class ModelInfo(BaseModel):
    """Registered benchmark model and its default configuration."""
    name: str
    defaults: Dict[str, Any]
