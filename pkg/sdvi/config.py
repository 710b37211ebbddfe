"""
Run configuration loading.

Precedence, lowest first: per-model defaults, TOML file, explicit flags,
then `--set key=value` model-parameter overrides.
"""
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from sdvi.errors import ConfigurationError
from sdvi.schemas import RunConfig


logger = logging.getLogger(__name__)

MODEL_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "fig1": {
        "budget": 2000,
        "min_candidates": 2,
        "lr": 0.01,
        "elbo_particles": 5,
        "discovery_sims": 1000,
        "weight_samples": 1000,
        "init_samples": 200,
        "init_iters": 200,
    },
    "normal_intervals": {
        "budget": 100000,
        "min_candidates": 10,
        "lr": 0.01,
        "elbo_particles": 5,
        "discovery_sims": 1000,
        "init_samples": 100,
        "init_iters": 1000,
        "weight_samples": 1000,
    },
    "gmm": {
        "budget": 20000,
        "min_candidates": 10,
        "lr": 0.1,
        "elbo_particles": 10,
        "discovery_sims": 5000,
        "weight_samples": 100,
        "estimate_samples": 50,
        "init_iters": 100,
        "bbvi_cap": 25,
    },
    "gp_kernel": {
        "budget": 20000,
        "min_candidates": 10,
        "lr": 0.005,
        "elbo_particles": 1,
        "discovery_sims": 2000,
        "weight_samples": 100,
        "estimate_samples": 50,
        "init_iters": 100,
    },
}


def defaults_for(model: str) -> Dict[str, Any]:
    """RunConfig defaults of a model, merged over the schema defaults."""
    base = {name: field.default for name, field in RunConfig.model_fields.items()
            if not field.is_required() and field.default_factory is None}
    base.update(MODEL_DEFAULTS.get(model, {}))
    return base


def load_toml(path: Path) -> Dict[str, Any]:
    """
    Read a TOML run config.

    Args:
        path: TOML file with RunConfig keys at top level and an optional
            [model_params] table

    Returns:
        Dictionary of config values

    Raises:
        ConfigurationError: missing file or invalid TOML
    """
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {path}: {exc}") from exc


def parse_value(raw: str) -> Any:
    """Interpret a CLI value as a TOML scalar, falling back to a plain string."""
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    """Parse `key=value` strings."""
    overrides: Dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"override {pair!r} is not of the form key=value")
        overrides[key.strip()] = parse_value(raw.strip())
    return overrides


def build_config(values: Dict[str, Any], toml_path: Optional[Path] = None,
                 model_overrides: Optional[List[str]] = None) -> RunConfig:
    """
    Resolve a RunConfig from defaults, an optional TOML file and explicit values.

    Args:
        values: Explicit settings (CLI flags or a request body); None entries are ignored
        toml_path: Optional TOML file
        model_overrides: `key=value` strings merged into model_params

    Returns:
        Validated RunConfig

    Raises:
        ConfigurationError: unknown model, invalid values or a missing seed
    """
    from_file = load_toml(toml_path) if toml_path else {}
    explicit = {k: v for k, v in values.items() if v is not None}
    model = explicit.get("model", from_file.get("model"))
    if model is None:
        raise ConfigurationError("no model given")

    merged: Dict[str, Any] = defaults_for(model)
    merged.update(from_file)
    merged.update(explicit)
    params = dict(from_file.get("model_params", {}))
    params.update(explicit.get("model_params", {}))
    params.update(parse_overrides(model_overrides or []))
    merged["model_params"] = params
    merged["model"] = model
    if merged.get("seed") is None:
        raise ConfigurationError("a seed is required")
    try:
        return RunConfig(**merged)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation(exc)) from exc


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(p) for p in error["loc"]) or "config"
        parts.append(f"{location}: {error['msg']}")
    return "invalid configuration: " + "; ".join(parts)
