"""
Command-line batch harness.

    python -m sdvi discover --model fig1 --seed 0
    python -m sdvi fit --config configs/gmm.toml --seed 3 --workers 4
    python -m sdvi eval runs/<run id> --xlsx

Exit codes: 0 success, 2 configuration error, 3 inference failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from sdvi import crud, inference, utils_excel
from sdvi.baselines import GlobalGuide
from sdvi.config import build_config
from sdvi.errors import ConfigurationError, RejectionExhaustedError, SdviError
from sdvi.models import MODELS, BenchmarkModel, build_model
from sdvi.schemas import RunConfig
from sdvi.training import ElboEstimate
from sdvi.utils import RngStreams


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFERENCE = 3


# ============================================================================
# Commands
# ============================================================================

def _start_run(config: RunConfig) -> Tuple[Dict[str, Any], Path, BenchmarkModel]:
    model = build_model(config.model, **config.model_params)
    run = crud.create_run(config)
    directory = crud.run_dir(run)
    if model.dataset is not None:
        crud.save_dataset(directory, model.dataset)
    return run, directory, model


def cmd_discover(config: RunConfig) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Run SLP discovery and store discovery.json; returns (run, report)."""
    run, directory, model = _start_run(config)
    try:
        report = inference.run_discovery(model, config, RngStreams(config.seed))
    except SdviError:
        crud.update_run(run["id"], status="failed")
        raise
    data = report.to_dict()
    data["slps"] = [inference.slp_to_dict(slp, model) for slp in report.slps]
    data.update({"run_id": run["id"], "model": model.name})
    crud.save_discovery(directory, data)
    run = crud.update_run(run["id"], status="discovered") or run
    return run, crud.get_discovery(directory)


def _fit_bbvi(run: Dict[str, Any], directory: Path, model: BenchmarkModel, config: RunConfig,
              streams: RngStreams) -> Dict[str, Any]:
    bbvi = inference.run_bbvi(model, config, streams)
    crud.save_bbvi(directory, bbvi.guide.to_dict(), bbvi.trajectory,
                   {"model": model.name, "elbo": bbvi.elbo.to_dict(), "slp_mass": bbvi.slp_mass})
    crud.update_run(run["id"], status="fitted", global_elbo=bbvi.elbo.value)
    return {"run_id": run["id"], "model": model.name, "algorithm": config.algorithm,
            "global_elbo": bbvi.elbo.value, "slps": [], "created_at": run["created_at"]}


def cmd_fit(config: RunConfig) -> Dict[str, Any]:
    """Run the configured algorithm end to end; returns the fit summary."""
    run, directory, model = _start_run(config)
    streams = RngStreams(config.seed)
    try:
        if config.algorithm == "bbvi":
            return _fit_bbvi(run, directory, model, config, streams)
        if config.algorithm == "sdvi-online":
            result = inference.fit_online(model, config, streams)
        else:
            report = inference.run_discovery(model, config, streams)
            crud.save_discovery(directory, {**report.to_dict(), "run_id": run["id"], "model": model.name})
            result = inference.fit_sdvi(model, config, streams, report=report)
    except SdviError:
        crud.update_run(run["id"], status="failed")
        raise

    data = inference.result_to_dict(result, model)
    crud.save_result(directory, data, result.train_metrics, result.ledger)
    try:
        rows = inference.posterior_rows(result, config.lppd_samples, streams.get("posterior"))
        crud.save_posterior_samples(directory, rows)
    except RejectionExhaustedError as exc:
        logger.warning("posterior samples not written: %s", exc)
    crud.update_run(run["id"], status="fitted", global_elbo=result.global_elbo)

    slps = []
    for record in data["slps"]:
        slps.append({
            "index": record["index"],
            "summary": record.get("summary", ""),
            "weight": record["weight"],
            "local_elbo": record["estimate"]["value"],
            "std_error": record["estimate"]["std_error"],
            "acceptance_rate": record["acceptance_rate"],
            "iterations": result.diagnostics.get("iterations", {}).get(str(record["index"]), 0),
        })
    return {"run_id": run["id"], "model": model.name, "algorithm": config.algorithm,
            "global_elbo": result.global_elbo, "slps": slps, "created_at": run["created_at"]}


def cmd_eval(directory: Path, xlsx: bool = False, lppd_samples: Optional[int] = None) -> Dict[str, Any]:
    """Compute eval_metrics.csv for a fitted run directory (and report.xlsx on request)."""
    config = crud.get_run_config(directory)
    if config is None:
        raise ConfigurationError(f"{directory} is not a run directory")
    if lppd_samples is not None:
        config = config.model_copy(update={"lppd_samples": lppd_samples})
    model = build_model(config.model, **config.model_params)
    streams = RngStreams(config.seed)

    if config.algorithm == "bbvi":
        data = crud.get_bbvi(directory)
        if data is None:
            raise ConfigurationError(f"{directory} has no fitted BBVI guide")
        bbvi = inference.BbviResult(GlobalGuide.from_dict(data["guide"], lr=config.lr), [],
                                    ElboEstimate(**data["elbo"]), data.get("slp_mass", {}))
        metrics = inference.evaluate_bbvi(model, bbvi, config, streams)
        report_source = {"model": model.name, "global_elbo": bbvi.elbo.value, "slps": []}
    else:
        data = crud.get_result(directory)
        if data is None:
            raise ConfigurationError(f"{directory} has no result.json")
        result = inference.result_from_dict(data, model, config.max_rejection_attempts)
        metrics = inference.evaluate(model, result, config, streams)
        report_source = data

    crud.save_eval(directory, metrics)
    if xlsx:
        payload = utils_excel.generate_run_xlsx(report_source, crud.get_ledger(directory), crud.get_eval(directory))
        path = crud.save_report(directory, payload)
        logger.info("report written to %s", path)

    record = crud.get_run_record(directory)
    run_id = record["id"] if record else directory.name
    if record:
        crud.update_run(run_id, status="evaluated")
    return {"run_id": run_id, "model": model.name, **metrics}


# ============================================================================
# Argument parsing
# ============================================================================

CONFIG_FLAGS = {
    "model": str,
    "algorithm": str,
    "seed": int,
    "discovery_sims": int,
    "budget": int,
    "min_candidates": int,
    "alpha": float,
    "init_samples": int,
    "init_iters": int,
    "elbo_particles": int,
    "weight_samples": int,
    "lr": float,
    "batch_size": int,
    "estimator": str,
    "max_runs": int,
    "wall_clock_seconds": float,
    "bbvi_iters": int,
    "workers": int,
    "output_dir": str,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="model parameter override, repeatable")
    for name, kind in CONFIG_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        if name == "model":
            parser.add_argument(flag, choices=sorted(MODELS))
        elif name == "algorithm":
            parser.add_argument(flag, choices=["sdvi", "sdvi-online", "bbvi"])
        elif name == "elbo_particles":
            parser.add_argument(flag, "--particles", dest=name, type=kind)
        else:
            parser.add_argument(flag, type=kind)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdvi", description="Support decomposition variational inference")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    discover = sub.add_parser("discover", help="find SLPs by prior simulation")
    _add_config_flags(discover)
    fit = sub.add_parser("fit", help="run sdvi, sdvi-online or bbvi")
    _add_config_flags(fit)

    evaluate = sub.add_parser("eval", help="metrics of a fitted run")
    evaluate.add_argument("run_dir", type=Path)
    evaluate.add_argument("--xlsx", action="store_true", help="also write report.xlsx")
    evaluate.add_argument("--lppd-samples", type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = {name: getattr(args, name) for name in CONFIG_FLAGS}
    return build_config(values, args.config, args.overrides)


def _print_summary(summary: Dict[str, Any]) -> None:
    for key, value in summary.items():
        if isinstance(value, list) and value and isinstance(value[0], dict):
            print(f"{key}:")
            for row in value:
                print("  " + ", ".join(f"{k}={v}" for k, v in row.items()))
        else:
            print(f"{key}: {value}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            summary = cmd_eval(args.run_dir, xlsx=args.xlsx, lppd_samples=args.lppd_samples)
        else:
            config = config_from_args(args)
            if args.command == "discover":
                run, report = cmd_discover(config)
                summary = {"run_id": run["id"], "output_dir": run["output_dir"], "n_slps": len(report["slps"]),
                           "d_min": report["d_min"]}
            else:
                summary = cmd_fit(config)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SdviError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    _print_summary(summary)
    return EXIT_OK
