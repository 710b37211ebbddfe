"""
CRUD operations for runs and their artifacts.

This module provides high-level functions that use the db.py layer for
reading and writing the files of a run directory. The run index lives in
SDVI_RUNS_DIR/runs.json.
"""
import uuid
from pathlib import Path
from typing import Any, Dict, List, Optional

from sdvi import db, utils
from sdvi.models import Dataset
from sdvi.schemas import RunConfig


RUN_FILE = "run.json"
CONFIG_FILE = "config.json"
DISCOVERY_FILE = "discovery.json"
RESULT_FILE = "result.json"
BBVI_GUIDE_FILE = "bbvi_guide.json"
BBVI_TRAJECTORY_FILE = "bbvi_trajectory.csv"
TRAIN_METRICS_FILE = "train_metrics.csv"
LEDGER_FILE = "ledger.csv"
POSTERIOR_FILE = "posterior_samples.csv"
EVAL_FILE = "eval_metrics.csv"
REPORT_FILE = "report.xlsx"
DATASET_FILE = "dataset.csv"
DATASET_MANIFEST_FILE = "dataset_manifest.json"


def _index_path() -> Path:
    return db.runs_dir() / db.INDEX_FILE


# ============================================================================
# Runs CRUD
# ============================================================================

def get_all_runs() -> List[Dict[str, Any]]:
    """Get all runs."""
    return db.read_json(_index_path(), default=[])


def get_run_by_id(run_id: str) -> Optional[Dict[str, Any]]:
    """Get a run by ID."""
    for run in get_all_runs():
        if run.get("id") == run_id:
            return run
    return None


def create_run(config: RunConfig) -> Dict[str, Any]:
    """Create a new run, its directory and its config.json."""
    run_id = str(uuid.uuid4())
    output_dir = Path(config.output_dir) if config.output_dir else db.runs_dir() / run_id
    new_run = {
        "id": run_id,
        "model": config.model,
        "algorithm": config.algorithm,
        "seed": config.seed,
        "status": "created",
        "output_dir": str(output_dir),
        "global_elbo": None,
        "created_at": utils.get_current_datetime_iso(),
    }
    db.write_json(output_dir / CONFIG_FILE, config.model_dump())
    db.write_json(output_dir / RUN_FILE, new_run)

    runs = get_all_runs()
    runs.append(new_run)
    db.write_json(_index_path(), runs)
    return new_run


def update_run(run_id: str, **fields: Any) -> Optional[Dict[str, Any]]:
    """Update fields of a run; returns the updated run or None."""
    runs = get_all_runs()
    for run in runs:
        if run.get("id") == run_id:
            run.update(fields)
            run["updated_at"] = utils.get_current_datetime_iso()
            db.write_json(_index_path(), runs)
            db.write_json(run_dir(run) / RUN_FILE, run)
            return run
    return None


def run_dir(run: Dict[str, Any]) -> Path:
    return Path(run["output_dir"])


def get_run_config(directory: Path) -> Optional[RunConfig]:
    """Config stored in a run directory."""
    data = db.read_json(directory / CONFIG_FILE)
    return RunConfig(**data) if data is not None else None


# ============================================================================
# Artifacts
# ============================================================================

def save_discovery(directory: Path, report: Dict[str, Any]) -> None:
    db.write_json(directory / DISCOVERY_FILE, {**report, "created_at": utils.get_current_datetime_iso()})


def get_discovery(directory: Path) -> Optional[Dict[str, Any]]:
    return db.read_json(directory / DISCOVERY_FILE)


def save_result(directory: Path, result: Dict[str, Any], train_metrics: List[Dict[str, Any]],
                ledger: List[Dict[str, Any]]) -> None:
    """Save result.json plus the training metrics and SH ledger CSVs."""
    db.write_json(directory / RESULT_FILE, {**result, "created_at": utils.get_current_datetime_iso()})
    db.write_csv(directory / TRAIN_METRICS_FILE, train_metrics,
                 ["iteration", "slp_index", "surrogate_elbo", "acceptance_rate", "grad_norm", "skipped_steps"])
    db.write_csv(directory / LEDGER_FILE, ledger,
                 ["run", "phase", "slp_index", "iterations", "cumulative_iterations", "surrogate_elbo", "score",
                  "active"])


def get_result(directory: Path) -> Optional[Dict[str, Any]]:
    return db.read_json(directory / RESULT_FILE)


def get_ledger(directory: Path) -> List[Dict[str, str]]:
    return db.read_csv(directory / LEDGER_FILE)


def save_posterior_samples(directory: Path, rows: List[Dict[str, Any]]) -> None:
    db.write_csv(directory / POSTERIOR_FILE, rows)


def save_bbvi(directory: Path, guide: Dict[str, Any], trajectory: List[Dict[str, Any]],
              summary: Dict[str, Any]) -> None:
    """Save the BBVI guide (with its ELBO estimate and SLP mass) and its trajectory."""
    db.write_json(directory / BBVI_GUIDE_FILE, {"guide": guide, **summary,
                                                "created_at": utils.get_current_datetime_iso()})
    db.write_csv(directory / BBVI_TRAJECTORY_FILE, trajectory,
                 ["iteration", "elbo", "finite_particles", "n_sites", "skipped_steps"])


def get_bbvi(directory: Path) -> Optional[Dict[str, Any]]:
    return db.read_json(directory / BBVI_GUIDE_FILE)


def save_eval(directory: Path, metrics: Dict[str, Any]) -> None:
    """Eval metrics as metric,value rows."""
    unavailable = set(metrics.get("unavailable", []))
    rows = []
    for name, value in metrics.items():
        if name == "unavailable":
            continue
        if name in unavailable:
            value = "unavailable"
        rows.append({"metric": name, "value": "" if value is None else value})
    db.write_csv(directory / EVAL_FILE, rows, ["metric", "value"])


def get_eval(directory: Path) -> List[Dict[str, str]]:
    return db.read_csv(directory / EVAL_FILE)


def save_dataset(directory: Path, dataset: Dataset) -> None:
    """Dataset CSV (split columns padded) plus its manifest."""
    db.write_csv(directory / DATASET_FILE, list(utils.array_rows(dataset.columns)))
    db.write_json(directory / DATASET_MANIFEST_FILE, dataset.manifest())


def save_report(directory: Path, payload: bytes) -> Path:
    path = directory / REPORT_FILE
    db.write_bytes(path, payload)
    return path


def get_run_record(directory: Path) -> Optional[Dict[str, Any]]:
    """Run record stored alongside the artifacts."""
    return db.read_json(directory / RUN_FILE)
