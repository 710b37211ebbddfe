"""
Run routes.

Discovery, fitting and evaluation of runs. The compute-bound endpoints are
plain functions so FastAPI runs them in its thread pool.
"""
from pathlib import Path
from typing import List

from fastapi import APIRouter, HTTPException
from fastapi.responses import Response

from sdvi import cli, crud, utils, utils_excel
from sdvi.config import build_config
from sdvi.schemas import DiscoveryResponse, EvalResponse, FitResponse, RunConfig, RunSummary

router = APIRouter(prefix="/api/runs", tags=["Runs"])


def _with_model_defaults(config: RunConfig) -> RunConfig:
    """Per-model defaults for every field the request left out."""
    return build_config(config.model_dump(exclude_unset=True))


def _get_run_or_404(run_id: str) -> dict:
    run = crud.get_run_by_id(run_id)
    if not run:
        raise HTTPException(status_code=404, detail=f"Run with id {run_id} not found")
    return run


@router.post("/discover", response_model=DiscoveryResponse, status_code=201)
def discover_slps(config: RunConfig):
    """Run SLP discovery and store it as a new run."""
    _, report = cli.cmd_discover(_with_model_defaults(config))
    return utils.jsonable(report)


@router.post("/fit", response_model=FitResponse, status_code=201)
def fit_run(config: RunConfig):
    """Fit a run synchronously and return its summary."""
    return utils.jsonable(cli.cmd_fit(_with_model_defaults(config)))


@router.get("", response_model=List[RunSummary], status_code=200)
async def get_runs():
    """Get all runs."""
    return utils.jsonable(crud.get_all_runs())


@router.get("/{run_id}", response_model=RunSummary, status_code=200)
async def get_run(run_id: str):
    """Get a run by ID."""
    return utils.jsonable(_get_run_or_404(run_id))


@router.get("/{run_id}/eval", response_model=EvalResponse, status_code=200)
def evaluate_run(run_id: str):
    """Compute and store evaluation metrics of a fitted run."""
    run = _get_run_or_404(run_id)
    if run.get("status") not in ("fitted", "evaluated"):
        raise HTTPException(status_code=400, detail=f"Run {run_id} has not been fitted")
    return utils.jsonable(cli.cmd_eval(crud.run_dir(run)))


@router.get("/{run_id}/export/xlsx", status_code=200)
def export_run_xlsx(run_id: str):
    """Export weights, local ELBOs and the halving ledger to an Excel file."""
    run = _get_run_or_404(run_id)
    directory: Path = crud.run_dir(run)
    result = crud.get_result(directory)
    if result is None:
        raise HTTPException(status_code=400, detail=f"Run {run_id} has no SDVI result")

    excel_bytes = utils_excel.generate_run_xlsx(result, crud.get_ledger(directory), crud.get_eval(directory))
    filename = f"sdvi_{run['model']}_{run_id[:8]}.xlsx"
    return Response(
        content=excel_bytes,
        media_type="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
        headers={"Content-Disposition": f"attachment; filename={filename}"}
    )
