"""
Model routes.

Registered benchmark models and their default run configurations.
"""
from typing import List

from fastapi import APIRouter, HTTPException

from sdvi import config
from sdvi.models import MODELS
from sdvi.schemas import ModelInfo

router = APIRouter(prefix="/api/models", tags=["Models"])


@router.get("", response_model=List[ModelInfo], status_code=200)
async def get_models():
    """List benchmark models with their defaults."""
    return [ModelInfo(name=name, defaults=config.defaults_for(name)) for name in MODELS]


@router.get("/{name}", response_model=ModelInfo, status_code=200)
async def get_model(name: str):
    """Get one benchmark model."""
    if name not in MODELS:
        raise HTTPException(status_code=404, detail=f"Model {name} not found")
    return ModelInfo(name=name, defaults=config.defaults_for(name))
