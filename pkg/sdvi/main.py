"""
FastAPI application entry point.

Main application configuration with CORS, routers, and error handling.
"""
import logging
import os

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from sdvi import db
from sdvi.errors import ConfigurationError
from sdvi.routers import models, runs

# Environment variables
ALLOWED_ORIGINS = os.getenv("ALLOWED_ORIGINS", "*").split(",")
ENVIRONMENT = os.getenv("ENVIRONMENT", "development")

logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title="SDVI API",
    description="Support decomposition variational inference for stochastic-support programs",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc"
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=ALLOWED_ORIGINS if ENVIRONMENT == "production" else ["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(models.router)
app.include_router(runs.router)


@app.on_event("startup")
async def startup_event():
    """Initialize the run index on startup."""
    db.ensure_file_exists(db.runs_dir() / db.INDEX_FILE, [])


@app.get("/", status_code=200)
async def root():
    """Service information."""
    return {"name": "sdvi", "version": app.version, "docs": app.docs_url}


@app.get("/health", status_code=200)
async def health():
    """Health check."""
    return {"status": "healthy"}


@app.exception_handler(ConfigurationError)
async def configuration_exception_handler(request: Request, exc: ConfigurationError):
    """Invalid run configuration."""
    return JSONResponse(status_code=400, content={"detail": str(exc)})


@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    """Global exception handler for unhandled errors."""
    logger.exception("unhandled error on %s", request.url.path)
    return JSONResponse(
        status_code=500,
        content={
            "detail": "Internal server error",
            "message": str(exc) if str(exc) else "An unexpected error occurred"
        }
    )
