# src/main.py
"""
Main application file for the DataFeed dispatcher status API.

This module initializes the FastAPI application, loads environment variables,
registers the error handler for service errors and includes the status
router. Run it with `uvicorn src.main:app`, which also starts a dispatcher
recovered from the configured journal, or pass `--status-port` to
`scripts/run_dispatcher.py`.
"""

from dotenv import load_dotenv

# Settings are read at import time, so .env must be loaded first.
load_dotenv()

import logging  # noqa: E402

from fastapi import FastAPI, Request  # noqa: E402
from fastapi.responses import JSONResponse  # noqa: E402

from src.api import endpoints  # noqa: E402
from src.core.errors import DataServiceError  # noqa: E402

logger = logging.getLogger(__name__)

# --- Application Metadata ---
# Shown in the OpenAPI (Swagger) documentation at /docs.
app_metadata = {
    "title": "DataFeed Dispatcher API",
    "version": "1.0.0",
    "description": (
        "Read-only view of a DataFeed dispatcher: registered workers, jobs, "
        "shard assignment and the canonical journal-backed state."
    ),
    "license_info": {
        "name": "MIT License",
        "url": "https://opensource.org/licenses/MIT",
    },
}

app = FastAPI(**app_metadata)

# Status routes live under /api/v1.
app.include_router(endpoints.router, prefix="/api/v1")


@app.exception_handler(DataServiceError)
async def data_service_error_handler(request: Request, exc: DataServiceError) -> JSONResponse:
    """Service errors that escape a route become a 500 carrying the error code."""
    logger.error(f"{request.method} {request.url.path} failed: {exc}")
    return JSONResponse(
        status_code=500,
        content={"detail": str(exc), "code": exc.code, "error": type(exc).__name__},
    )


@app.get("/", tags=["Health Check"], summary="Check the API's operational status.")
async def root():
    """
    Liveness check. Does not touch the dispatcher.
    """
    return {"message": "DataFeed dispatcher API is running!"}
