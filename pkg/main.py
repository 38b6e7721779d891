"""
FastAPI Application for the Reliability Calculus

Features:
- Exact evaluation, Monte-Carlo simulation, rewriting, goal checking
  and system comparison over HTTP (system text in the request body)
- Validation with Pydantic schemas
- One error body {error_code, detail} for engine and unexpected errors
- Request/response logging middleware
- Health check and bundled-system endpoints
- CORS configuration
- Automatic OpenAPI documentation at /docs
"""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, field_validator

from cli import cmd_check, cmd_compare, cmd_eval, cmd_rewrite, cmd_simulate
from config import load_config
from dsl import SystemFile, parse_system
from errors import ReliabilityError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

config = load_config()

# FastAPI application
app = FastAPI(
    title="Reliability Calculus API",
    description="Exact, numeric and Monte-Carlo reliability bounds for abstract probabilistic computations",
    version="0.1.0",
    docs_url="/docs",
    redoc_url="/redoc"
)

# CORS Configuration
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)


# ============================================================================
# Pydantic Schemas
# ============================================================================

class ErrorResponse(BaseModel):
    """Standard error response schema."""
    error_code: str
    detail: str


class SystemRequest(BaseModel):
    """System text plus constant overrides."""
    system: str = Field(..., description="System description (DSL text)")
    constants: dict[str, str] = Field(default_factory=dict, description="Constant overrides, e.g. {\"val_c\": \"blue\"}")

    def load(self) -> SystemFile:
        system = parse_system(self.system)
        return system.with_constants(self.constants) if self.constants else system


class EvalRequest(SystemRequest):
    event: str = Field(..., description="Event predicate, e.g. s = stack2")


class SamplingFields(BaseModel):
    n: Optional[int] = Field(default=None, description="Sample count (default from config)")
    seed: Optional[int] = Field(default=None, description="Random seed (default from config)")
    gamma: Optional[float] = Field(default=None, description="Confidence level in (0, 1)")

    @field_validator("n")
    @classmethod
    def validate_n(cls, v):
        if v is not None and v < 1:
            raise ValueError("Sample count must be >= 1")
        return v

    @field_validator("seed")
    @classmethod
    def validate_seed(cls, v):
        if v is not None and not 0 <= v < 2 ** 64:
            raise ValueError("Seed must be a 64-bit unsigned integer")
        return v

    @field_validator("gamma")
    @classmethod
    def validate_gamma(cls, v):
        if v is not None and not 0.0 < v < 1.0:
            raise ValueError("Confidence level must be in (0, 1)")
        return v


class SimulateRequest(EvalRequest, SamplingFields):
    pass


class RewriteRequest(SystemRequest):
    script: str = Field(..., description="Proof script, one invocation per line")


class CheckRequest(SystemRequest):
    goal: str = Field(..., description="Goal, e.g. Pr(s = stack2) < 0.1")
    script: str = Field(default="", description="Proof script")


class CompareRequest(EvalRequest, SamplingFields):
    other: Optional[str] = Field(default=None, description="Second system (DSL text)")
    script: Optional[str] = Field(default=None, description="Rewrite the first system with this script instead")


class HealthResponse(BaseModel):
    status: str
    version: str
    timestamp: datetime


class SystemText(BaseModel):
    name: str
    text: str


class EvalResponse(BaseModel):
    system: str
    event: str
    probability: float
    exact: Optional[str] = None
    valuations: int


class EstimateResponse(BaseModel):
    system: str
    event: str
    p_hat: float
    half_width: float
    n: int
    seed: int
    gamma: float
    hits: int


class RewriteResponse(BaseModel):
    system: str
    term: str
    term_hash: str
    trace: list[dict]


class CheckResponse(BaseModel):
    system: str
    goal: str
    verdict: str
    goals: list[dict]
    obligations: list[dict]
    trace: list[dict]
    failure: Optional[dict] = None


class CompareResponse(BaseModel):
    system: str
    other: str
    event: str
    first: dict
    second: dict
    agree: bool


# ============================================================================
# Request/Response Logging Middleware
# ============================================================================

@app.middleware("http")
async def log_requests(request: Request, call_next):
    """Log all incoming requests and responses."""
    logger.info(f"Request: {request.method} {request.url.path}")
    response = await call_next(request)
    logger.info(f"Response: {response.status_code}")
    return response


# ============================================================================
# System Endpoints
# ============================================================================

@app.get(
    "/health",
    response_model=HealthResponse,
    tags=["System"],
    summary="Health Check",
)
async def health_check():
    return HealthResponse(status="healthy", version=app.version, timestamp=datetime.now(timezone.utc))


@app.get(
    "/systems",
    response_model=list[str],
    tags=["System"],
    summary="List Bundled Systems",
)
async def list_systems():
    return sorted(p.stem for p in Path(config.assets_dir).glob("*.sys"))


@app.get(
    "/systems/{name}",
    response_model=SystemText,
    tags=["System"],
    summary="Get Bundled System",
    description="Source text of a bundled system, ready to post back as `system`",
    responses={404: {"model": ErrorResponse, "description": "System not found"}}
)
async def get_system(name: str):
    path = Path(config.assets_dir) / f"{name}.sys"
    if not name.isidentifier() or not path.exists():
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail={"error_code": "NOT_FOUND", "detail": f"No bundled system named '{name}'"}
        )
    return SystemText(name=name, text=path.read_text(encoding="utf-8"))


# ============================================================================
# Engine Endpoints
# ============================================================================

ENGINE_ERRORS = {400: {"model": ErrorResponse, "description": "Engine error (parse, precondition, ...)"}}


@app.post("/eval", response_model=EvalResponse, tags=["Engine"], summary="Exact Probability",
          description="Exact event probability of a finite-discrete system", responses=ENGINE_ERRORS)
def eval_event(req: EvalRequest):
    return cmd_eval(req.load(), req.event, config)


@app.post("/simulate", response_model=EstimateResponse, tags=["Engine"], summary="Monte-Carlo Estimate",
          description="Event probability estimate with a Wilson confidence interval", responses=ENGINE_ERRORS)
def simulate(req: SimulateRequest):
    return cmd_simulate(req.load(), req.event, config, req.n, req.seed, req.gamma)


@app.post("/rewrite", response_model=RewriteResponse, tags=["Engine"], summary="Apply Proof Script",
          responses=ENGINE_ERRORS)
def rewrite(req: RewriteRequest):
    return cmd_rewrite(req.load(), req.script, config)


@app.post("/check", response_model=CheckResponse, tags=["Engine"], summary="Check Goal",
          description="Verdict established / not-established for a probability bound", responses=ENGINE_ERRORS)
def check(req: CheckRequest):
    return cmd_check(req.load(), req.goal, req.script, config)


@app.post("/compare", response_model=CompareResponse, tags=["Engine"], summary="Compare Systems",
          description="Estimate one event on two computations with the same seed", responses=ENGINE_ERRORS)
def compare(req: CompareRequest):
    system = req.load()
    other = None
    if req.other is not None:
        other = parse_system(req.other)
        if req.constants:
            other = other.with_constants(req.constants)
    return cmd_compare(system, req.event, config, other, req.script, req.n, req.seed, req.gamma)


# ============================================================================
# Exception Handlers
# ============================================================================

@app.exception_handler(ReliabilityError)
async def reliability_error_handler(request, exc: ReliabilityError):
    """Engine errors are caller errors: 400 with the standard body."""
    logger.info(f"{exc.error_code}: {exc.detail}")
    body = exc.to_dict()
    return JSONResponse(
        status_code=status.HTTP_400_BAD_REQUEST,
        content={"error_code": body["error_code"], "detail": body["detail"]}
    )


@app.exception_handler(HTTPException)
async def http_exception_handler(request, exc):
    """Handle HTTP exceptions with consistent error format."""
    if isinstance(exc.detail, dict):
        return JSONResponse(status_code=exc.status_code, content=exc.detail)
    return JSONResponse(
        status_code=exc.status_code,
        content={"error_code": "ERROR", "detail": str(exc.detail)}
    )


@app.exception_handler(Exception)
async def general_exception_handler(request, exc):
    """Handle unexpected exceptions."""
    logger.error(f"Unexpected error: {exc}")
    return JSONResponse(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        content={"error_code": "INTERNAL_ERROR", "detail": "An unexpected error occurred"}
    )


# ============================================================================
# Run with FastAPI CLI (recommended)
# ============================================================================
# Development: uv run fastapi dev main.py --port 8000
# Production:  uv run fastapi run main.py --port 8000
