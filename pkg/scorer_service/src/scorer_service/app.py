"""FastAPI application exposing the scoring protocol.

POST /v1/score  {"pairs": [{"context", "continuation"}]}
                -> {"log_likelihoods": [...], "model_fingerprint": "..."}
GET  /v1/health -> {"status": "ready", "model_fingerprint": "..."}

Errors: 400 malformed request, 413 pair over the byte limit, 503 model not
loaded. Configured by SCORER_MODEL ("byte:<seed>"), SCORER_MAX_TOKENS (bytes
per pair), SCORER_PORT (serve entry point).
"""

from __future__ import annotations

import os
from contextlib import asynccontextmanager

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .lm import DEFAULT_MAX_BYTES, Scorer, parse_model_spec


class ScorePair(BaseModel):
    context: str
    continuation: str


class ScoreRequest(BaseModel):
    pairs: list[ScorePair] = Field(min_length=1)


class ScoreResponse(BaseModel):
    log_likelihoods: list[float]
    model_fingerprint: str


class HealthResponse(BaseModel):
    status: str
    model_fingerprint: str


def create_app(model_spec: str | None = None, max_bytes: int | None = None) -> FastAPI:
    spec = model_spec if model_spec is not None else os.environ.get("SCORER_MODEL", "byte:0")
    limit = max_bytes if max_bytes is not None else int(
        os.environ.get("SCORER_MAX_TOKENS", DEFAULT_MAX_BYTES)
    )

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        app.state.scorer = Scorer(seed=parse_model_spec(spec), max_bytes=limit)
        yield

    app = FastAPI(title="scorer-service", lifespan=lifespan)
    app.state.scorer = None

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def scorer() -> Scorer:
        if app.state.scorer is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return app.state.scorer

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ready", model_fingerprint=scorer().fingerprint)

    @app.post("/v1/score", response_model=ScoreResponse)
    def score(request: ScoreRequest) -> ScoreResponse:
        model = scorer()
        for i, pair in enumerate(request.pairs):
            if model.pair_length(pair.context, pair.continuation) > model.max_bytes:
                raise HTTPException(
                    status_code=413,
                    detail=f"pair {i} exceeds the {model.max_bytes}-byte limit",
                )
        values = model.score_pairs([(p.context, p.continuation) for p in request.pairs])
        return ScoreResponse(log_likelihoods=values, model_fingerprint=model.fingerprint)

    return app


app = create_app()
