"""FastAPI application exposing train/eval/score/ablate.

Error mapping: InputError -> 400, any other package error -> 500 with
the message as detail.  Long operations run synchronously; the service
is intended for a trusted lab/line network, not the open internet.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .._version import __version__
from ..errors import FewadError, InputError
from . import handlers
from .schemas import (
    AblateRequest,
    AblateResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    ScoreRequest,
    ScoreResponse,
    TrainRequest,
    TrainResponse,
)


def create_app() -> FastAPI:
    app = FastAPI(title="fewad service", version=__version__)

    @app.exception_handler(InputError)
    async def _input_error(_: Request, exc: InputError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FewadError)
    async def _fewad_error(_: Request, exc: FewadError) -> JSONResponse:
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return handlers.health()

    @app.post("/train", response_model=TrainResponse)
    def train(request: TrainRequest) -> TrainResponse:
        return handlers.train(request)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(request: EvalRequest) -> EvalResponse:
        return handlers.evaluate(request)

    @app.post("/score", response_model=ScoreResponse)
    def score(request: ScoreRequest) -> ScoreResponse:
        return handlers.score(request)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate(request: AblateRequest) -> AblateResponse:
        return handlers.ablate(request)

    return app


app = create_app()
