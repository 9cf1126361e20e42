"""HTTP service exposing datasets, chunks, and annotation layers.

Chunk responses are raw octet streams; everything else is JSON. Annotation
writes go through the store's compare-and-set commit, surfacing stale
bases as 409 with the current head.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path

import uvicorn
from fastapi import FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from ..classify import retrain_from_annotations
from ..errors import (ConflictError, InvalidArgumentError, NotFoundError,
                      PreconditionFailedError)
from ..store import PrecomputedStore
from .models import ChangeSet, RetrainRequest, RetrainResult, WriteResult


@dataclass
class ServerConfig:
    root: Path
    host: str = "127.0.0.1"
    port: int = 8080
    datasets: tuple[str, ...] | None = None  # None serves everything under root
    cors_origins: tuple[str, ...] = ("*",)

    def __post_init__(self):
        self.root = Path(self.root)
        if not (0 < self.port < 65536):
            raise InvalidArgumentError(f"bad port {self.port}")
        if not self.root.exists():
            raise InvalidArgumentError(f"store root {self.root} does not exist")


def create_app(config: ServerConfig) -> FastAPI:
    store = PrecomputedStore(config.root)
    app = FastAPI(title="neurovol server", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(config.cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def visible(dataset: str) -> bool:
        return config.datasets is None or dataset in config.datasets

    def require_dataset(dataset: str):
        if not visible(dataset) or not store.info_path(dataset).exists():
            raise NotFoundError(f"dataset {dataset!r} not found")

    @app.exception_handler(NotFoundError)
    async def _not_found(_req: Request, exc: NotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(InvalidArgumentError)
    async def _bad_request(_req: Request, exc: InvalidArgumentError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ConflictError)
    async def _conflict(_req: Request, exc: ConflictError):
        return JSONResponse(status_code=409,
                            content={"detail": str(exc), "head": exc.head})

    @app.exception_handler(PreconditionFailedError)
    async def _precondition(_req: Request, exc: PreconditionFailedError):
        return JSONResponse(status_code=412,
                            content={"detail": str(exc), "counts": exc.counts})

    @app.exception_handler(RequestValidationError)
    async def _validation(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc.errors())})

    @app.get("/datasets")
    def list_datasets():
        return [d for d in store.list_datasets() if visible(d)]

    @app.get("/d/{dataset}/info")
    def dataset_info(dataset: str):
        require_dataset(dataset)
        return Response(content=store.info_path(dataset).read_bytes(),
                        media_type="application/json")

    @app.get("/d/{dataset}/scales/{key}/{chunk}")
    def get_chunk(dataset: str, key: str, chunk: str):
        require_dataset(dataset)
        path = store.chunk_path(dataset, key, chunk)
        return Response(content=path.read_bytes(),
                        media_type="application/octet-stream")

    @app.get("/d/{dataset}/ann/{layer}")
    def get_annotations(dataset: str, layer: str,
                        blocks: str | None = Query(default=None),
                        rev: int | None = Query(default=None)):
        require_dataset(dataset)
        block_list = blocks.split(",") if blocks else None
        doc = store.annotations_document(dataset, layer, revision=rev,
                                         blocks=block_list)
        return JSONResponse(content=doc)

    @app.put("/d/{dataset}/ann/{layer}")
    def put_annotations(dataset: str, layer: str, change_set: ChangeSet,
                        base: int = Query(...)):
        require_dataset(dataset)
        revision = store.write_annotations(
            dataset, layer,
            [m.to_annotation() for m in change_set.annotations],
            base_revision=base, author=change_set.author,
        )
        return WriteResult(revision=revision.number)

    @app.get("/d/{dataset}/ann/{layer}/export")
    def export_layer(dataset: str, layer: str,
                     format: str = Query(default="json"),
                     rev: int | None = Query(default=None)):
        require_dataset(dataset)
        text = store.export_annotations(dataset, layer, revision=rev, fmt=format)
        media = "application/json" if format == "json" else "text/csv"
        return Response(content=text, media_type=media)

    @app.post("/d/{dataset}/retrain")
    def retrain(dataset: str, req: RetrainRequest | None = None):
        require_dataset(dataset)
        req = req or RetrainRequest()
        model, report = retrain_from_annotations(store, dataset, c=req.c,
                                                 seed=req.seed, layer=req.layer)
        return RetrainResult(
            model_version=model.version,
            trained_revision=model.trained_revision or 0,
            mean_auc=report.mean_auc,
            fold_aucs=list(report.fold_aucs),
        )

    return app


@dataclass
class ServiceHandle:
    """A uvicorn server running on a background thread."""

    server: uvicorn.Server
    thread: threading.Thread
    config: ServerConfig
    startup_errors: list

    def wait_started(self, timeout: float = 10.0):
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if self.startup_errors:
                raise RuntimeError(f"server failed to start: {self.startup_errors[0]}")
            if time.monotonic() > deadline:
                raise RuntimeError("server failed to start in time")
            if not self.thread.is_alive():
                raise RuntimeError("server thread exited during startup")
            time.sleep(0.02)

    def stop(self, timeout: float = 10.0):
        """Graceful shutdown: in-flight requests complete first."""
        self.server.should_exit = True
        self.thread.join(timeout)


def serve(config: ServerConfig, wait: bool = True) -> ServiceHandle:
    """Start serving on a background thread and return a stoppable handle."""
    app = create_app(config)
    uv_config = uvicorn.Config(app, host=config.host, port=config.port,
                               log_level="warning")
    server = uvicorn.Server(uv_config)
    errors: list = []

    def run():
        try:
            server.run()
        except BaseException as exc:  # surfaced by wait_started
            errors.append(exc)

    thread = threading.Thread(target=run, daemon=True, name="neurovol-serve")
    thread.start()
    handle = ServiceHandle(server=server, thread=thread, config=config,
                           startup_errors=errors)
    if wait:
        handle.wait_started()
    return handle


def run_blocking(config: ServerConfig):
    """Foreground variant used by the CLI."""
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
