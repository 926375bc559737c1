"""HTTP service around the map server.

The binary protocol runs over a TCP listener started in the app lifespan;
HTTP exposes health, statistics, map summaries, a frame relay for clients
that cannot hold a socket, and the debug snapshot.
"""

from __future__ import annotations

import logging
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request, Response
from pydantic import BaseModel

from . import __version__
from . import protocol as P
from .errors import DecodeError
from .netio import FrameListener, OptimizerWorker
from .server import Server, ServerConfig
from .snapshot import encode_snapshot, summarize

log = logging.getLogger(__name__)

OCTET = "application/octet-stream"


class ServiceSettings(BaseModel):
    frame_host: str = "127.0.0.1"
    frame_port: Optional[int] = None  # None: no TCP frame listener
    snapshot_path: str = "snapshot.bin"
    scenario: Optional[str] = None  # scenario file supplying server settings
    worker_period_s: float = 0.005


class Health(BaseModel):
    status: str
    version: str
    frame_port: Optional[int]


class MapSummary(BaseModel):
    map_id: int
    keyframes: int
    virtual_keyframes: int
    landmarks: int
    edges: int
    clients: list[int]


class TimingStats(BaseModel):
    count: int
    mean_ms: Optional[float]
    std_ms: Optional[float]
    max_ms: Optional[float]


class ServerStatus(BaseModel):
    maps: int
    non_empty_maps: int
    sessions: int
    queued_keyframes: int
    counters: dict[str, int]
    timings: dict[str, TimingStats]


class SnapshotWritten(BaseModel):
    path: str
    bytes: int


def _server_from_settings(settings: ServiceSettings) -> Server:
    if settings.scenario:
        from .runner import server_config
        from .scenario import load_scenario

        return Server(server_config(load_scenario(settings.scenario)))
    return Server(ServerConfig())


def create_app(settings: ServiceSettings | None = None, server: Server | None = None) -> FastAPI:
    settings = settings or ServiceSettings()
    slam = server or _server_from_settings(settings)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        worker = OptimizerWorker(slam, settings.worker_period_s).start()
        listener = None
        if settings.frame_port is not None:
            listener = FrameListener(slam, settings.frame_host, settings.frame_port).start()
            app.state.frame_port = listener.address[1]
            log.info("protocol frames on %s:%d", *listener.address)
        try:
            yield
        finally:
            if listener is not None:
                listener.stop()
            worker.stop()

    app = FastAPI(title="collabslam map server", version=__version__, lifespan=lifespan)
    app.state.server = slam
    app.state.frame_port = None

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(status="ok", version=__version__, frame_port=app.state.frame_port)

    @app.get("/v1/maps", response_model=list[MapSummary])
    def maps() -> list[MapSummary]:
        with slam.meta:
            current = dict(slam.maps)
        return [MapSummary(**r) for r in summarize(current) if r["keyframes"] or r["landmarks"]]

    @app.get("/v1/stats", response_model=ServerStatus)
    def stats() -> ServerStatus:
        st = slam.stats
        counters = {k: v for k, v in vars(st).items() if isinstance(v, int)}
        with slam.meta:
            n_maps, n_sessions = len(slam.maps), len(slam.handlers)
        return ServerStatus(
            maps=n_maps,
            non_empty_maps=len(slam.non_empty_maps()),
            sessions=n_sessions,
            queued_keyframes=len(slam.queue),
            counters=counters,
            timings={k: TimingStats(**v) for k, v in slam.timings.summary().items()},
        )

    @app.post("/v1/frames")
    async def frames(request: Request) -> Response:
        """Feed length-prefixed frames; the reply carries queued downlink frames for the same clients."""
        body = bytearray(await request.body())
        batch = P.split_stream(body)
        if body:
            raise HTTPException(400, f"{len(body)} trailing bytes after the last complete frame")
        clients = set()
        for fr in batch:
            try:
                clients.add(P.peek_header(fr)[1])
            except DecodeError as exc:
                raise HTTPException(400, str(exc)) from None
            slam.on_frame(fr)
        out = b"".join(P.frame_for_stream(f) for cid in sorted(clients) for _, _, f in slam.take_outgoing(cid))
        return Response(out, media_type=OCTET)

    @app.get("/v1/snapshot")
    def get_snapshot() -> Response:
        with slam.meta:
            data = encode_snapshot(dict(slam.maps))
        return Response(data, media_type=OCTET)

    @app.post("/v1/snapshot", response_model=SnapshotWritten)
    def write_snapshot() -> SnapshotWritten:
        with slam.meta:
            data = encode_snapshot(dict(slam.maps))
        path = Path(settings.snapshot_path)
        path.write_bytes(data)
        return SnapshotWritten(path=str(path), bytes=len(data))

    return app
