"""Loopback HTTP control API, SSE event stream, and sync worker threads.

The JSON field names used by the endpoints are documented in docs/api.md;
the bearer token lives in a mode-0600 file under the registry root. No
endpoint ever returns key material or the registry password.
"""

from __future__ import annotations

import datetime
import ipaddress
import json
import secrets
import threading
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import registry as reg
from .errors import (
    NestedPaths,
    NoSuchVersion,
    NotADirectory,
    NothingToRestore,
    ProtboxError,
    SharedFolderAlreadyPaired,
    UnknownRequest,
)
from .sync import SyncEngine

API_TOKEN_FILENAME = "api_token"
EVENTS_FILENAME = "events.jsonl"

EXIT_WRONG_PASSWORD = 3
EXIT_PORT_BUSY = 4


def _iso(ts: float) -> str:
    return datetime.datetime.fromtimestamp(ts, datetime.timezone.utc).isoformat()


def load_or_create_api_token(root: Path) -> str:
    path = Path(root) / API_TOKEN_FILENAME
    if path.exists():
        return path.read_text("utf-8").strip()
    token = secrets.token_hex(16)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.touch(mode=0o600)
    path.write_text(token, "utf-8")
    path.chmod(0o600)
    return token


class PairCreate(BaseModel):
    prot_path: str
    shared_path: str


class RestoreBody(BaseModel):
    path: str
    version: int | None = None


class PolicyBody(BaseModel):
    mode: str
    keep: int | None = None
    path: str | None = None


class BackupDecisionBody(BaseModel):
    store: bool


def _pair_json(pair: reg.Pair) -> dict:
    return {
        "id": pair.pair_id,
        "prot_path": pair.prot_path,
        "shared_path": pair.shared_path,
        "state": pair.state,
        "entry_count": sum(1 for e in pair.entries.values() if not e.hidden),
        "hidden_count": sum(1 for e in pair.entries.values() if e.hidden),
        "request_id": pair.request_id,
    }


def _policy_json(policy: reg.BackupPolicy | None) -> dict | None:
    if policy is None:
        return None
    out = {"mode": policy.mode}
    if policy.mode == reg.POLICY_KEEP:
        out["keep"] = policy.keep
    return out


def create_app(engine: SyncEngine, api_token: str, ui_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="protbox", version="1")
    registry = engine.registry

    async def require_token(request: Request):
        header = request.headers.get("authorization", "")
        token = header.removeprefix("Bearer ").strip()
        if token != api_token:
            raise HTTPException(status_code=401, detail="invalid bearer token")

    auth = Depends(require_token)

    @app.exception_handler(ProtboxError)
    async def protbox_error(request, exc):
        status = 404 if isinstance(exc, (UnknownRequest, NoSuchVersion, NothingToRestore)) else 400
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    def get_pair(pair_id: str) -> reg.Pair:
        pair = registry.find_pair(pair_id)
        if pair is None:
            raise HTTPException(status_code=404, detail=f"no pair {pair_id}")
        return pair

    @app.get("/v1/pairs", dependencies=[auth])
    def list_pairs():
        with registry.lock:
            return [_pair_json(p) for p in registry.pairs]

    @app.post("/v1/pairs", dependencies=[auth], status_code=201)
    def add_pair(body: PairCreate):
        with registry.lock:
            try:
                pair = registry.add_pair(body.prot_path, body.shared_path)
            except (SharedFolderAlreadyPaired, NestedPaths, NotADirectory) as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            engine.run_cycle(pair)
            engine.persist()
            return _pair_json(pair)

    @app.delete("/v1/pairs/{pair_id}", dependencies=[auth])
    def delete_pair(pair_id: str):
        with registry.lock:
            pair = get_pair(pair_id)
            registry.pairs.remove(pair)
            engine.persist()
        return {"id": pair_id, "deleted": True}

    @app.get("/v1/requests/inbound", dependencies=[auth])
    def inbound_requests():
        return [
            {
                "id": p.request_id,
                "pair_id": p.pair_id,
                "subject": p.subject,
                "fingerprint": p.fingerprint,
                "shared_path": p.shared_path,
            }
            for p in engine.pending_inbound.values()
        ]

    @app.post("/v1/requests/inbound/{request_id}/approve", dependencies=[auth])
    def approve(request_id: str):
        with registry.lock:
            return engine.approve_request(request_id, approve=True)

    @app.post("/v1/requests/inbound/{request_id}/deny", dependencies=[auth])
    def deny(request_id: str):
        with registry.lock:
            return engine.approve_request(request_id, approve=False)

    @app.get("/v1/requests/outbound", dependencies=[auth])
    def outbound_requests():
        with registry.lock:
            return [
                {
                    "id": r.request_id,
                    "shared_path": r.shared_path,
                    "placed_at": _iso(r.placed_at),
                }
                for r in registry.pending_requests.values()
            ]

    @app.get("/v1/pairs/{pair_id}/hidden", dependencies=[auth])
    def hidden_entries(pair_id: str):
        with registry.lock:
            pair = get_pair(pair_id)
            return [
                {
                    "path": e.rel_path,
                    "kind": e.kind,
                    "versions": [
                        {
                            "version_id": b.version_id,
                            "captured_at": _iso(b.captured_at),
                            "length": b.length,
                        }
                        for b in e.backups
                    ],
                }
                for e in pair.entries.values()
                if e.hidden
            ]

    @app.post("/v1/pairs/{pair_id}/restore", dependencies=[auth])
    def restore(pair_id: str, body: RestoreBody):
        with registry.lock:
            pair = get_pair(pair_id)
            entry = pair.entry(body.path)
            if entry is None:
                raise HTTPException(status_code=404, detail=f"no entry {body.path}")
            content = registry.restore_entry(pair, entry, body.version)
            version_id = entry.restore_pending
            engine.run_cycle(pair)
            engine.persist()
            return {"path": body.path, "version_id": version_id, "length": len(content)}

    @app.get("/v1/pairs/{pair_id}/policy", dependencies=[auth])
    def get_policy(pair_id: str):
        with registry.lock:
            pair = get_pair(pair_id)
            overrides = {
                e.rel_path: _policy_json(e.policy)
                for e in pair.entries.values()
                if e.policy is not None
            }
            return {
                "default": _policy_json(pair.policy or registry.settings.default_policy),
                "overrides": overrides,
            }

    @app.put("/v1/pairs/{pair_id}/policy", dependencies=[auth])
    def put_policy(pair_id: str, body: PolicyBody):
        with registry.lock:
            pair = get_pair(pair_id)
            try:
                policy = reg.BackupPolicy(
                    mode=body.mode, keep=body.keep if body.keep is not None else 1
                )
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            if body.path is None:
                pair.policy = policy
            else:
                entry = pair.entry(body.path)
                if entry is None:
                    raise HTTPException(status_code=404, detail=f"no entry {body.path}")
                entry.policy = policy
            engine.persist()
            return {"path": body.path, "policy": _policy_json(policy)}

    @app.post("/v1/backup-decisions/{staging_id}", dependencies=[auth])
    def backup_decision(staging_id: str, body: BackupDecisionBody):
        with registry.lock:
            version_id = registry.resolve_backup_decision(staging_id, body.store)
            engine.persist()
            return {"staging_id": staging_id, "stored": body.store, "version_id": version_id}

    @app.get("/v1/events", dependencies=[auth])
    def events(since: int = 0, wait: float = 0.0):
        def stream():
            cursor = since
            pending = engine.events.since(cursor)
            deadline_waited = False
            while True:
                for event in pending:
                    cursor = event.seq
                    yield (
                        f"id: {event.seq}\n"
                        f"event: {event.kind}\n"
                        f"data: {json.dumps(event.to_dict())}\n\n"
                    )
                if wait <= 0 or deadline_waited:
                    break
                pending = engine.events.wait_for(cursor, timeout=wait)
                if not pending:
                    deadline_waited = True

        return StreamingResponse(stream(), media_type="text/event-stream")

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


class PairWorkers:
    """One periodic sync worker per pair; registry mutations serialize on its lock."""

    def __init__(self, engine: SyncEngine, scan_period: float):
        self.engine = engine
        self.scan_period = scan_period
        self._stop = threading.Event()
        self._threads: dict[str, threading.Thread] = {}

    def _loop(self, pair_id: str):
        while not self._stop.is_set():
            pair = self.engine.registry.find_pair(pair_id)
            if pair is None:
                return
            try:
                self.engine.run_cycle(pair)
            except Exception:
                pass  # cycle errors are surfaced via events, never kill the worker
            self._stop.wait(self.scan_period)

    def refresh(self):
        for pair in self.engine.registry.pairs:
            if pair.pair_id not in self._threads:
                t = threading.Thread(target=self._loop, args=(pair.pair_id,), daemon=True)
                self._threads[pair.pair_id] = t
                t.start()

    def stop(self):
        self._stop.set()


def serve(
    registry_root,
    password: str,
    host: str = "127.0.0.1",
    port: int = 8742,
    truststore=None,
    ui_dir=None,
):
    """Run the daemon until interrupted; returns the exit code on failure."""
    import uvicorn

    from .errors import WrongPassword
    from .events import EventLog
    from .identity import TrustStore
    from .registry import load_registry, save_registry

    if not ipaddress.ip_address(host).is_loopback:
        raise ValueError("daemon listens on loopback only")
    root = Path(registry_root)
    try:
        registry = load_registry(root, password)
    except WrongPassword:
        return EXIT_WRONG_PASSWORD
    if truststore is None:
        ts_dir = root / "truststore"
        truststore = TrustStore.from_directory(ts_dir) if ts_dir.is_dir() else TrustStore()
    events = EventLog(root / EVENTS_FILENAME)
    engine = SyncEngine(
        registry,
        truststore=truststore,
        events=events,
        persist=lambda: save_registry(registry, password),
    )
    token = load_or_create_api_token(root)
    app = create_app(engine, token, ui_dir=ui_dir)
    workers = PairWorkers(engine, registry.settings.scan_period)
    workers.refresh()

    @app.middleware("http")
    async def refresh_workers(request, call_next):
        response = await call_next(request)
        workers.refresh()
        return response

    print(
        f"protbox daemon on http://{host}:{port}\n"
        f"  dashboard: http://{host}:{port}/ui/#token={token}\n"
        f"  token file: {root / API_TOKEN_FILENAME}"
    )
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except SystemExit:
        return EXIT_PORT_BUSY
    except OSError:
        return EXIT_PORT_BUSY
    finally:
        workers.stop()
    return 0
