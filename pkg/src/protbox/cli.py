"""Command-line interface covering every daemon capability.

All commands operate directly on the registry (single-writer; do not run
them against a registry a daemon currently owns), except `daemon run`,
which starts the HTTP API. `--json` switches output to machine-parsable
JSON on stdout and errors on stderr.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import registry as reg
from .daemon import EVENTS_FILENAME, load_or_create_api_token, serve
from .errors import ProtboxError
from .events import EventLog
from .identity import SoftwareRoot, TrustStore, software_token_create
from .registry import load_registry, save_registry
from .sync import SyncEngine

DEFAULT_ROOT = Path.home() / ".protbox" / os.environ.get("USER", "user")


def _password(ctx) -> str:
    if ctx.obj["password"] is not None:
        return ctx.obj["password"]
    env_file = os.environ.get("PROTBOX_PASSWORD_FILE")
    if env_file:
        password = Path(env_file).read_text("utf-8").strip()
    else:
        password = click.prompt("Registry password", hide_input=True)
    ctx.obj["password"] = password
    return password


def _engine(ctx) -> SyncEngine:
    root = ctx.obj["root"]
    password = _password(ctx)
    registry = load_registry(root, password)
    ts_dir = root / "truststore"
    truststore = TrustStore.from_directory(ts_dir) if ts_dir.is_dir() else TrustStore()
    events = EventLog(root / EVENTS_FILENAME)
    engine = SyncEngine(
        registry,
        truststore=truststore,
        events=events,
        persist=lambda: save_registry(registry, password),
    )
    ctx.obj["registry"] = registry
    return engine


def _emit(ctx, data, human: str):
    if ctx.obj["json"]:
        click.echo(json.dumps(data, indent=2))
    else:
        click.echo(human)


def _fail(ctx, exc: Exception, code: int = 1):
    if ctx.obj["json"]:
        click.echo(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), err=True)
    else:
        click.echo(f"error: {exc}", err=True)
    sys.exit(code)


@click.group()
@click.option("--root", type=click.Path(path_type=Path), default=DEFAULT_ROOT, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="machine-readable output")
@click.option("--password-file", type=click.Path(path_type=Path), default=None)
@click.pass_context
def main(ctx, root, as_json, password_file):
    ctx.ensure_object(dict)
    ctx.obj["root"] = Path(root)
    ctx.obj["json"] = as_json
    ctx.obj["password"] = (
        Path(password_file).read_text("utf-8").strip() if password_file else None
    )


@main.command()
@click.option("--user", default=None, help="registry owner id")
@click.option("--software-identity", default=None, metavar="NAME",
              help="create a PIN-free software signing token (tests / demo)")
@click.pass_context
def init(ctx, user, software_identity):
    """Create a fresh registry (new key-distribution key pair)."""
    root = ctx.obj["root"]
    password = _password(ctx)
    registry = load_registry(root, password, user_id=user or os.environ.get("USER", "user"))
    if software_identity:
        ca = SoftwareRoot(f"{software_identity} test root")
        registry.identity = software_token_create(software_identity, ca)
        ts_dir = root / "truststore"
        ts_dir.mkdir(parents=True, exist_ok=True)
        from cryptography.hazmat.primitives import serialization

        (ts_dir / "software-root.pem").write_bytes(
            ca.certificate.public_bytes(serialization.Encoding.PEM)
        )
    save_registry(registry, password)
    token = load_or_create_api_token(root)
    _emit(
        ctx,
        {"root": str(root), "user": registry.user_id, "api_token_file": str(root / "api_token")},
        f"registry initialized at {root} (user {registry.user_id}, api token {token[:6]}...)",
    )


@main.group()
def pair():
    """Manage prot/shared folder pairs."""


@pair.command("add")
@click.option("--prot", "prot_path", required=True, type=click.Path(path_type=Path))
@click.option("--shared", "shared_path", required=True, type=click.Path(path_type=Path))
@click.pass_context
def pair_add(ctx, prot_path, shared_path):
    engine = _engine(ctx)
    try:
        with engine.registry.lock:
            p = engine.registry.add_pair(prot_path, shared_path)
            engine.run_cycle(p)
            engine.persist()
    except ProtboxError as exc:
        _fail(ctx, exc)
    data = {"id": p.pair_id, "state": p.state, "request_id": p.request_id}
    human = f"pair {p.pair_id}: {p.state}"
    if p.request_id:
        human += f" (key request _{p.request_id} placed)"
    _emit(ctx, data, human)


@pair.command("list")
@click.pass_context
def pair_list(ctx):
    engine = _engine(ctx)
    rows = [
        {
            "id": p.pair_id,
            "state": p.state,
            "prot_path": p.prot_path,
            "shared_path": p.shared_path,
        }
        for p in engine.registry.pairs
    ]
    _emit(ctx, rows, "\n".join(f"{r['id']}  {r['state']:11}  {r['prot_path']} <-> {r['shared_path']}" for r in rows) or "no pairs")


@main.command()
@click.argument("pair_id", required=False)
@click.pass_context
def sync(ctx, pair_id):
    """Run one synchronization cycle (all pairs, or one)."""
    engine = _engine(ctx)
    if pair_id:
        p = engine.registry.find_pair(pair_id)
        if p is None:
            _fail(ctx, ProtboxError(f"no pair {pair_id}"))
        reports = {pair_id: engine.run_cycle(p)}
    else:
        reports = engine.run_cycle_all()
    data = {k: vars(r) for k, r in reports.items()}
    _emit(ctx, data, "\n".join(f"{k}: {vars(r)}" for k, r in reports.items()))


@main.group()
def requests():
    """Inspect and answer PairKey requests."""


@requests.command("list")
@click.pass_context
def requests_list(ctx):
    engine = _engine(ctx)
    engine.run_cycle_all()  # discover fresh '_'-files
    rows = [
        {
            "id": r.request_id,
            "pair_id": r.pair_id,
            "subject": r.subject,
            "fingerprint": r.fingerprint,
            "shared_path": r.shared_path,
        }
        for r in engine.pending_inbound.values()
    ]
    _emit(ctx, rows, "\n".join(f"{r['id']}  {r['subject']}  ({r['fingerprint'][:16]}...)" for r in rows) or "no inbound requests")


def _decide(ctx, request_id, approve):
    engine = _engine(ctx)
    engine.run_cycle_all()
    try:
        with engine.registry.lock:
            result = engine.approve_request(request_id, approve=approve)
            engine.persist()
    except ProtboxError as exc:
        _fail(ctx, exc)
    _emit(ctx, result, f"request {request_id}: {result['decision']}")


@requests.command("approve")
@click.argument("request_id")
@click.pass_context
def requests_approve(ctx, request_id):
    _decide(ctx, request_id, True)


@requests.command("deny")
@click.argument("request_id")
@click.pass_context
def requests_deny(ctx, request_id):
    _decide(ctx, request_id, False)


@main.group()
def hidden():
    """Deleted-but-recoverable entries."""


@hidden.command("list")
@click.argument("pair_id")
@click.pass_context
def hidden_list(ctx, pair_id):
    engine = _engine(ctx)
    p = engine.registry.find_pair(pair_id)
    if p is None:
        _fail(ctx, ProtboxError(f"no pair {pair_id}"))
    rows = [
        {
            "path": e.rel_path,
            "kind": e.kind,
            "versions": [
                {"version_id": b.version_id, "length": b.length} for b in e.backups
            ],
        }
        for e in p.entries.values()
        if e.hidden
    ]
    _emit(ctx, rows, "\n".join(f"{r['path']} ({len(r['versions'])} versions)" for r in rows) or "nothing hidden")


@main.command()
@click.argument("pair_id")
@click.argument("path")
@click.option("--version", type=int, default=None)
@click.pass_context
def restore(ctx, pair_id, path, version):
    """Re-materialize a hidden or backed-up file into the prot folder."""
    engine = _engine(ctx)
    p = engine.registry.find_pair(pair_id)
    if p is None:
        _fail(ctx, ProtboxError(f"no pair {pair_id}"))
    entry = p.entry(path)
    if entry is None:
        _fail(ctx, ProtboxError(f"no entry {path}"))
    try:
        with engine.registry.lock:
            content = engine.registry.restore_entry(p, entry, version)
            engine.run_cycle(p)
            engine.persist()
    except ProtboxError as exc:
        _fail(ctx, exc)
    _emit(ctx, {"path": path, "length": len(content)}, f"restored {path} ({len(content)} bytes)")


@main.group()
def policy():
    """Backup policies (never | keep:N | ask)."""


def _parse_policy(text: str) -> reg.BackupPolicy:
    if text == "never":
        return reg.BackupPolicy(mode=reg.POLICY_NEVER)
    if text == "ask":
        return reg.BackupPolicy(mode=reg.POLICY_ASK)
    if text.startswith("keep:"):
        return reg.BackupPolicy(mode=reg.POLICY_KEEP, keep=int(text.split(":", 1)[1]))
    raise ValueError(f"unknown policy {text!r} (want never | keep:N | ask)")


@policy.command("set")
@click.argument("pair_id")
@click.argument("args", nargs=-1)
@click.pass_context
def policy_set(ctx, pair_id, args):
    """policy set <pair> [<path>] <never|keep:N|ask>"""
    if not args:
        _fail(ctx, ValueError("missing policy"))
    *path_part, policy_text = args
    engine = _engine(ctx)
    p = engine.registry.find_pair(pair_id)
    if p is None:
        _fail(ctx, ProtboxError(f"no pair {pair_id}"))
    try:
        new_policy = _parse_policy(policy_text)
        with engine.registry.lock:
            if path_part:
                entry = p.entry(path_part[0])
                if entry is None:
                    raise ProtboxError(f"no entry {path_part[0]}")
                entry.policy = new_policy
            else:
                p.policy = new_policy
            engine.persist()
    except (ProtboxError, ValueError) as exc:
        _fail(ctx, exc)
    target = path_part[0] if path_part else "(pair default)"
    _emit(ctx, {"pair_id": pair_id, "path": path_part[0] if path_part else None, "policy": policy_text},
          f"policy for {target}: {policy_text}")


@main.group()
def events():
    """Engine event stream."""


@events.command("tail")
@click.option("--since", type=int, default=0)
@click.pass_context
def events_tail(ctx, since):
    log = EventLog(ctx.obj["root"] / EVENTS_FILENAME)
    rows = [e.to_dict() for e in log.since(since)]
    _emit(ctx, rows, "\n".join(f"{e['seq']:5} {e['kind']:22} {json.dumps(e['payload'])}" for e in rows) or "no events")


@main.group()
def daemon():
    """Daemon process control."""


@daemon.command("run")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8742, show_default=True)
@click.option("--ui-dir", type=click.Path(path_type=Path), default=None)
@click.pass_context
def daemon_run(ctx, host, port, ui_dir):
    code = serve(ctx.obj["root"], _password(ctx), host=host, port=port, ui_dir=ui_dir)
    sys.exit(code)


if __name__ == "__main__":
    main()
