"""Drives the compiled web dashboard against a live daemon over real HTTP.

The node driver imports the built dist/ modules (the exact code the browser
runs), renders the panels, approves a key request, and restores a hidden
file; this side verifies the effects in the folders."""

import re
import shutil
import subprocess
import threading
import time
import urllib.request
from pathlib import Path

import pytest

from protbox import daemon
from protbox import registry as reg
from protbox.sync import SyncEngine

FRONTEND = Path(__file__).resolve().parent.parent / "frontend"
DIST = FRONTEND / "dist"
TOKEN = "b" * 32

pytestmark = pytest.mark.skipif(
    not (DIST / "api.js").is_file() or shutil.which("node") is None,
    reason="frontend not built (run `npm run build` in frontend/) or node missing",
)


class DaemonUnderTest:
    def __init__(self, app):
        import uvicorn

        config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("daemon did not start")
            time.sleep(0.02)
        port = self.server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture
def world(tmp_path, truststore, alice_token, bob_token):
    prot = tmp_path / "owner" / "prot"
    shared = tmp_path / "cloud"
    prot.mkdir(parents=True)
    shared.mkdir()
    registry = reg.Registry(tmp_path / "owner" / "root", "owner")
    registry.identity = alice_token
    engine = SyncEngine(registry, truststore=truststore)
    pair = registry.add_pair(prot, shared)

    (prot / "doc.txt").write_bytes(b"to be shared")
    (prot / "gone.txt").write_bytes(b"remote delete target")
    engine.run_cycle(pair)

    # a remote participant deletes one blob: the entry hides with a backup
    gone_enc = pair.entry("gone.txt").encrypted_rel
    (shared / gone_enc).unlink()
    engine.run_cycle(pair)
    assert pair.entry("gone.txt").hidden

    # a second participant pairs the folder and asks for the key
    guest_prot = tmp_path / "guest" / "prot"
    guest_prot.mkdir(parents=True)
    guest_registry = reg.Registry(tmp_path / "guest" / "root", "guest")
    guest_registry.identity = bob_token
    guest_pair = guest_registry.add_pair(guest_prot, shared)
    guest_engine = SyncEngine(guest_registry, truststore=truststore)
    guest_engine.run_cycle(guest_pair)
    engine.run_cycle(pair)
    assert len(engine.pending_inbound) == 1

    app = daemon.create_app(engine, TOKEN, ui_dir=DIST)
    return app, engine, pair, prot, shared, guest_engine, guest_pair, guest_prot


def test_dashboard_drives_daemon(world):
    app, engine, pair, prot, shared, guest_engine, guest_pair, guest_prot = world
    with DaemonUnderTest(app) as base:
        result = subprocess.run(
            ["node", str(FRONTEND / "integration" / "drive.mjs"), base, TOKEN],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert result.returncode == 0, result.stdout + result.stderr
        assert "DRIVER OK" in result.stdout

        # the approval the UI issued left a response file in the cloud folder
        responses = [
            p.name
            for p in shared.iterdir()
            if re.fullmatch(r"_[0-9a-f]{32}\.[0-9a-f]{32}", p.name)
        ]
        assert len(responses) == 1

        # the guest picks it up and then receives the shared file
        report = guest_engine.run_cycle(guest_pair)
        assert report.key_installed
        guest_engine.run_cycle(guest_pair)
        assert (guest_prot / "doc.txt").read_bytes() == b"to be shared"

        # the restore the UI issued re-materialized the deleted file
        assert (prot / "gone.txt").read_bytes() == b"remote delete target"
        assert not pair.entry("gone.txt").hidden


def test_static_ui_served(world):
    app, *_ = world
    with DaemonUnderTest(app) as base:
        with urllib.request.urlopen(f"{base}/ui/") as response:
            page = response.read().decode("utf-8")
        assert response.status == 200
        assert '<div id="inbox">' in page
        assert 'src="main.js"' in page
        with urllib.request.urlopen(f"{base}/ui/main.js") as response:
            assert "tokenFromHash" in response.read().decode("utf-8")
