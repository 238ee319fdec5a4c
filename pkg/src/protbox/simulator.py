"""Deterministic multi-replica cloud simulator.

Each replica is a local folder tree. The engine under test only ever
touches its own replica; this stepper reproduces a consumer sync provider:
polls replicas for local writes, resolves concurrent per-file writes
last-writer-wins by logical time (ties by replica index, lower wins), and
delivers the canonical state to the other replicas after a configurable
delay. Fully reproducible under a seed.
"""

from __future__ import annotations

import base64
import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path


class NoSuchFile(Exception):
    pass


@dataclass(frozen=True)
class CloudState:
    content: bytes | None
    is_dir: bool
    deleted: bool
    time: int
    origin: int


@dataclass
class SimConfig:
    delay: int = 1
    drop_rate: float = 0.0
    seed: int = 0


@dataclass
class Delivery:
    due: int
    seq: int
    replica: int
    path: str
    content: bytes | None
    is_dir: bool
    deleted: bool
    version: tuple[int, int]  # (time, origin) of the canonical state carried


@dataclass
class SimCloud:
    replicas: list[Path]
    config: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        self.replicas = [Path(r) for r in self.replicas]
        for r in self.replicas:
            r.mkdir(parents=True, exist_ok=True)
        self.rng = random.Random(self.config.seed)
        self.time = 0
        self._seq = 0
        self.canonical: dict[str, CloudState] = {}
        self.known: list[dict[str, tuple[bytes | None, bool]]] = [
            self._snapshot(r) for r in self.replicas
        ]
        self.pending: list[Delivery] = []
        self.trace: list[str] = []

    # ------------------------------------------------------------------ io

    @staticmethod
    def _snapshot(root: Path) -> dict[str, tuple[bytes | None, bool]]:
        snap: dict[str, tuple[bytes | None, bool]] = {}
        for current, dirnames, filenames in os.walk(root):
            base = Path(current)
            for d in dirnames:
                rel = str((base / d).relative_to(root)).replace(os.sep, "/")
                snap[rel] = (None, True)
            for f in filenames:
                path = base / f
                rel = str(path.relative_to(root)).replace(os.sep, "/")
                snap[rel] = (path.read_bytes(), False)
        return snap

    def _apply_to_replica(self, idx: int, path: str, content: bytes | None, is_dir: bool, deleted: bool):
        target = self.replicas[idx] / path
        if deleted and is_dir:
            self._remove_dir_from_replica(idx, path)
        elif deleted:
            if target.is_file():
                target.unlink()
            self.known[idx].pop(path, None)
        elif is_dir:
            target.mkdir(parents=True, exist_ok=True)
            self.known[idx][path] = (None, True)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(content)
            self.known[idx][path] = (content, False)

    def _remove_dir_from_replica(self, idx: int, path: str):
        target = self.replicas[idx] / path
        if target.is_dir():
            try:
                target.rmdir()
            except OSError:
                return
        self.known[idx].pop(path, None)

    # ---------------------------------------------------------------- steps

    def _schedule(self, replica: int, path: str, content: bytes | None, is_dir: bool, deleted: bool, version: tuple[int, int]):
        if self.rng.random() < self.config.drop_rate:
            self.trace.append(f"t={self.time} drop -> r{replica} {path}")
            return
        self._seq += 1
        self.pending.append(
            Delivery(self.time + self.config.delay, self._seq, replica, path, content, is_dir, deleted, version)
        )

    def _accept(self, origin: int, path: str, content: bytes | None, is_dir: bool, deleted: bool):
        state = CloudState(content, is_dir, deleted, self.time, origin)
        current = self.canonical.get(path)
        wins = (
            current is None
            or state.time > current.time
            or (state.time == current.time and state.origin < current.origin)
        )
        if wins:
            self.canonical[path] = state
            self.trace.append(f"t={self.time} accept r{origin} {path}")
            for j in range(len(self.replicas)):
                if j != origin:
                    self._schedule(j, path, content, is_dir, deleted, (state.time, state.origin))
        else:
            # concurrent write lost: the canonical version is pushed back
            self.trace.append(f"t={self.time} reject r{origin} {path}")
            self._schedule(
                origin, path, current.content, current.is_dir, current.deleted,
                (current.time, current.origin),
            )

    def _poll(self, idx: int):
        current = self._snapshot(self.replicas[idx])
        previous = self.known[idx]
        for path in sorted(set(current) | set(previous)):
            now_state = current.get(path)
            old_state = previous.get(path)
            if now_state == old_state:
                continue
            if now_state is None:
                _old_content, old_is_dir = old_state
                self._accept(idx, path, None, old_is_dir, True)
            else:
                content, is_dir = now_state
                self._accept(idx, path, content, is_dir, False)
        self.known[idx] = current

    def step(self) -> int:
        self.time += 1
        for idx in range(len(self.replicas)):
            self._poll(idx)
        applied = 0
        due = [d for d in self.pending if d.due <= self.time]
        self.pending = [d for d in self.pending if d.due > self.time]
        for d in sorted(due, key=lambda d: (d.due, d.seq)):
            current = self.canonical.get(d.path)
            if current is not None and (current.time, current.origin) != d.version:
                # superseded while in flight; the newer version has its own delivery
                self.trace.append(f"t={self.time} stale -> r{d.replica} {d.path}")
                continue
            self._apply_to_replica(d.replica, d.path, d.content, d.is_dir, d.deleted)
            self.trace.append(f"t={self.time} deliver -> r{d.replica} {d.path}")
            applied += 1
        return applied

    def run_until_quiet(self, max_steps: int = 1000) -> int:
        total = 0
        for _ in range(max_steps):
            applied = self.step()
            total += applied
            if not self.pending and applied == 0:
                return total
        raise RuntimeError("simulator did not quiesce")

    # ------------------------------------------------------------- operations

    def write(self, replica: int, path: str, content: bytes):
        target = self.replicas[replica] / path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content)

    def delete(self, replica: int, path: str):
        target = self.replicas[replica] / path
        if target.is_file():
            target.unlink()
        elif target.is_dir():
            target.rmdir()

    def tamper(self, replica: int, path: str, mutation):
        """Byte-level corruption applied as a cloud-level write."""
        target = self.replicas[replica] / path
        if not target.is_file():
            raise NoSuchFile(path)
        data = target.read_bytes()
        if callable(mutation):
            data = mutation(data)
        else:
            offset, value = mutation
            buf = bytearray(data)
            buf[offset % len(buf)] ^= value or 0x01
            data = bytes(buf)
        target.write_bytes(data)

    # ------------------------------------------------------------ inspection

    def replica_tree(self, idx: int) -> dict[str, bytes | None]:
        return {
            path: content for path, (content, _is_dir) in self._snapshot(self.replicas[idx]).items()
        }

    def converged(self, prot_folders=()) -> bool:
        if self.pending:
            return False
        trees = [self._snapshot(r) for r in self.replicas]
        if any(t != trees[0] for t in trees[1:]):
            return False
        prots = [self._snapshot(Path(p)) for p in prot_folders]
        if prots and any(t != prots[0] for t in prots[1:]):
            return False
        return True


def run_scenario(cloud: SimCloud, engines, scenario) -> list[dict]:
    """Execute a scripted scenario: a JSON-compatible list of timed ops.

    Ops: {"op": "write", "replica": i, "path": p, "text"|"content_b64": data}
         {"op": "delete", "replica": i, "path": p}
         {"op": "tamper", "replica": i, "path": p, "offset": n, "xor": b}
         {"op": "step", "count": k}
         {"op": "cycle", "engine": i}
    """
    if isinstance(scenario, (str, Path)):
        scenario = json.loads(Path(scenario).read_text("utf-8"))
    results = []
    for op in scenario:
        kind = op["op"]
        if kind == "write":
            content = (
                base64.b64decode(op["content_b64"]) if "content_b64" in op else op["text"].encode()
            )
            cloud.write(op["replica"], op["path"], content)
            results.append({"op": kind})
        elif kind == "delete":
            cloud.delete(op["replica"], op["path"])
            results.append({"op": kind})
        elif kind == "tamper":
            cloud.tamper(op["replica"], op["path"], (op.get("offset", 0), op.get("xor", 1)))
            results.append({"op": kind})
        elif kind == "step":
            applied = sum(cloud.step() for _ in range(op.get("count", 1)))
            results.append({"op": kind, "applied": applied})
        elif kind == "cycle":
            engine = engines[op["engine"]]
            reports = engine.run_cycle_all()
            results.append({"op": kind, "reports": {k: vars(r) for k, r in reports.items()}})
        else:
            raise ValueError(f"unknown scenario op {kind!r}")
    return results
