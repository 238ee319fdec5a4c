"""Periodic coherence checking and bidirectional synchronization of pairs.

Change detection compares (mtime, length) against the registry record.
Shared-folder files that fail name decryption or MAC verification are
quarantined: listed, never propagated, never deleted.

Concurrent-edit safety uses per-author journal files ("_journal_<id>") in
the shared folder. A journal records, per encrypted path, the ordered
hashes of protected blobs the author wrote or accepted. Before an incoming
shared-side update overwrites differing local content, the engine checks
that its last accepted blob is an ancestor of the incoming one in some
journal; otherwise the local file is forked under a conflict name, so no
interleaving of edits loses content.
"""

from __future__ import annotations

import hashlib
import os
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import codec, crypto, keydist, registry as reg, tlv
from . import events as ev
from .errors import (
    BadPadding,
    BadSignature,
    CaseCollision,
    FolderReadOnly,
    FolderUnreadable,
    IntegrityFailure,
    MalformedEncoding,
    MalformedPackage,
    RenameCollision,
    UnknownRequest,
)

JOURNAL_CAP = 64
DEFER_LIMIT = 3

TJ_ENTRY = 0x01
TJ_PATH = 0x02
TJ_HASH = 0x03

ENCRYPT_COPY = "EncryptCopy"
DECRYPT_COPY = "DecryptCopy"
DELETE_SHARED = "DeleteShared"
DELETE_PROT_WITH_BACKUP = "DeleteProtWithBackup"
CONFLICT_SPLIT = "ConflictSplit"
QUARANTINE = "Quarantine"
RESTORE = "Restore"


@dataclass
class Delta:
    rel_path: str
    kind: str  # reg.KIND_FILE / reg.KIND_DIRECTORY
    enc_rel: str | None = None  # actual encrypted path observed in the shared folder


@dataclass
class ChangeSet:
    prot_only: list[Delta] = field(default_factory=list)
    shared_only: list[Delta] = field(default_factory=list)
    both: list[Delta] = field(default_factory=list)
    deletions_prot: list[Delta] = field(default_factory=list)  # removed from the prot folder
    deletions_shared: list[Delta] = field(default_factory=list)  # removed from the shared folder
    foreign: list[str] = field(default_factory=list)  # shared-relative paths


@dataclass
class SyncAction:
    kind: str
    delta: Delta


@dataclass
class SyncReport:
    copied: int = 0
    deleted: int = 0
    conflicts: int = 0
    quarantined: int = 0
    restored: int = 0
    deferred: int = 0
    key_installed: bool = False
    requests_placed: int = 0
    errors: list[str] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (
            self.copied
            or self.deleted
            or self.conflicts
            or self.quarantined
            or self.restored
            or self.deferred
            or self.key_installed
            or self.requests_placed
            or self.errors
        )


@dataclass
class InboundRequest:
    request_id: str
    pair_id: str
    shared_path: str
    file_name: str
    request_bytes: bytes
    subject: str
    fingerprint: str


def _blob_hash(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()


def _stat(path: Path) -> tuple[int, int]:
    st = path.stat()
    return st.st_mtime_ns, st.st_size


def conflict_name(rel_path: str, user: str, taken) -> str:
    """`<stem> (conflict of <user>)<ext>`, suffixed " (2)", " (3)", ... if taken."""
    parent, _, name = rel_path.rpartition("/")
    stem, dot, ext = name.rpartition(".")
    if not stem:
        stem, dot, ext = name, "", ""
    base = f"{stem} (conflict of {user})"
    candidate = f"{base}{dot}{ext}"
    n = 2
    while taken(f"{parent}/{candidate}" if parent else candidate):
        candidate = f"{base} ({n}){dot}{ext}"
        n += 1
        if n > 10_000:
            raise RenameCollision(rel_path)
    return f"{parent}/{candidate}" if parent else candidate


class Journal:
    """Per-author ordered blob-hash history, keyed by encrypted path."""

    def __init__(self, table: dict[str, list[bytes]] | None = None):
        self.table = table or {}
        self.dirty = False

    def append(self, enc_rel: str, blob_hash: bytes):
        hashes = self.table.setdefault(enc_rel, [])
        if hashes and hashes[-1] == blob_hash:
            return
        if blob_hash in hashes:
            hashes.remove(blob_hash)
        hashes.append(blob_hash)
        del hashes[:-JOURNAL_CAP]
        self.dirty = True

    def to_bytes(self) -> bytes:
        out = []
        for enc_rel in sorted(self.table):
            body = tlv.encode_str(TJ_PATH, enc_rel) + b"".join(
                tlv.encode(TJ_HASH, h) for h in self.table[enc_rel]
            )
            out.append(tlv.encode(TJ_ENTRY, body))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Journal":
        table: dict[str, list[bytes]] = {}
        for tag, value in tlv.iter_tlv(data):
            if tag != TJ_ENTRY:
                continue
            m = tlv.parse_map(value)
            path = m[TJ_PATH][0].decode("utf-8")
            table[path] = list(m.get(TJ_HASH, []))
        return cls(table)


def load_journals(shared_path: Path) -> dict[str, Journal]:
    journals = {}
    try:
        names = [p for p in shared_path.iterdir() if p.name.startswith(keydist.JOURNAL_PREFIX)]
    except OSError:
        return journals
    for path in names:
        author = path.name[len(keydist.JOURNAL_PREFIX) :]
        try:
            journals[author] = Journal.from_bytes(path.read_bytes())
        except (tlv.TlvError, KeyError, IndexError, UnicodeDecodeError):
            continue  # corrupted journal: ignore, causality falls back to conflict
    return journals


def causally_follows(journals: dict[str, Journal], enc_rel: str, prev: bytes, new: bytes):
    """True: new supersedes prev. False: concurrent. None: unknown (defer)."""
    found = False
    for journal in journals.values():
        hashes = journal.table.get(enc_rel, [])
        if new in hashes:
            found = True
            if prev in hashes[: hashes.index(new)]:
                return True
    return False if found else None


class SyncEngine:
    """One engine per registry; a pair's cycle is internally sequential."""

    def __init__(
        self,
        registry: reg.Registry,
        truststore=None,
        events: ev.EventLog | None = None,
        clock=time.time,
        persist=None,
        rng=os.urandom,
    ):
        self.registry = registry
        self.truststore = truststore
        self.events = events or ev.EventLog()
        self.clock = clock
        self.persist = persist or (lambda: None)
        self.rng = rng
        self.pending_inbound: dict[str, InboundRequest] = {}
        self._consumed_inbound: set[str] = set()
        self._orphan_seen: dict[str, dict[str, float]] = {}
        self._quarantine_memo: dict[tuple[str, str], tuple[int, int]] = {}
        self._defer_counts: dict[tuple[str, str, bytes], int] = {}

    # ------------------------------------------------------------------ scan

    def scan_pair(self, pair: reg.Pair, journals=None) -> ChangeSet:
        key = pair.key
        prot_root = Path(pair.prot_path)
        shared_root = Path(pair.shared_path)
        cs = ChangeSet()

        prot_files: dict[str, tuple[int, int]] = {}
        prot_dirs: set[str] = set()
        shared_files: dict[str, tuple[int, int, str]] = {}
        shared_dirs: dict[str, str] = {}

        try:
            self._walk_prot(prot_root, prot_files, prot_dirs)
            self._walk_shared(shared_root, key, shared_files, shared_dirs, cs.foreign)
        except OSError as exc:
            raise FolderUnreadable(str(exc)) from exc

        # files
        all_paths = set(prot_files) | set(shared_files)
        for entry in pair.entries.values():
            if entry.kind == reg.KIND_FILE and not entry.hidden:
                all_paths.add(entry.rel_path)
        for rel in sorted(all_paths):
            entry = pair.entries.get(rel)
            if entry is not None and entry.kind == reg.KIND_DIRECTORY:
                entry = None  # a file now occupies a former directory path
            p = prot_files.get(rel)
            s = shared_files.get(rel)
            hidden = entry.hidden if entry else False
            if hidden and p is None and s is None:
                continue
            enc_rel = s[2] if s else None
            delta = Delta(rel, reg.KIND_FILE, enc_rel)

            prot_changed = p is not None and (
                entry is None or hidden or (entry.prot_mtime, entry.prot_length) != p
            )
            shared_changed = s is not None and (
                entry is None or hidden or (entry.shared_mtime, entry.shared_length) != s[:2]
            )
            if shared_changed and not self._shared_blob_ok(pair, shared_root, s[2], s[:2], cs):
                shared_changed = False
                s = None  # tampered: never a propagation source
                if p is not None and not prot_changed:
                    continue  # leave the prot file alone
            if p is not None and s is not None:
                if prot_changed and shared_changed:
                    cs.both.append(delta)
                elif prot_changed:
                    cs.prot_only.append(delta)
                elif shared_changed:
                    cs.shared_only.append(delta)
            elif p is not None:
                if entry is not None and not hidden and entry.shared_mtime is not None and not prot_changed:
                    cs.deletions_shared.append(delta)
                else:
                    cs.prot_only.append(delta)
            elif s is not None:
                if entry is not None and not hidden and entry.prot_mtime is not None and not shared_changed:
                    cs.deletions_prot.append(delta)
                else:
                    cs.shared_only.append(delta)
            elif entry is not None and not hidden:
                cs.deletions_prot.append(delta)  # gone on both sides: hide only

        # directories
        dir_paths = set(prot_dirs) | set(shared_dirs)
        for entry in pair.entries.values():
            if entry.kind == reg.KIND_DIRECTORY and not entry.hidden:
                dir_paths.add(entry.rel_path)
        for rel in sorted(dir_paths):
            entry = pair.entries.get(rel)
            if entry is not None and entry.kind != reg.KIND_DIRECTORY:
                continue
            p = rel in prot_dirs
            s = rel in shared_dirs
            delta = Delta(rel, reg.KIND_DIRECTORY, shared_dirs.get(rel))
            if p and s:
                continue
            if p and not s:
                if entry is not None and not entry.hidden and entry.shared_mtime is not None:
                    cs.deletions_shared.append(delta)
                else:
                    cs.prot_only.append(delta)
            elif s and not p:
                if entry is not None and not entry.hidden and entry.prot_mtime is not None:
                    cs.deletions_prot.append(delta)
                else:
                    cs.shared_only.append(delta)
            elif entry is not None and not entry.hidden:
                cs.deletions_prot.append(delta)
        return cs

    def _walk_prot(self, root: Path, files: dict, dirs: set):
        for current, dirnames, filenames in os.walk(root):
            base = Path(current)
            dirnames[:] = [d for d in dirnames if not d.startswith("_") and not (base / d).is_symlink()]
            for d in dirnames:
                dirs.add(str((base / d).relative_to(root)).replace(os.sep, "/"))
            for f in filenames:
                if f.startswith("_"):
                    continue
                path = base / f
                if path.is_symlink():
                    continue
                rel = str(path.relative_to(root)).replace(os.sep, "/")
                files[rel] = _stat(path)

    def _walk_shared(self, root: Path, key, files: dict, dirs: dict, foreign: list):
        for current, dirnames, filenames in os.walk(root):
            base = Path(current)
            enc_base = str(base.relative_to(root)).replace(os.sep, "/") if base != root else ""
            keep = []
            for d in dirnames:
                if (base / d).is_symlink():
                    continue
                enc_rel = f"{enc_base}/{d}" if enc_base else d
                try:
                    rel = codec.decrypt_path(key, enc_rel)
                except (MalformedEncoding, BadPadding):
                    foreign.append(enc_rel)
                    continue
                dirs[rel] = enc_rel
                keep.append(d)
            dirnames[:] = keep
            for f in filenames:
                if not enc_base and f.startswith("_"):
                    continue  # protocol files, never synchronized
                path = base / f
                if path.is_symlink():
                    continue
                enc_rel = f"{enc_base}/{f}" if enc_base else f
                try:
                    rel = codec.decrypt_path(key, enc_rel)
                except (MalformedEncoding, BadPadding):
                    foreign.append(enc_rel)
                    continue
                files[rel] = (*_stat(path), enc_rel)

    def _shared_blob_ok(self, pair, shared_root: Path, enc_rel: str, stat, cs: ChangeSet) -> bool:
        """MAC-verify a changed shared file; on failure route it to foreign."""
        try:
            blob = (shared_root / enc_rel).read_bytes()
            crypto.unprotect_content(pair.key, blob)
            return True
        except IntegrityFailure:
            cs.foreign.append(enc_rel)
            return False
        except OSError:
            return False

    # ------------------------------------------------------------------ plan

    def plan_actions(self, changeset: ChangeSet) -> list[SyncAction]:
        def depth(delta):
            return delta.rel_path.count("/")

        actions: list[SyncAction] = []
        for d in sorted((d for d in changeset.prot_only if d.kind == reg.KIND_DIRECTORY), key=depth):
            actions.append(SyncAction(ENCRYPT_COPY, d))
        for d in sorted((d for d in changeset.shared_only if d.kind == reg.KIND_DIRECTORY), key=depth):
            actions.append(SyncAction(DECRYPT_COPY, d))
        for d in changeset.prot_only:
            if d.kind == reg.KIND_FILE:
                actions.append(SyncAction(ENCRYPT_COPY, d))
        for d in changeset.shared_only:
            if d.kind == reg.KIND_FILE:
                actions.append(SyncAction(DECRYPT_COPY, d))
        for d in changeset.both:
            actions.append(SyncAction(CONFLICT_SPLIT, d))
        for d in changeset.deletions_prot:
            if d.kind == reg.KIND_FILE:
                actions.append(SyncAction(DELETE_SHARED, d))
        for d in changeset.deletions_shared:
            if d.kind == reg.KIND_FILE:
                actions.append(SyncAction(DELETE_PROT_WITH_BACKUP, d))
        # directory removals last, deepest first, only once empty
        for d in sorted((d for d in changeset.deletions_prot if d.kind == reg.KIND_DIRECTORY), key=depth, reverse=True):
            actions.append(SyncAction(DELETE_SHARED, d))
        for d in sorted((d for d in changeset.deletions_shared if d.kind == reg.KIND_DIRECTORY), key=depth, reverse=True):
            actions.append(SyncAction(DELETE_PROT_WITH_BACKUP, d))
        for enc_rel in changeset.foreign:
            actions.append(SyncAction(QUARANTINE, Delta(enc_rel, reg.KIND_FILE, enc_rel)))
        return actions

    # ----------------------------------------------------------------- apply

    def apply_actions(self, pair: reg.Pair, actions: list[SyncAction], journals=None) -> SyncReport:
        report = SyncReport()
        journals = journals if journals is not None else load_journals(Path(pair.shared_path))
        own = journals.setdefault(self.registry.author_id, Journal())
        for action in actions:
            try:
                self._apply_one(pair, action, journals, own, report)
            except (OSError, CaseCollision, RenameCollision) as exc:
                report.errors.append(f"{action.kind} {action.delta.rel_path}: {exc}")
        if own.dirty:
            self._write_journal(pair, own)
            own.dirty = False
        return report

    def _write_journal(self, pair, journal: Journal):
        path = Path(pair.shared_path) / f"{keydist.JOURNAL_PREFIX}{self.registry.author_id}"
        tmp = path.parent / f"_tmp{secrets.token_hex(6)}"
        try:
            tmp.write_bytes(journal.to_bytes())
            os.replace(tmp, path)
        except OSError:
            # best effort: without the journal peers defer and then fork,
            # which is slower but still loses nothing
            tmp.unlink(missing_ok=True)

    def _apply_one(self, pair, action, journals, own, report):
        handler = {
            ENCRYPT_COPY: self._do_encrypt_copy,
            DECRYPT_COPY: self._do_decrypt_copy,
            CONFLICT_SPLIT: self._do_conflict_split,
            DELETE_SHARED: self._do_delete_shared,
            DELETE_PROT_WITH_BACKUP: self._do_delete_prot,
            QUARANTINE: self._do_quarantine,
        }[action.kind]
        handler(pair, action.delta, journals, own, report)

    def _ensure_entry(self, pair, rel, kind) -> reg.RegistryEntry:
        entry = pair.entries.get(rel)
        if entry is None or entry.kind != kind:
            entry = reg.RegistryEntry(
                rel_path=rel,
                encrypted_rel=codec.encrypt_path(pair.key, rel),
                kind=kind,
            )
            pair.entries[rel] = entry
        return entry

    @staticmethod
    def _check_case_collision(directory: Path, name: str):
        if not directory.is_dir():
            return
        folded = name.casefold()
        for sibling in directory.iterdir():
            if sibling.name != name and sibling.name.casefold() == folded:
                raise CaseCollision(f"{sibling.name} vs {name} in {directory}")

    def _atomic_write(self, path: Path, data: bytes, temp_prefix: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._check_case_collision(path.parent, path.name)
        tmp = path.parent / f"{temp_prefix}{secrets.token_hex(6)}"
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def _do_encrypt_copy(self, pair, delta, journals, own, report):
        prot_root = Path(pair.prot_path)
        shared_root = Path(pair.shared_path)
        entry = self._ensure_entry(pair, delta.rel_path, delta.kind)
        entry.hidden = False
        entry.restore_pending = None
        if delta.kind == reg.KIND_DIRECTORY:
            (shared_root / entry.encrypted_rel).mkdir(parents=True, exist_ok=True)
            entry.prot_mtime = entry.shared_mtime = int(self.clock())
            entry.prot_length = entry.shared_length = 0
            return
        src = prot_root / delta.rel_path
        plaintext = src.read_bytes()
        blob = crypto.protect_content(pair.key, plaintext, rng=self.rng)
        target = shared_root / entry.encrypted_rel
        try:
            self._atomic_write(target, blob, "_tmp")
        except (PermissionError, OSError) as exc:
            raise OSError(f"shared folder rejects writes: {exc}") from exc
        entry.prot_mtime, entry.prot_length = _stat(src)
        entry.shared_mtime, entry.shared_length = _stat(target)
        entry.last_shared_hash = _blob_hash(blob)
        own.append(entry.encrypted_rel, entry.last_shared_hash)
        report.copied += 1

    def _do_decrypt_copy(self, pair, delta, journals, own, report):
        prot_root = Path(pair.prot_path)
        shared_root = Path(pair.shared_path)
        if delta.kind == reg.KIND_DIRECTORY:
            entry = self._ensure_entry(pair, delta.rel_path, delta.kind)
            entry.hidden = False
            (prot_root / delta.rel_path).mkdir(parents=True, exist_ok=True)
            entry.prot_mtime = entry.shared_mtime = int(self.clock())
            entry.prot_length = entry.shared_length = 0
            return
        enc_rel = delta.enc_rel
        source = shared_root / enc_rel
        blob = source.read_bytes()
        try:
            plaintext = crypto.unprotect_content(pair.key, blob)
        except IntegrityFailure:
            self._do_quarantine(pair, Delta(enc_rel, reg.KIND_FILE, enc_rel), journals, own, report)
            return
        new_hash = _blob_hash(blob)
        entry = self._ensure_entry(pair, delta.rel_path, delta.kind)
        target = prot_root / delta.rel_path
        current = target.read_bytes() if target.is_file() else None

        if current is not None and current != plaintext and entry.last_shared_hash is not None:
            verdict = causally_follows(journals, enc_rel, entry.last_shared_hash, new_hash)
            if verdict is None:
                key = (pair.pair_id, delta.rel_path, new_hash)
                self._defer_counts[key] = self._defer_counts.get(key, 0) + 1
                if self._defer_counts[key] <= DEFER_LIMIT:
                    report.deferred += 1
                    return  # journal may still be in flight; retry next cycle
                verdict = False
                del self._defer_counts[key]
            if verdict is False:
                # concurrent histories: fork local content, accept remote next pass
                self._do_conflict_split(pair, delta, journals, own, report)
                return

        if current is not None and current != plaintext:
            outcome, ref = self.registry.apply_backup_policy(pair, entry, current, self.clock())
            if outcome == "needs_decision":
                self.events.emit(
                    ev.NEEDS_BACKUP_DECISION,
                    {"pair_id": pair.pair_id, "path": delta.rel_path, "staging_id": ref},
                )
        self._atomic_write(target, plaintext, "_tmp")
        entry.hidden = False
        entry.restore_pending = None
        entry.prot_mtime, entry.prot_length = _stat(target)
        entry.shared_mtime, entry.shared_length = _stat(source)
        entry.last_shared_hash = new_hash
        own.append(enc_rel, new_hash)
        report.copied += 1

    def _do_conflict_split(self, pair, delta, journals, own, report):
        prot_root = Path(pair.prot_path)
        src = prot_root / delta.rel_path

        def taken(rel):
            return (prot_root / rel).exists()

        new_rel = conflict_name(delta.rel_path, self.registry.user_id, taken)
        if src.exists():
            target = prot_root / new_rel
            self._check_case_collision(target.parent, target.name)
            os.replace(src, target)
        entry = pair.entries.get(delta.rel_path)
        if entry is not None:
            # both sides are re-synchronized as independent insertions next pass
            entry.prot_mtime = entry.prot_length = None
            entry.shared_mtime = entry.shared_length = None
            entry.last_shared_hash = None
            entry.restore_pending = None
        report.conflicts += 1
        self.events.emit(
            ev.CONFLICT,
            {"pair_id": pair.pair_id, "path": delta.rel_path, "renamed_to": new_rel},
        )

    def _do_delete_shared(self, pair, delta, journals, own, report):
        """A prot-side deletion: mirror it into the shared folder, hide the entry."""
        shared_root = Path(pair.shared_path)
        entry = pair.entries.get(delta.rel_path)
        if entry is None:
            return
        target = shared_root / entry.encrypted_rel
        if delta.kind == reg.KIND_DIRECTORY:
            if target.is_dir():
                try:
                    target.rmdir()
                except OSError:
                    return  # not empty yet; retried after members are processed
        elif target.is_file():
            target.unlink()
        if not entry.hidden:
            self.registry.hide_entry(pair, entry, None, self.clock())
        report.deleted += 1

    def _do_delete_prot(self, pair, delta, journals, own, report):
        """A shared-side deletion: back up the cleartext replica, then remove it."""
        prot_root = Path(pair.prot_path)
        entry = pair.entries.get(delta.rel_path)
        if entry is None:
            return
        target = prot_root / delta.rel_path
        backup = None
        if delta.kind == reg.KIND_FILE and target.is_file():
            backup = target.read_bytes()
        if not entry.hidden:
            outcome, ref = self.registry.hide_entry(pair, entry, backup, self.clock())
            if outcome == "needs_decision":
                self.events.emit(
                    ev.NEEDS_BACKUP_DECISION,
                    {"pair_id": pair.pair_id, "path": delta.rel_path, "staging_id": ref},
                )
            elif outcome == "stored":
                self.events.emit(
                    ev.DELETION_BACKED_UP,
                    {"pair_id": pair.pair_id, "path": delta.rel_path, "version_id": ref},
                )
        if delta.kind == reg.KIND_DIRECTORY:
            if target.is_dir():
                try:
                    target.rmdir()
                except OSError:
                    return
        elif target.is_file():
            target.unlink()
        report.deleted += 1

    def _do_quarantine(self, pair, delta, journals, own, report):
        shared_root = Path(pair.shared_path)
        enc_rel = delta.enc_rel or delta.rel_path
        path = shared_root / enc_rel
        try:
            stat = _stat(path)
        except OSError:
            stat = (0, 0)
        memo_key = (pair.pair_id, enc_rel)
        if self._quarantine_memo.get(memo_key) == stat:
            return
        self._quarantine_memo[memo_key] = stat
        report.quarantined += 1
        self.events.emit(ev.QUARANTINE, {"pair_id": pair.pair_id, "shared_path": enc_rel})

    # ----------------------------------------------------------------- cycle

    def run_cycle(self, pair: reg.Pair) -> SyncReport:
        with self.registry.lock:
            if pair.state == reg.STATE_AWAITING_KEY:
                report = SyncReport()
                self._keydist_cycle(pair, report)
                self.persist()
                return report
            report = self._materialize_restores(pair)
            journals = load_journals(Path(pair.shared_path))
            try:
                changeset = self.scan_pair(pair, journals)
            except FolderUnreadable as exc:
                self.events.emit(ev.PAIR_SUSPENDED, {"pair_id": pair.pair_id, "reason": str(exc)})
                report.errors.append(str(exc))
                return report
            actions = self.plan_actions(changeset)
            applied = self.apply_actions(pair, actions, journals)
            for attr in ("copied", "deleted", "conflicts", "quarantined", "deferred"):
                setattr(report, attr, getattr(report, attr) + getattr(applied, attr))
            report.errors.extend(applied.errors)
            self._keydist_cycle(pair, report)
            self.persist()
            return report

    def run_cycle_all(self) -> dict[str, SyncReport]:
        reports = {}
        # lexicographic pair order: advisory serialization for shared prot folders
        for pair in sorted(self.registry.pairs, key=lambda p: p.pair_id):
            reports[pair.pair_id] = self.run_cycle(pair)
        return reports

    def _materialize_restores(self, pair) -> SyncReport:
        report = SyncReport()
        prot_root = Path(pair.prot_path)
        for entry in pair.entries.values():
            if entry.restore_pending is None or entry.hidden:
                continue
            version = next(
                (b for b in entry.backups if b.version_id == entry.restore_pending), None
            )
            entry.restore_pending = None
            if version is None or entry.kind != reg.KIND_FILE:
                continue
            content = (self.registry.root / version.content_ref).read_bytes()
            self._atomic_write(prot_root / entry.rel_path, content, ".tmp")
            entry.prot_mtime = entry.prot_length = None  # force re-propagation
            report.restored += 1
        return report

    # --------------------------------------------------------------- keydist

    def _keydist_cycle(self, pair, report: SyncReport):
        now = self.clock()
        seen = self._orphan_seen.setdefault(pair.pair_id, {})
        scan = keydist.scan_folder(pair.shared_path, self.registry, seen, now)

        if pair.state == reg.STATE_AWAITING_KEY:
            if pair.request_id is None:
                self._place_pair_request(pair, report)
            else:
                self._check_responses(pair, scan, report)
                if (
                    pair.state == reg.STATE_AWAITING_KEY
                    and pair.request_placed_at is not None
                    and now - pair.request_placed_at
                    > self.registry.settings.response_timeout_seconds
                ):
                    self._retire_request(pair)
                    self._place_pair_request(pair, report)
            return

        for request_id, name, data in scan.inbound_requests:
            if request_id in self.pending_inbound or request_id in self._consumed_inbound:
                continue
            try:
                identity = keydist.verify_request(data, self.truststore)
            except Exception:
                continue  # unverifiable requests are simply not surfaced
            self.pending_inbound[request_id] = InboundRequest(
                request_id=request_id,
                pair_id=pair.pair_id,
                shared_path=pair.shared_path,
                file_name=name,
                request_bytes=data,
                subject=identity.subject,
                fingerprint=identity.fingerprint,
            )
            self.events.emit(
                ev.KEY_REQUEST_INBOUND,
                {
                    "request_id": request_id,
                    "pair_id": pair.pair_id,
                    "subject": identity.subject,
                    "fingerprint": identity.fingerprint,
                },
            )
        keydist.cleanup_orphans(
            pair.shared_path,
            now,
            self.registry.settings.orphan_timeout_hours * 3600,
            seen,
        )

    def _place_pair_request(self, pair, report: SyncReport):
        if self.registry.identity is None:
            return
        request_bytes = keydist.build_request(self.registry.identity, self.registry.kdkp.public_key())
        try:
            request_id = keydist.place_request(pair.shared_path, request_bytes)
        except FolderReadOnly as exc:
            self.events.emit(
                ev.PAIR_SUSPENDED, {"pair_id": pair.pair_id, "reason": f"read-only: {exc}"}
            )
            report.errors.append(str(exc))
            return
        now = int(self.clock())
        pair.request_id = request_id
        pair.request_placed_at = now
        self.registry.pending_requests[request_id] = reg.PendingRequest(
            request_id=request_id, shared_path=pair.shared_path, placed_at=now
        )
        report.requests_placed += 1

    def _retire_request(self, pair):
        shared = Path(pair.shared_path)
        old = pair.request_id
        if old:
            self.registry.pending_requests.pop(old, None)
            for path in [shared / f"_{old}"] + list(shared.glob(f"_{old}.*")):
                try:
                    path.unlink()
                except OSError:
                    pass
        pair.request_id = None
        pair.request_placed_at = None

    def _check_responses(self, pair, scan: keydist.FolderScan, report: SyncReport):
        shared = Path(pair.shared_path)
        mine = [r for r in scan.responses_to_mine if r[0] == pair.request_id]
        if not mine:
            return
        request_name = f"_{pair.request_id}"
        try:
            request_bytes = (shared / request_name).read_bytes()
        except OSError:
            return
        for _req_id, name, data in mine:
            try:
                package, responder = keydist.process_response(
                    data, request_name, request_bytes, self.registry.kdkp, self.truststore
                )
            except MalformedPackage as exc:
                report.errors.append(
                    f"malformed key package from {exc.responder.subject if exc.responder else 'unknown'}"
                )
                continue
            except (BadSignature, Exception):
                continue
            pair.key = package.to_pair_key()
            pair.state = reg.STATE_ACTIVE
            self._retire_request(pair)
            report.key_installed = True
            self.events.emit(
                ev.KEY_INSTALLED,
                {"pair_id": pair.pair_id, "responder": responder.subject},
            )
            return

    # --------------------------------------------------------------- approve

    def approve_request(self, request_id: str, approve: bool) -> dict:
        pending = self.pending_inbound.pop(request_id, None)
        if pending is None:
            raise UnknownRequest(request_id)
        self._consumed_inbound.add(request_id)
        if not approve:
            return {"request_id": request_id, "decision": "denied"}
        pair = self.registry.find_pair(pending.pair_id)
        response_id, response_bytes = keydist.build_response(
            pending.file_name, pending.request_bytes, pair.key, self.registry.identity
        )
        keydist.place_response(pending.shared_path, pending.file_name, response_id, response_bytes)
        return {"request_id": request_id, "decision": "approved", "response_id": response_id}
