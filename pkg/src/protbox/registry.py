"""The PReg: local, never-synchronized store of pairs, keys, hidden entries
and backups, sealed at rest under a password-derived key.

Layout on disk:
    <root>/registry.pbx                       sealed TLV container
    <root>/backups/<pair_id>/<entry_id>/<n>   raw cleartext backup versions
    <root>/backups/_staging/<id>              contents awaiting an ask-user decision
"""

from __future__ import annotations

import os
import secrets
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import rsa

from . import crypto, tlv
from .errors import (
    AlreadyHidden,
    CorruptRegistry,
    NestedPaths,
    NoSuchVersion,
    NotADirectory,
    NothingToRestore,
    SharedFolderAlreadyPaired,
)
from .identity import IdentityCredential, credential_from_der, credential_to_der

REGISTRY_FILENAME = "registry.pbx"
DEFAULT_SCAN_PERIOD = 5
DEFAULT_ORPHAN_TIMEOUT_HOURS = 48
DEFAULT_RESPONSE_TIMEOUT_SECONDS = 600

STATE_AWAITING_KEY = "AwaitingKey"
STATE_ACTIVE = "Active"

KIND_FILE = "file"
KIND_DIRECTORY = "directory"

POLICY_NEVER = "never"
POLICY_KEEP = "keep"
POLICY_ASK = "ask"

# --- TLV tags -------------------------------------------------------------

T_USER_ID = 0x0001
T_KDKP_PRIVATE = 0x0002
T_IDENTITY_KEY = 0x0003
T_IDENTITY_CERT = 0x0004
T_AUTHOR_ID = 0x0005
T_PAIR = 0x0010
T_PENDING_REQUEST = 0x0020
T_SETTINGS = 0x0030
T_STAGED_BACKUP = 0x0060

TP_PAIR_ID = 0x0101
TP_PROT_PATH = 0x0102
TP_SHARED_PATH = 0x0103
TP_STATE = 0x0104
TP_KEY_SECRET = 0x0105
TP_CIPHER_SPEC = 0x0106
TP_MAC_SPEC = 0x0107
TP_ENTRY = 0x0108
TP_POLICY = 0x0109
TP_REQUEST_ID = 0x010A
TP_REQUEST_PLACED_AT = 0x010B

TE_ENTRY_ID = 0x0201
TE_REL_PATH = 0x0202
TE_ENCRYPTED_REL = 0x0203
TE_KIND = 0x0204
TE_PROT_MTIME = 0x0205
TE_PROT_LENGTH = 0x0206
TE_SHARED_MTIME = 0x0207
TE_SHARED_LENGTH = 0x0208
TE_HIDDEN = 0x0209
TE_BACKUP = 0x020A
TE_POLICY = 0x020B
TE_SHARED_HASH = 0x020C
TE_RESTORE_PENDING = 0x020D

TB_VERSION_ID = 0x0301
TB_CAPTURED_AT = 0x0302
TB_CONTENT_REF = 0x0303
TB_LENGTH = 0x0304

TPOL_MODE = 0x0401
TPOL_KEEP = 0x0402

TS_SCAN_PERIOD = 0x0501
TS_ORPHAN_TIMEOUT = 0x0502
TS_RESPONSE_TIMEOUT = 0x0503
TS_DEFAULT_POLICY = 0x0504

TQ_ID = 0x0601
TQ_SHARED_PATH = 0x0602
TQ_PLACED_AT = 0x0603

TSB_ID = 0x0701
TSB_PAIR_ID = 0x0702
TSB_ENTRY_ID = 0x0703
TSB_CAPTURED_AT = 0x0704

_POLICY_MODES = {POLICY_NEVER: 0, POLICY_KEEP: 1, POLICY_ASK: 2}
_POLICY_MODES_REV = {v: k for k, v in _POLICY_MODES.items()}


@dataclass
class BackupPolicy:
    mode: str = POLICY_KEEP
    keep: int = 10

    def __post_init__(self):
        if self.mode not in _POLICY_MODES:
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.mode == POLICY_KEEP and self.keep < 1:
            raise ValueError("keep:N requires N >= 1")

    def to_tlv(self) -> bytes:
        return tlv.encode_u8(TPOL_MODE, _POLICY_MODES[self.mode]) + tlv.encode_u32(
            TPOL_KEEP, self.keep
        )

    @classmethod
    def from_tlv(cls, data: bytes) -> "BackupPolicy":
        m = tlv.parse_map(data)
        return cls(
            mode=_POLICY_MODES_REV[m[TPOL_MODE][0][0]],
            keep=tlv.decode_u32(m[TPOL_KEEP][0]),
        )


@dataclass
class BackupVersion:
    version_id: int
    captured_at: int
    content_ref: str
    length: int


@dataclass
class RegistryEntry:
    rel_path: str
    encrypted_rel: str
    kind: str
    entry_id: int = field(default_factory=lambda: secrets.randbits(63))
    prot_mtime: int | None = None
    prot_length: int | None = None
    shared_mtime: int | None = None
    shared_length: int | None = None
    hidden: bool = False
    backups: list[BackupVersion] = field(default_factory=list)
    policy: BackupPolicy | None = None
    last_shared_hash: bytes | None = None
    restore_pending: int | None = None

    def next_version_id(self) -> int:
        return max((b.version_id for b in self.backups), default=0) + 1


@dataclass
class PendingRequest:
    request_id: str  # 32 lowercase hex chars
    shared_path: str
    placed_at: int


@dataclass
class StagedBackup:
    staging_id: str
    pair_id: str
    entry_id: int
    captured_at: int


@dataclass
class Pair:
    pair_id: str
    prot_path: str
    shared_path: str
    key: crypto.PairKey | None = None
    state: str = STATE_AWAITING_KEY
    entries: dict[str, RegistryEntry] = field(default_factory=dict)
    policy: BackupPolicy | None = None
    request_id: str | None = None
    request_placed_at: int | None = None

    def entry(self, rel_path: str) -> RegistryEntry | None:
        return self.entries.get(rel_path)


@dataclass
class Settings:
    scan_period: int = DEFAULT_SCAN_PERIOD
    orphan_timeout_hours: int = DEFAULT_ORPHAN_TIMEOUT_HOURS
    response_timeout_seconds: int = DEFAULT_RESPONSE_TIMEOUT_SECONDS
    default_policy: BackupPolicy = field(default_factory=BackupPolicy)


class Registry:
    """Single-writer store; mutations go through the owning context's lock."""

    def __init__(self, root: Path, user_id: str, kdkp=None):
        self.root = Path(root)
        self.user_id = user_id
        self.kdkp = kdkp or rsa.generate_private_key(public_exponent=65537, key_size=2048)
        self.author_id = secrets.token_hex(8)
        self.identity: IdentityCredential | None = None
        self.pairs: list[Pair] = []
        self.pending_requests: dict[str, PendingRequest] = {}
        self.staged_backups: dict[str, StagedBackup] = {}
        self.settings = Settings()
        self.lock = threading.RLock()

    # -- pairs -------------------------------------------------------------

    def find_pair(self, pair_id: str) -> Pair | None:
        for p in self.pairs:
            if p.pair_id == pair_id:
                return p
        return None

    def add_pair(self, prot_path, shared_path, rng=os.urandom) -> Pair:
        prot = Path(prot_path).resolve()
        shared = Path(shared_path).resolve()
        for p in (prot, shared):
            if not p.is_dir():
                raise NotADirectory(str(p))
        if prot == shared or prot in shared.parents or shared in prot.parents:
            raise NestedPaths(f"{prot} / {shared}")
        for existing in self.pairs:
            if Path(existing.shared_path) == shared:
                raise SharedFolderAlreadyPaired(str(shared))
        pair = Pair(
            pair_id=secrets.token_hex(8),
            prot_path=str(prot),
            shared_path=str(shared),
        )
        if self._shared_folder_is_empty(shared):
            pair.key = crypto.generate_pair_key(rng=rng)
            pair.state = STATE_ACTIVE
        else:
            pair.state = STATE_AWAITING_KEY
        self.pairs.append(pair)
        return pair

    @staticmethod
    def _shared_folder_is_empty(shared: Path) -> bool:
        for p in shared.rglob("*"):
            if p.is_file() and not p.name.startswith("_"):
                return False
        return True

    # -- backups -----------------------------------------------------------

    def backup_dir(self, pair: Pair, entry: RegistryEntry) -> Path:
        return self.root / "backups" / pair.pair_id / f"{entry.entry_id:016x}"

    def effective_policy(self, pair: Pair, entry: RegistryEntry) -> BackupPolicy:
        return entry.policy or pair.policy or self.settings.default_policy

    def store_backup(self, pair: Pair, entry: RegistryEntry, content: bytes, now=None) -> int:
        now = int(now if now is not None else time.time())
        vid = entry.next_version_id()
        bdir = self.backup_dir(pair, entry)
        bdir.mkdir(parents=True, exist_ok=True)
        path = bdir / str(vid)
        path.write_bytes(content)
        entry.backups.append(
            BackupVersion(
                version_id=vid,
                captured_at=now,
                content_ref=str(path.relative_to(self.root)),
                length=len(content),
            )
        )
        return vid

    def _evict_backups(self, entry: RegistryEntry, keep: int):
        while len(entry.backups) > keep:
            oldest = entry.backups.pop(0)
            path = self.root / oldest.content_ref
            if path.exists():
                path.unlink()

    def apply_backup_policy(self, pair: Pair, entry: RegistryEntry, new_contents: bytes, now=None):
        """Returns ("stored", version_id) | ("skipped", None) | ("needs_decision", staging_id)."""
        policy = self.effective_policy(pair, entry)
        if policy.mode == POLICY_NEVER:
            return ("skipped", None)
        if policy.mode == POLICY_ASK:
            return ("needs_decision", self.stage_backup(pair, entry, new_contents, now))
        vid = self.store_backup(pair, entry, new_contents, now)
        self._evict_backups(entry, policy.keep)
        return ("stored", vid)

    def stage_backup(self, pair: Pair, entry: RegistryEntry, content: bytes, now=None) -> str:
        now = int(now if now is not None else time.time())
        staging_id = secrets.token_hex(8)
        sdir = self.root / "backups" / "_staging"
        sdir.mkdir(parents=True, exist_ok=True)
        (sdir / staging_id).write_bytes(content)
        self.staged_backups[staging_id] = StagedBackup(staging_id, pair.pair_id, entry.entry_id, now)
        return staging_id

    def resolve_backup_decision(self, staging_id: str, store: bool) -> int | None:
        staged = self.staged_backups.pop(staging_id, None)
        if staged is None:
            raise NoSuchVersion(staging_id)
        path = self.root / "backups" / "_staging" / staging_id
        content = path.read_bytes()
        path.unlink()
        if not store:
            return None
        pair = self.find_pair(staged.pair_id)
        entry = next(e for e in pair.entries.values() if e.entry_id == staged.entry_id)
        return self.store_backup(pair, entry, content, staged.captured_at)

    # -- hide / restore ----------------------------------------------------

    def hide_entry(self, pair: Pair, entry: RegistryEntry, cleartext_backup: bytes | None = None, now=None):
        if entry.hidden:
            raise AlreadyHidden(entry.rel_path)
        result = ("skipped", None)
        if cleartext_backup is not None:
            result = self.apply_backup_policy(pair, entry, cleartext_backup, now)
        entry.hidden = True
        entry.prot_mtime = entry.prot_length = None
        entry.shared_mtime = entry.shared_length = None
        entry.last_shared_hash = None
        return result

    def restore_entry(self, pair: Pair, entry: RegistryEntry, version_id: int | None = None) -> bytes:
        if not entry.backups:
            raise NothingToRestore(entry.rel_path)
        if version_id is None:
            version = entry.backups[-1]
        else:
            match = [b for b in entry.backups if b.version_id == version_id]
            if not match:
                raise NoSuchVersion(f"{entry.rel_path} version {version_id}")
            version = match[0]
        content = (self.root / version.content_ref).read_bytes()
        entry.hidden = False
        entry.restore_pending = version.version_id
        return content

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [tlv.encode_str(T_USER_ID, self.user_id)]
        out.append(
            tlv.encode(
                T_KDKP_PRIVATE,
                self.kdkp.private_bytes(
                    serialization.Encoding.DER,
                    serialization.PrivateFormat.PKCS8,
                    serialization.NoEncryption(),
                ),
            )
        )
        out.append(tlv.encode_str(T_AUTHOR_ID, self.author_id))
        if self.identity is not None:
            key_der, chain_der = credential_to_der(self.identity)
            out.append(tlv.encode(T_IDENTITY_KEY, key_der))
            for cert in chain_der:
                out.append(tlv.encode(T_IDENTITY_CERT, cert))
        for pair in self.pairs:
            out.append(tlv.encode(T_PAIR, self._pair_to_tlv(pair)))
        for req in self.pending_requests.values():
            body = (
                tlv.encode_str(TQ_ID, req.request_id)
                + tlv.encode_str(TQ_SHARED_PATH, req.shared_path)
                + tlv.encode_u64(TQ_PLACED_AT, req.placed_at)
            )
            out.append(tlv.encode(T_PENDING_REQUEST, body))
        for staged in self.staged_backups.values():
            body = (
                tlv.encode_str(TSB_ID, staged.staging_id)
                + tlv.encode_str(TSB_PAIR_ID, staged.pair_id)
                + tlv.encode_u64(TSB_ENTRY_ID, staged.entry_id)
                + tlv.encode_u64(TSB_CAPTURED_AT, staged.captured_at)
            )
            out.append(tlv.encode(T_STAGED_BACKUP, body))
        s = self.settings
        settings_body = (
            tlv.encode_u32(TS_SCAN_PERIOD, s.scan_period)
            + tlv.encode_u32(TS_ORPHAN_TIMEOUT, s.orphan_timeout_hours)
            + tlv.encode_u32(TS_RESPONSE_TIMEOUT, s.response_timeout_seconds)
            + tlv.encode(TS_DEFAULT_POLICY, s.default_policy.to_tlv())
        )
        out.append(tlv.encode(T_SETTINGS, settings_body))
        return b"".join(out)

    @staticmethod
    def _pair_to_tlv(pair: Pair) -> bytes:
        out = [
            tlv.encode_str(TP_PAIR_ID, pair.pair_id),
            tlv.encode_str(TP_PROT_PATH, pair.prot_path),
            tlv.encode_str(TP_SHARED_PATH, pair.shared_path),
            tlv.encode_u8(TP_STATE, 1 if pair.state == STATE_ACTIVE else 0),
        ]
        if pair.key is not None:
            out.append(tlv.encode(TP_KEY_SECRET, pair.key.secret))
            out.append(tlv.encode_str(TP_CIPHER_SPEC, pair.key.spec.cipher_spec))
            out.append(tlv.encode_str(TP_MAC_SPEC, pair.key.spec.mac_spec))
        if pair.policy is not None:
            out.append(tlv.encode(TP_POLICY, pair.policy.to_tlv()))
        if pair.request_id is not None:
            out.append(tlv.encode_str(TP_REQUEST_ID, pair.request_id))
        if pair.request_placed_at is not None:
            out.append(tlv.encode_u64(TP_REQUEST_PLACED_AT, pair.request_placed_at))
        for entry in pair.entries.values():
            out.append(tlv.encode(TP_ENTRY, Registry._entry_to_tlv(entry)))
        return b"".join(out)

    @staticmethod
    def _entry_to_tlv(entry: RegistryEntry) -> bytes:
        out = [
            tlv.encode_u64(TE_ENTRY_ID, entry.entry_id),
            tlv.encode_str(TE_REL_PATH, entry.rel_path),
            tlv.encode_str(TE_ENCRYPTED_REL, entry.encrypted_rel),
            tlv.encode_u8(TE_KIND, 1 if entry.kind == KIND_DIRECTORY else 0),
            tlv.encode_u8(TE_HIDDEN, 1 if entry.hidden else 0),
        ]
        for tag, value in (
            (TE_PROT_MTIME, entry.prot_mtime),
            (TE_PROT_LENGTH, entry.prot_length),
            (TE_SHARED_MTIME, entry.shared_mtime),
            (TE_SHARED_LENGTH, entry.shared_length),
            (TE_RESTORE_PENDING, entry.restore_pending),
        ):
            if value is not None:
                out.append(tlv.encode_u64(tag, value))
        if entry.last_shared_hash is not None:
            out.append(tlv.encode(TE_SHARED_HASH, entry.last_shared_hash))
        if entry.policy is not None:
            out.append(tlv.encode(TE_POLICY, entry.policy.to_tlv()))
        for b in entry.backups:
            body = (
                tlv.encode_u64(TB_VERSION_ID, b.version_id)
                + tlv.encode_u64(TB_CAPTURED_AT, b.captured_at)
                + tlv.encode_str(TB_CONTENT_REF, b.content_ref)
                + tlv.encode_u64(TB_LENGTH, b.length)
            )
            out.append(tlv.encode(TE_BACKUP, body))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, root: Path, data: bytes) -> "Registry":
        try:
            return cls._parse(root, data)
        except (tlv.TlvError, KeyError, IndexError, ValueError, struct.error) as exc:
            raise CorruptRegistry(str(exc)) from exc

    @classmethod
    def _parse(cls, root: Path, data: bytes) -> "Registry":
        m = tlv.parse_map(data)
        kdkp = serialization.load_der_private_key(m[T_KDKP_PRIVATE][0], password=None)
        reg = cls(root, m[T_USER_ID][0].decode("utf-8"), kdkp=kdkp)
        reg.author_id = m[T_AUTHOR_ID][0].decode("utf-8")
        if T_IDENTITY_KEY in m:
            reg.identity = credential_from_der(m[T_IDENTITY_KEY][0], m.get(T_IDENTITY_CERT, []))
        for raw in m.get(T_PAIR, []):
            reg.pairs.append(cls._pair_from_tlv(raw))
        for raw in m.get(T_PENDING_REQUEST, []):
            qm = tlv.parse_map(raw)
            req = PendingRequest(
                request_id=qm[TQ_ID][0].decode("utf-8"),
                shared_path=qm[TQ_SHARED_PATH][0].decode("utf-8"),
                placed_at=tlv.decode_u64(qm[TQ_PLACED_AT][0]),
            )
            reg.pending_requests[req.request_id] = req
        for raw in m.get(T_STAGED_BACKUP, []):
            sm = tlv.parse_map(raw)
            staged = StagedBackup(
                staging_id=sm[TSB_ID][0].decode("utf-8"),
                pair_id=sm[TSB_PAIR_ID][0].decode("utf-8"),
                entry_id=tlv.decode_u64(sm[TSB_ENTRY_ID][0]),
                captured_at=tlv.decode_u64(sm[TSB_CAPTURED_AT][0]),
            )
            reg.staged_backups[staged.staging_id] = staged
        if T_SETTINGS in m:
            sm = tlv.parse_map(m[T_SETTINGS][0])
            reg.settings = Settings(
                scan_period=tlv.decode_u32(sm[TS_SCAN_PERIOD][0]),
                orphan_timeout_hours=tlv.decode_u32(sm[TS_ORPHAN_TIMEOUT][0]),
                response_timeout_seconds=tlv.decode_u32(sm[TS_RESPONSE_TIMEOUT][0]),
                default_policy=BackupPolicy.from_tlv(sm[TS_DEFAULT_POLICY][0]),
            )
        shared_paths = [p.shared_path for p in reg.pairs]
        if len(set(shared_paths)) != len(shared_paths):
            raise CorruptRegistry("duplicate shared folder across pairs")
        return reg

    @classmethod
    def _pair_from_tlv(cls, data: bytes) -> Pair:
        m = tlv.parse_map(data)
        pair = Pair(
            pair_id=m[TP_PAIR_ID][0].decode("utf-8"),
            prot_path=m[TP_PROT_PATH][0].decode("utf-8"),
            shared_path=m[TP_SHARED_PATH][0].decode("utf-8"),
            state=STATE_ACTIVE if m[TP_STATE][0][0] == 1 else STATE_AWAITING_KEY,
        )
        if TP_KEY_SECRET in m:
            spec = crypto.AlgorithmSpec(
                cipher_spec=m[TP_CIPHER_SPEC][0].decode("utf-8"),
                mac_spec=m[TP_MAC_SPEC][0].decode("utf-8"),
            )
            pair.key = crypto.PairKey(secret=m[TP_KEY_SECRET][0], spec=spec)
        if pair.state == STATE_ACTIVE and pair.key is None:
            raise CorruptRegistry(f"active pair {pair.pair_id} has no key")
        if TP_POLICY in m:
            pair.policy = BackupPolicy.from_tlv(m[TP_POLICY][0])
        if TP_REQUEST_ID in m:
            pair.request_id = m[TP_REQUEST_ID][0].decode("utf-8")
        if TP_REQUEST_PLACED_AT in m:
            pair.request_placed_at = tlv.decode_u64(m[TP_REQUEST_PLACED_AT][0])
        for raw in m.get(TP_ENTRY, []):
            entry = cls._entry_from_tlv(raw)
            pair.entries[entry.rel_path] = entry
        return pair

    @classmethod
    def _entry_from_tlv(cls, data: bytes) -> RegistryEntry:
        m = tlv.parse_map(data)

        def opt_u64(tag):
            return tlv.decode_u64(m[tag][0]) if tag in m else None

        entry = RegistryEntry(
            rel_path=m[TE_REL_PATH][0].decode("utf-8"),
            encrypted_rel=m[TE_ENCRYPTED_REL][0].decode("utf-8"),
            kind=KIND_DIRECTORY if m[TE_KIND][0][0] == 1 else KIND_FILE,
            entry_id=tlv.decode_u64(m[TE_ENTRY_ID][0]),
            prot_mtime=opt_u64(TE_PROT_MTIME),
            prot_length=opt_u64(TE_PROT_LENGTH),
            shared_mtime=opt_u64(TE_SHARED_MTIME),
            shared_length=opt_u64(TE_SHARED_LENGTH),
            hidden=m[TE_HIDDEN][0][0] == 1,
            restore_pending=opt_u64(TE_RESTORE_PENDING),
        )
        if TE_SHARED_HASH in m:
            entry.last_shared_hash = m[TE_SHARED_HASH][0]
        if TE_POLICY in m:
            entry.policy = BackupPolicy.from_tlv(m[TE_POLICY][0])
        for raw in m.get(TE_BACKUP, []):
            bm = tlv.parse_map(raw)
            entry.backups.append(
                BackupVersion(
                    version_id=tlv.decode_u64(bm[TB_VERSION_ID][0]),
                    captured_at=tlv.decode_u64(bm[TB_CAPTURED_AT][0]),
                    content_ref=bm[TB_CONTENT_REF][0].decode("utf-8"),
                    length=tlv.decode_u64(bm[TB_LENGTH][0]),
                )
            )
        return entry


# --- load / save ----------------------------------------------------------


def registry_path(root) -> Path:
    return Path(root) / REGISTRY_FILENAME


def save_registry(registry: Registry, password: str, rng=os.urandom) -> None:
    root = registry.root
    root.mkdir(parents=True, exist_ok=True)
    # the salt (and derived key) persist for the life of a password
    cached = getattr(registry, "_sealing_key", None)
    if cached is None or cached[0] != password:
        key = crypto.derive_registry_key(password, rng(16))
        registry._sealing_key = (password, key)
    else:
        key = cached[1]
    sealed = crypto.seal_registry(key, registry.to_bytes(), rng=rng)
    target = registry_path(root)
    tmp = target.with_suffix(".tmp")
    tmp.write_bytes(sealed)
    os.replace(tmp, target)


def load_registry(root, password: str, user_id: str = "") -> Registry:
    """Open an existing registry, or create a fresh one on first use."""
    root = Path(root)
    path = registry_path(root)
    if not path.exists():
        registry = Registry(root, user_id or os.environ.get("USER", "user"))
        save_registry(registry, password)
        return registry
    sealed = path.read_bytes()
    salt, iterations, mode = crypto.parse_registry_header(sealed)
    key = crypto.derive_registry_key(password, salt, iterations, mode)
    body = crypto.open_registry(key, sealed)
    return Registry.from_bytes(root, body)
