"""File-based PairKey distribution: signed requests, encrypted + signed
responses bound to the originating request file, and orphan cleanup.

Wire format (interoperability contract, bit-exact): deterministic TLV in
the field order below; hashes are SHA-256; the key package is encrypted
with RSA-OAEP(SHA-256) under the requester's KDKP public key.

File naming: request  "_" + 32 lowercase hex chars,
             response <request name> + "." + 32 lowercase hex chars.
"""

from __future__ import annotations

import hashlib
import os
import re
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding as apadding

from . import tlv
from .crypto import AlgorithmSpec, PairKey
from .errors import (
    BadSignature,
    FolderReadOnly,
    MalformedPackage,
    UnsupportedAlgorithm,
)
from .identity import (
    IdentityCredential,
    TrustStore,
    VerifiedIdentity,
    verify_chain,
    verify_signature,
)

from cryptography import x509

PROTOCOL_VERSION = 1

REQUEST_NAME_RE = re.compile(r"\A_[0-9a-fA-F]{32}\Z")
RESPONSE_NAME_RE = re.compile(r"\A(_[0-9a-fA-F]{32})\.([0-9a-fA-F]{32})\Z")
JOURNAL_PREFIX = "_journal_"

T_VERSION = 0x0001
T_KDKP_PUBLIC = 0x0002
T_CERT = 0x0003
T_SIGNATURE = 0x0004
T_KEY_PACKAGE_CT = 0x0010
T_PKG_CIPHER_SPEC = 0x0020
T_PKG_MAC_SPEC = 0x0021
T_PKG_KEY = 0x0022

_OAEP = apadding.OAEP(
    mgf=apadding.MGF1(algorithm=hashes.SHA256()),
    algorithm=hashes.SHA256(),
    label=None,
)

# one eID signature per process run: request bodies are cached per
# (identity, public key) and reused across shared folders
_request_cache: dict[tuple[int, bytes], bytes] = {}


@dataclass
class KeyPackage:
    cipher_spec: str
    mac_spec: str
    key_bytes: bytes

    def to_tlv(self) -> bytes:
        return (
            tlv.encode_str(T_PKG_CIPHER_SPEC, self.cipher_spec)
            + tlv.encode_str(T_PKG_MAC_SPEC, self.mac_spec)
            + tlv.encode(T_PKG_KEY, self.key_bytes)
        )

    @classmethod
    def from_tlv(cls, data: bytes) -> "KeyPackage":
        m = tlv.parse_map(data)
        return cls(
            cipher_spec=m[T_PKG_CIPHER_SPEC][0].decode("utf-8"),
            mac_spec=m[T_PKG_MAC_SPEC][0].decode("utf-8"),
            key_bytes=m[T_PKG_KEY][0],
        )

    def to_pair_key(self) -> PairKey:
        spec = AlgorithmSpec(cipher_spec=self.cipher_spec, mac_spec=self.mac_spec)
        return PairKey(secret=self.key_bytes, spec=spec)


def clear_request_cache():
    _request_cache.clear()


def _request_signed_payload(kdkp_public_der: bytes) -> bytes:
    return bytes([PROTOCOL_VERSION]) + kdkp_public_der


def build_request(identity: IdentityCredential, kdkp_public) -> bytes:
    """Signed request body; the eID signs at most once per run (cached)."""
    public_der = kdkp_public.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    cache_key = (id(identity), public_der)
    cached = _request_cache.get(cache_key)
    if cached is not None:
        return cached
    signature = identity.sign(_request_signed_payload(public_der))
    body = [
        tlv.encode_u8(T_VERSION, PROTOCOL_VERSION),
        tlv.encode(T_KDKP_PUBLIC, public_der),
    ]
    body.extend(tlv.encode(T_CERT, der) for der in identity.chain_der())
    body.append(tlv.encode(T_SIGNATURE, signature))
    request = b"".join(body)
    _request_cache[cache_key] = request
    return request


def new_request_id(rng=secrets.token_bytes) -> str:
    return rng(16).hex()


def place_request(shared_path, request_bytes: bytes, rng=secrets.token_bytes) -> str:
    request_id = new_request_id(rng)
    path = Path(shared_path) / f"_{request_id}"
    try:
        with open(path, "xb") as fh:
            fh.write(request_bytes)
    except (PermissionError, OSError) as exc:
        raise FolderReadOnly(f"cannot write request into {shared_path}: {exc}") from exc
    return request_id


@dataclass
class ParsedRequest:
    version: int
    kdkp_public_der: bytes
    chain: list
    signature: bytes


def parse_request(request_bytes: bytes) -> ParsedRequest:
    try:
        m = tlv.parse_map(request_bytes)
        version = m[T_VERSION][0][0]
        public_der = m[T_KDKP_PUBLIC][0]
        chain = [x509.load_der_x509_certificate(d) for d in m[T_CERT]]
        signature = m[T_SIGNATURE][0]
    except (tlv.TlvError, KeyError, IndexError, ValueError) as exc:
        raise BadSignature(f"malformed request: {exc}") from exc
    if version != PROTOCOL_VERSION:
        raise BadSignature(f"unknown request version {version}")
    if not chain:
        raise BadSignature("request carries no certificates")
    return ParsedRequest(version, public_der, chain, signature)


def verify_request(request_bytes: bytes, truststore: TrustStore, at_time=None) -> VerifiedIdentity:
    parsed = parse_request(request_bytes)
    identity = verify_chain(parsed.chain, truststore, at_time)
    verify_signature(parsed.chain[0], _request_signed_payload(parsed.kdkp_public_der), parsed.signature)
    return identity


def _response_signed_payload(request_file_name: str, request_bytes: bytes, ct: bytes) -> bytes:
    request_hash = hashlib.sha256(request_file_name.encode("utf-8") + request_bytes).digest()
    return request_hash + bytes([PROTOCOL_VERSION]) + ct


def build_response(
    request_file_name: str,
    request_bytes: bytes,
    pair_key: PairKey,
    identity: IdentityCredential,
    rng=secrets.token_bytes,
) -> tuple[str, bytes]:
    """Caller must have verified the request and obtained user approval."""
    parsed = parse_request(request_bytes)
    requester_public = serialization.load_der_public_key(parsed.kdkp_public_der)
    package = KeyPackage(
        cipher_spec=pair_key.spec.cipher_spec,
        mac_spec=pair_key.spec.mac_spec,
        key_bytes=pair_key.secret,
    )
    ct = requester_public.encrypt(package.to_tlv(), _OAEP)
    signature = identity.sign(_response_signed_payload(request_file_name, request_bytes, ct))
    body = [
        tlv.encode_u8(T_VERSION, PROTOCOL_VERSION),
        tlv.encode(T_KEY_PACKAGE_CT, ct),
    ]
    body.extend(tlv.encode(T_CERT, der) for der in identity.chain_der())
    body.append(tlv.encode(T_SIGNATURE, signature))
    return rng(16).hex(), b"".join(body)


def place_response(shared_path, request_file_name: str, response_id: str, response_bytes: bytes) -> Path:
    path = Path(shared_path) / f"{request_file_name}.{response_id}"
    try:
        with open(path, "xb") as fh:
            fh.write(response_bytes)
    except (PermissionError, OSError) as exc:
        raise FolderReadOnly(f"cannot write response into {shared_path}: {exc}") from exc
    return path


def process_response(
    response_bytes: bytes,
    request_file_name: str,
    request_bytes: bytes,
    kdkp_private,
    truststore: TrustStore,
    at_time=None,
) -> tuple[KeyPackage, VerifiedIdentity]:
    try:
        m = tlv.parse_map(response_bytes)
        version = m[T_VERSION][0][0]
        ct = m[T_KEY_PACKAGE_CT][0]
        chain = [x509.load_der_x509_certificate(d) for d in m[T_CERT]]
        signature = m[T_SIGNATURE][0]
    except (tlv.TlvError, KeyError, IndexError, ValueError) as exc:
        raise BadSignature(f"malformed response: {exc}") from exc
    if version != PROTOCOL_VERSION:
        raise BadSignature(f"unknown response version {version}")
    if not chain:
        raise BadSignature("response carries no certificates")
    responder = verify_chain(chain, truststore, at_time)
    verify_signature(chain[0], _response_signed_payload(request_file_name, request_bytes, ct), signature)
    try:
        package_raw = kdkp_private.decrypt(ct, _OAEP)
    except ValueError as exc:
        raise MalformedPackage(f"key package does not decrypt: {exc}", responder=responder) from exc
    try:
        package = KeyPackage.from_tlv(package_raw)
        package.to_pair_key()
    except (tlv.TlvError, KeyError, IndexError, UnsupportedAlgorithm, ValueError) as exc:
        raise MalformedPackage(str(exc), responder=responder) from exc
    return package, responder


@dataclass
class FolderScan:
    inbound_requests: list[tuple[str, str, bytes]] = field(default_factory=list)  # (id, name, bytes)
    responses_to_mine: list[tuple[str, str, bytes]] = field(default_factory=list)  # (req id, name, bytes)
    orphans: list[str] = field(default_factory=list)


def scan_folder(shared_path, registry, first_seen: dict[str, float] | None = None, now=None) -> FolderScan:
    """Classify '_'-prefixed protocol files; malformed ones become orphans."""
    shared = Path(shared_path)
    now = now if now is not None else time.time()
    result = FolderScan()
    try:
        names = sorted(p.name for p in shared.iterdir() if p.is_file() and p.name.startswith("_"))
    except OSError:
        return result
    name_set = set(names)
    my_ids = {req.request_id for req in registry.pending_requests.values()}
    for name in names:
        if name.startswith(JOURNAL_PREFIX):
            continue
        if REQUEST_NAME_RE.match(name):
            request_id = name[1:].lower()
            if request_id in my_ids:
                continue
            try:
                data = (shared / name).read_bytes()
                parse_request(data)
            except Exception:
                result.orphans.append(name)
                if first_seen is not None:
                    first_seen.setdefault(name, now)
                continue
            result.inbound_requests.append((request_id, name, data))
            continue
        match = RESPONSE_NAME_RE.match(name)
        if match:
            base, _ext = match.groups()
            base_id = base[1:].lower()
            if base_id in my_ids:
                try:
                    data = (shared / name).read_bytes()
                except OSError:
                    continue
                result.responses_to_mine.append((base_id, name, data))
            elif base not in name_set:
                result.orphans.append(name)
                if first_seen is not None:
                    first_seen.setdefault(name, now)
            continue
        result.orphans.append(name)
        if first_seen is not None:
            first_seen.setdefault(name, now)
    if first_seen is not None:
        for stale in set(first_seen) - set(result.orphans):
            del first_seen[stale]
    return result


def cleanup_orphans(shared_path, now: float, timeout_seconds: float, first_seen: dict[str, float]) -> int:
    """Best-effort deletion of orphan responses older than the timeout."""
    shared = Path(shared_path)
    deleted = 0
    for name, seen in list(first_seen.items()):
        if not RESPONSE_NAME_RE.match(name):
            continue
        if now - seen <= timeout_seconds:
            continue
        base = name.split(".", 1)[0]
        if (shared / base).exists():
            continue  # live request reappeared; its responses stay
        try:
            (shared / name).unlink()
            deleted += 1
        except OSError:
            pass
        del first_seen[name]
    return deleted
