"""eID token abstraction: signing credentials, chain validation, token config.

Hardware tokens are reachable only through the TokenConfig/PKCS#11 seam;
tests and the acceptance suite use software tokens chained to a test root.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field
from pathlib import Path

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.x509.oid import NameOID

from .errors import (
    BadSignature,
    BrokenChain,
    ExpiredCertificate,
    MissingField,
    SigningRefused,
    UntrustedChain,
)

SIGNATURE_HASH = hashes.SHA256


@dataclass
class TokenConfig:
    provider_path: str
    cert_alias: str


def load_token_config(path) -> TokenConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    fields = {}
    for line in path.read_text("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    provider = fields.get("provider", "")
    alias = fields.get("alias", "")
    if not provider:
        raise MissingField("provider")
    if not alias:
        raise MissingField("alias")
    return TokenConfig(provider_path=provider, cert_alias=alias)


@dataclass
class TrustStore:
    roots: list[x509.Certificate] = field(default_factory=list)

    def add(self, cert: x509.Certificate):
        self.roots.append(cert)

    @classmethod
    def from_directory(cls, path) -> "TrustStore":
        store = cls()
        for entry in sorted(Path(path).iterdir()):
            if not entry.is_file():
                continue
            data = entry.read_bytes()
            try:
                if data.lstrip().startswith(b"-----"):
                    store.add(x509.load_pem_x509_certificate(data))
                else:
                    store.add(x509.load_der_x509_certificate(data))
            except ValueError:
                continue
        return store

    def find_issuer(self, cert: x509.Certificate) -> x509.Certificate | None:
        for root in self.roots:
            if root.subject == cert.issuer:
                return root
        return None


@dataclass(frozen=True)
class VerifiedIdentity:
    subject: str
    fingerprint: str  # SHA-256 of the leaf certificate, hex


class IdentityCredential:
    """A signing capability bound to an X.509 chain (leaf first, root excluded)."""

    def __init__(self, subject: str, chain: list[x509.Certificate], private_key):
        self.subject = subject
        self.chain = chain
        self._private_key = private_key

    def sign(self, data: bytes) -> bytes:
        if self._private_key is None:
            raise SigningRefused("token absent")
        return self._private_key.sign(data, padding.PKCS1v15(), SIGNATURE_HASH())

    def chain_der(self) -> list[bytes]:
        return [c.public_bytes(serialization.Encoding.DER) for c in self.chain]


def verify_signature(leaf: x509.Certificate, data: bytes, signature: bytes) -> None:
    try:
        leaf.public_key().verify(signature, data, padding.PKCS1v15(), SIGNATURE_HASH())
    except InvalidSignature as exc:
        raise BadSignature("signature does not verify under the leaf certificate") from exc


def _subject_cn(cert: x509.Certificate) -> str:
    attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    return attrs[0].value if attrs else cert.subject.rfc4514_string()


def verify_chain(
    chain: list[x509.Certificate],
    truststore: TrustStore,
    at_time: datetime.datetime | None = None,
) -> VerifiedIdentity:
    """Path validation leaf -> ... -> trusted root (root not in the chain itself)."""
    if not chain:
        raise BrokenChain("empty chain")
    if not truststore.roots:
        raise UntrustedChain("trust store is empty")
    at_time = at_time or datetime.datetime.now(datetime.timezone.utc)

    for i, cert in enumerate(chain):
        not_before = cert.not_valid_before_utc
        not_after = cert.not_valid_after_utc
        if at_time < not_before or at_time > not_after:
            raise ExpiredCertificate(f"certificate {i} not valid at {at_time.isoformat()}")

    def check_issued(cert, issuer, position):
        try:
            issuer.public_key().verify(
                cert.signature,
                cert.tbs_certificate_bytes,
                padding.PKCS1v15(),
                cert.signature_hash_algorithm,
            )
        except InvalidSignature as exc:
            raise BrokenChain(f"certificate {position} not signed by its issuer") from exc
        try:
            bc = issuer.extensions.get_extension_for_class(x509.BasicConstraints).value
            if not bc.ca:
                raise BrokenChain(f"issuer of certificate {position} is not a CA")
        except x509.ExtensionNotFound:
            pass

    for i in range(len(chain) - 1):
        if chain[i].issuer != chain[i + 1].subject:
            raise BrokenChain(f"certificate {i} issuer does not match certificate {i + 1}")
        check_issued(chain[i], chain[i + 1], i)

    root = truststore.find_issuer(chain[-1])
    if root is None:
        raise UntrustedChain(f"no trusted root for issuer {chain[-1].issuer.rfc4514_string()}")
    check_issued(chain[-1], root, len(chain) - 1)

    leaf = chain[0]
    fingerprint = leaf.fingerprint(hashes.SHA256()).hex()
    return VerifiedIdentity(subject=_subject_cn(leaf), fingerprint=fingerprint)


def _make_name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


class SoftwareRoot:
    """Self-signed test CA standing in for a national PKI root."""

    def __init__(self, name: str, key_size: int = 2048, valid_days: int = 3650):
        self.key = rsa.generate_private_key(public_exponent=65537, key_size=key_size)
        now = datetime.datetime.now(datetime.timezone.utc)
        self.certificate = (
            x509.CertificateBuilder()
            .subject_name(_make_name(name))
            .issuer_name(_make_name(name))
            .public_key(self.key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=valid_days))
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .sign(self.key, hashes.SHA256())
        )


def software_token_create(
    name: str, issuing_root: SoftwareRoot, valid_days: int = 365
) -> IdentityCredential:
    """PIN-free signing token whose chain (leaf only) validates under the root."""
    key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    now = datetime.datetime.now(datetime.timezone.utc)
    leaf = (
        x509.CertificateBuilder()
        .subject_name(_make_name(name))
        .issuer_name(issuing_root.certificate.subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=valid_days))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .sign(issuing_root.key, hashes.SHA256())
    )
    return IdentityCredential(subject=name, chain=[leaf], private_key=key)


def credential_to_der(credential: IdentityCredential) -> tuple[bytes, list[bytes]]:
    """Serialize a software credential (PKCS#8 key, DER chain) for registry storage."""
    key_der = credential._private_key.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    return key_der, credential.chain_der()


def credential_from_der(key_der: bytes, chain_der: list[bytes]) -> IdentityCredential:
    key = serialization.load_der_private_key(key_der, password=None)
    chain = [x509.load_der_x509_certificate(d) for d in chain_der]
    return IdentityCredential(subject=_subject_cn(chain[0]), chain=chain, private_key=key)


class Pkcs11Token:
    """Placeholder for a hardware eID binding; wiring a real PKCS#11 driver is
    deployment work and outside the test surface."""

    def __init__(self, config: TokenConfig):
        self.config = config

    def open(self) -> IdentityCredential:
        raise SigningRefused(f"no PKCS#11 driver bound for {self.config.provider_path}")
