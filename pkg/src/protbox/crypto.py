"""PairKey lifecycle, protected-file content format, and registry sealing.

Protected files are laid out as mac || optional-iv || ciphertext with no
framing bytes (encrypt-then-MAC: the MAC covers iv || ciphertext and is
checked before any decryption).

Sealed registry container: "PBRG" || u8 version=1 || u8 mode || salt[16]
|| u32-BE iterations || body || mac, where mac is HMAC-SHA256 over
everything before it.
"""

from __future__ import annotations

import hmac as _hmac
import os
import struct
from dataclasses import dataclass, field

from cryptography.hazmat.primitives import hashes, padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.pbkdf2 import PBKDF2HMAC

from .errors import (
    IntegrityFailure,
    UnsupportedAlgorithm,
    UnsupportedVersion,
    WeakParameters,
    WrongPassword,
)

BLOCK_SIZE = 16
DEFAULT_CIPHER_SPEC = "AES/CBC/PKCS5Padding"
DEFAULT_MAC_SPEC = "HmacSHA1"
DEFAULT_KEY_BITS = 256
MIN_KDF_ITERATIONS = 10_000
DEFAULT_KDF_ITERATIONS = 1 << 17

_MAC_ALGS = {
    "HmacSHA": hashes.SHA1,
    "HmacSHA1": hashes.SHA1,
    "HmacSHA256": hashes.SHA256,
    "HmacSHA512": hashes.SHA512,
}

_REGISTRY_MAGIC = b"PBRG"
_REGISTRY_VERSION = 1
REGISTRY_MODE_ECB = 0
REGISTRY_MODE_CBC = 1


@dataclass(frozen=True)
class AlgorithmSpec:
    cipher_spec: str = DEFAULT_CIPHER_SPEC
    mac_spec: str = DEFAULT_MAC_SPEC

    def __post_init__(self):
        algorithm, mode, pad = self._parse_cipher()
        if algorithm != "AES":
            raise UnsupportedAlgorithm(f"unsupported cipher: {algorithm}")
        if mode not in ("ECB", "CBC"):
            raise UnsupportedAlgorithm(f"unsupported mode: {mode}")
        if pad != "PKCS5Padding":
            raise UnsupportedAlgorithm(f"unsupported padding: {pad}")
        if self.mac_spec not in _MAC_ALGS:
            raise UnsupportedAlgorithm(f"unsupported MAC: {self.mac_spec}")

    def _parse_cipher(self):
        parts = self.cipher_spec.split("/")
        if len(parts) != 3:
            raise UnsupportedAlgorithm(f"bad cipher spec: {self.cipher_spec!r}")
        return parts[0], parts[1], parts[2]

    @property
    def mode(self) -> str:
        return self._parse_cipher()[1]

    @property
    def uses_iv(self) -> bool:
        return self.mode == "CBC"

    @property
    def iv_length(self) -> int:
        return BLOCK_SIZE if self.uses_iv else 0

    @property
    def mac_hash(self):
        return _MAC_ALGS[self.mac_spec]()

    @property
    def mac_length(self) -> int:
        return self.mac_hash.digest_size

    @property
    def key_length(self) -> int:
        return DEFAULT_KEY_BITS // 8


@dataclass(frozen=True)
class PairKey:
    secret: bytes
    spec: AlgorithmSpec = field(default_factory=AlgorithmSpec)

    def __post_init__(self):
        if len(self.secret) != self.spec.key_length:
            raise UnsupportedAlgorithm(
                f"secret is {len(self.secret)} bytes, spec needs {self.spec.key_length}"
            )


def generate_pair_key(spec: AlgorithmSpec | None = None, rng=os.urandom) -> PairKey:
    spec = spec or AlgorithmSpec()
    return PairKey(secret=rng(spec.key_length), spec=spec)


def _mac(secret: bytes, alg, data: bytes) -> bytes:
    from cryptography.hazmat.primitives import hmac as chmac

    h = chmac.HMAC(secret, alg)
    h.update(data)
    return h.finalize()


def _decrypt(key: PairKey, iv: bytes, ciphertext: bytes) -> bytes:
    """Cipher path, separated so tests can assert it is never reached on MAC failure."""
    mode = modes.CBC(iv) if key.spec.uses_iv else modes.ECB()
    dec = Cipher(algorithms.AES(key.secret), mode).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = padding.PKCS7(BLOCK_SIZE * 8).unpadder()
    return unpadder.update(padded) + unpadder.finalize()


def protect_content(key: PairKey, plaintext: bytes, rng=os.urandom) -> bytes:
    iv = rng(key.spec.iv_length) if key.spec.uses_iv else b""
    padder = padding.PKCS7(BLOCK_SIZE * 8).padder()
    padded = padder.update(plaintext) + padder.finalize()
    mode = modes.CBC(iv) if key.spec.uses_iv else modes.ECB()
    enc = Cipher(algorithms.AES(key.secret), mode).encryptor()
    ciphertext = enc.update(padded) + enc.finalize()
    mac = _mac(key.secret, key.spec.mac_hash, iv + ciphertext)
    return mac + iv + ciphertext


def unprotect_content(key: PairKey, blob: bytes) -> bytes:
    spec = key.spec
    min_len = spec.mac_length + spec.iv_length + BLOCK_SIZE
    if len(blob) < min_len:
        raise IntegrityFailure(f"blob too short: {len(blob)} < {min_len}")
    mac = blob[: spec.mac_length]
    rest = blob[spec.mac_length :]
    expected = _mac(key.secret, spec.mac_hash, rest)
    if not _hmac.compare_digest(mac, expected):
        raise IntegrityFailure("MAC mismatch")
    iv = rest[: spec.iv_length]
    ciphertext = rest[spec.iv_length :]
    if len(ciphertext) % BLOCK_SIZE != 0:
        raise IntegrityFailure("ciphertext not block-aligned")
    try:
        return _decrypt(key, iv, ciphertext)
    except ValueError as exc:
        # valid MAC implies well-formed padding; anything else is a bug
        raise AssertionError(f"padding failure after valid MAC: {exc}") from exc


def blob_length(spec: AlgorithmSpec, plaintext_length: int) -> int:
    padded = (plaintext_length // BLOCK_SIZE + 1) * BLOCK_SIZE
    return spec.mac_length + spec.iv_length + padded


@dataclass(frozen=True)
class RegistryKey:
    enc_key: bytes
    mac_key: bytes
    salt: bytes
    iterations: int
    mode: int = REGISTRY_MODE_ECB


def derive_registry_key(
    password: str,
    salt: bytes,
    iterations: int = DEFAULT_KDF_ITERATIONS,
    mode: int = REGISTRY_MODE_ECB,
) -> RegistryKey:
    if iterations < MIN_KDF_ITERATIONS:
        raise WeakParameters(f"iterations {iterations} below {MIN_KDF_ITERATIONS}")
    if len(salt) != 16:
        raise WeakParameters("salt must be 16 bytes")
    kdf = PBKDF2HMAC(algorithm=hashes.SHA256(), length=64, salt=salt, iterations=iterations)
    material = kdf.derive(password.encode("utf-8"))
    return RegistryKey(material[:32], material[32:], salt, iterations, mode)


def _registry_header(key: RegistryKey) -> bytes:
    return (
        _REGISTRY_MAGIC
        + bytes([_REGISTRY_VERSION, key.mode])
        + key.salt
        + struct.pack(">I", key.iterations)
    )


def parse_registry_header(sealed: bytes) -> tuple[bytes, int, int]:
    """Return (salt, iterations, mode); raises UnsupportedVersion on bad magic."""
    if len(sealed) < 26 or sealed[:4] != _REGISTRY_MAGIC:
        raise UnsupportedVersion("not a sealed registry")
    if sealed[4] != _REGISTRY_VERSION:
        raise UnsupportedVersion(f"unknown version {sealed[4]}")
    mode = sealed[5]
    if mode not in (REGISTRY_MODE_ECB, REGISTRY_MODE_CBC):
        raise UnsupportedVersion(f"unknown mode {mode}")
    salt = sealed[6:22]
    (iterations,) = struct.unpack(">I", sealed[22:26])
    return salt, iterations, mode


def seal_registry(key: RegistryKey, registry_bytes: bytes, rng=os.urandom) -> bytes:
    header = _registry_header(key)
    padder = padding.PKCS7(BLOCK_SIZE * 8).padder()
    padded = padder.update(registry_bytes) + padder.finalize()
    if key.mode == REGISTRY_MODE_CBC:
        iv = rng(BLOCK_SIZE)
        enc = Cipher(algorithms.AES(key.enc_key), modes.CBC(iv)).encryptor()
        body = iv + enc.update(padded) + enc.finalize()
    else:
        enc = Cipher(algorithms.AES(key.enc_key), modes.ECB()).encryptor()
        body = enc.update(padded) + enc.finalize()
    mac = _mac(key.mac_key, hashes.SHA256(), header + body)
    return header + body + mac


def open_registry(key: RegistryKey, sealed: bytes) -> bytes:
    salt, iterations, mode = parse_registry_header(sealed)
    if len(sealed) < 26 + 32:
        raise WrongPassword("sealed registry truncated")
    mac = sealed[-32:]
    signed = sealed[:-32]
    expected = _mac(key.mac_key, hashes.SHA256(), signed)
    if not _hmac.compare_digest(mac, expected):
        raise WrongPassword("registry MAC mismatch")
    body = signed[26:]
    if mode == REGISTRY_MODE_CBC:
        iv, ciphertext = body[:BLOCK_SIZE], body[BLOCK_SIZE:]
        dec = Cipher(algorithms.AES(key.enc_key), modes.CBC(iv)).decryptor()
    else:
        ciphertext = body
        dec = Cipher(algorithms.AES(key.enc_key), modes.ECB()).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = padding.PKCS7(BLOCK_SIZE * 8).unpadder()
    return unpadder.update(padded) + unpadder.finalize()
