"""Encrypted filename codec.

Each path segment is encrypted independently (AES-ECB + PKCS#5 padding, so
both sides derive identical shared-folder names) and encoded in a modified
Base64 alphabet where '/' becomes '-'. Protocol files are distinguishable
because '_' is outside the alphabet.
"""

from __future__ import annotations

import base64
import re

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import BadPadding, InvalidName, MalformedEncoding

_ALPHABET_RE = re.compile(r"\A[A-Za-z0-9+\-]*={0,2}\Z")
_BLOCK = 16


def encode_bytes(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii").replace("/", "-")


def decode_bytes(text: str) -> bytes:
    if not _ALPHABET_RE.match(text) or len(text) % 4 != 0:
        raise MalformedEncoding(f"not a valid encoded name: {text!r}")
    raw = text.replace("-", "/")
    try:
        data = base64.b64decode(raw, validate=True)
    except Exception as exc:
        raise MalformedEncoding(str(exc)) from exc
    # reject non-canonical padding bits so decode is the exact inverse
    if base64.b64encode(data).decode("ascii") != raw:
        raise MalformedEncoding("non-canonical padding")
    return data


def _validate_name(name: str) -> bytes:
    if not name:
        raise InvalidName("empty name")
    if "/" in name or "\\" in name or "\x00" in name:
        raise InvalidName(f"name contains a path separator: {name!r}")
    try:
        return name.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise InvalidName(str(exc)) from exc


def encrypt_name(key, name: str) -> str:
    """Deterministic per (key, name): AES-ECB over the padded UTF-8 name."""
    raw = _validate_name(name)
    padder = padding.PKCS7(_BLOCK * 8).padder()
    padded = padder.update(raw) + padder.finalize()
    enc = Cipher(algorithms.AES(key.secret), modes.ECB()).encryptor()
    return encode_bytes(enc.update(padded) + enc.finalize())


def decrypt_name(key, text: str) -> str:
    data = decode_bytes(text)
    if not data or len(data) % _BLOCK != 0:
        raise BadPadding("ciphertext is not a whole number of blocks")
    dec = Cipher(algorithms.AES(key.secret), modes.ECB()).decryptor()
    padded = dec.update(data) + dec.finalize()
    unpadder = padding.PKCS7(_BLOCK * 8).unpadder()
    try:
        raw = unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise BadPadding(str(exc)) from exc
    try:
        name = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        # wrong key: garbage plaintext, treat the same as bad padding
        raise BadPadding(str(exc)) from exc
    if not name or "/" in name or "\\" in name or "\x00" in name:
        raise BadPadding("decrypted name is not a valid path segment")
    return name


def encrypt_path(key, rel_path: str) -> str:
    """Encrypt every segment of a '/'-joined relative path."""
    return "/".join(encrypt_name(key, seg) for seg in rel_path.split("/"))


def decrypt_path(key, rel_path: str) -> str:
    return "/".join(decrypt_name(key, seg) for seg in rel_path.split("/"))
