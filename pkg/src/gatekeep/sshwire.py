"""OpenSSH wire encoding for ed25519 user certificates.

Implements just enough of the SSH certificate format (the
ssh-ed25519-cert-v01@openssh.com key type) to emit certificates a stock
OpenSSH installation accepts, and to parse them back for independent
verification. All multi-byte integers are big-endian; composite values are
length-prefixed byte strings.
"""

from __future__ import annotations

import base64
import struct
from dataclasses import dataclass, field
from typing import Iterable

from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import MalformedKey

ED25519_KEY_TYPE = "ssh-ed25519"
ED25519_CERT_TYPE = "ssh-ed25519-cert-v01@openssh.com"
USER_CERT = 1
HOST_CERT = 2


def put_string(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def put_text(text: str) -> bytes:
    return put_string(text.encode("utf-8"))


def put_uint32(value: int) -> bytes:
    return struct.pack(">I", value)


def put_uint64(value: int) -> bytes:
    return struct.pack(">Q", value)


class Reader:
    def __init__(self, blob: bytes):
        self._blob = blob
        self._pos = 0

    def string(self) -> bytes:
        if self._pos + 4 > len(self._blob):
            raise MalformedKey("truncated string length")
        (length,) = struct.unpack_from(">I", self._blob, self._pos)
        self._pos += 4
        if self._pos + length > len(self._blob):
            raise MalformedKey("truncated string body")
        out = self._blob[self._pos:self._pos + length]
        self._pos += length
        return out

    def text(self) -> str:
        return self.string().decode("utf-8")

    def uint32(self) -> int:
        if self._pos + 4 > len(self._blob):
            raise MalformedKey("truncated uint32")
        (value,) = struct.unpack_from(">I", self._blob, self._pos)
        self._pos += 4
        return value

    def uint64(self) -> int:
        if self._pos + 8 > len(self._blob):
            raise MalformedKey("truncated uint64")
        (value,) = struct.unpack_from(">Q", self._blob, self._pos)
        self._pos += 8
        return value

    def at_end(self) -> bool:
        return self._pos == len(self._blob)


def pack_name_list(names: Iterable[str]) -> bytes:
    """Principals: a string containing concatenated string-wrapped names."""
    return b"".join(put_text(name) for name in names)


def unpack_name_list(blob: bytes) -> list[str]:
    reader = Reader(blob)
    names = []
    while not reader.at_end():
        names.append(reader.text())
    return names


def pack_option_map(options: dict[str, str]) -> bytes:
    """Critical options / extensions: (name, data) pairs sorted by name.

    Flag options carry empty data; valued options wrap the value in a
    further string layer, as OpenSSH does.
    """
    out = b""
    for name in sorted(options):
        value = options[name]
        out += put_text(name)
        out += put_string(put_text(value) if value else b"")
    return out


def unpack_option_map(blob: bytes) -> dict[str, str]:
    reader = Reader(blob)
    options: dict[str, str] = {}
    while not reader.at_end():
        name = reader.text()
        data = reader.string()
        options[name] = Reader(data).text() if data else ""
    return options


def encode_ed25519_public(key: Ed25519PublicKey) -> bytes:
    from cryptography.hazmat.primitives import serialization

    raw = key.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return put_text(ED25519_KEY_TYPE) + put_string(raw)


def decode_ed25519_public(blob: bytes) -> Ed25519PublicKey:
    reader = Reader(blob)
    key_type = reader.text()
    if key_type != ED25519_KEY_TYPE:
        raise MalformedKey(f"unsupported key type {key_type!r}")
    raw = reader.string()
    if len(raw) != 32:
        raise MalformedKey("ed25519 public key must be 32 bytes")
    return Ed25519PublicKey.from_public_bytes(raw)


def parse_openssh_public_key(text: str) -> tuple[Ed25519PublicKey, str]:
    """Parse one line of authorized_keys-style 'ssh-ed25519 AAAA... comment'."""
    parts = text.strip().split()
    if len(parts) < 2:
        raise MalformedKey("expected '<type> <base64> [comment]'")
    key_type, b64 = parts[0], parts[1]
    comment = " ".join(parts[2:]) if len(parts) > 2 else ""
    if key_type != ED25519_KEY_TYPE:
        raise MalformedKey(f"unsupported key type {key_type!r}")
    try:
        blob = base64.b64decode(b64.encode("ascii"), validate=True)
    except Exception:
        raise MalformedKey("invalid base64 key material")
    key = decode_ed25519_public(blob)
    return key, comment


def render_openssh_public_key(key: Ed25519PublicKey, comment: str = "") -> str:
    blob = encode_ed25519_public(key)
    line = f"{ED25519_KEY_TYPE} {base64.b64encode(blob).decode('ascii')}"
    return f"{line} {comment}".strip()


@dataclass
class CertificateBlob:
    """Decoded view of an ed25519 user certificate."""

    nonce: bytes
    public_key: Ed25519PublicKey
    serial: int
    cert_type: int
    key_id: str
    principals: list[str]
    valid_after: int
    valid_before: int
    critical_options: dict[str, str] = field(default_factory=dict)
    extensions: dict[str, str] = field(default_factory=dict)
    reserved: bytes = b""
    signature_key: bytes = b""      # encoded CA public key blob
    signature: bytes = b""
    signed_section: bytes = b""     # everything the CA signed

    def ca_public_key(self) -> Ed25519PublicKey:
        return decode_ed25519_public(self.signature_key)


def build_certificate(
    nonce: bytes,
    user_key: Ed25519PublicKey,
    serial: int,
    key_id: str,
    principals: list[str],
    valid_after: int,
    valid_before: int,
    ca_key: Ed25519PrivateKey,
    critical_options: dict[str, str] | None = None,
    extensions: dict[str, str] | None = None,
) -> bytes:
    """Assemble and sign a user certificate; returns the raw cert blob."""
    from cryptography.hazmat.primitives import serialization

    user_raw = user_key.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    body = put_text(ED25519_CERT_TYPE)
    body += put_string(nonce)
    body += put_string(user_raw)
    body += put_uint64(serial)
    body += put_uint32(USER_CERT)
    body += put_text(key_id)
    body += put_string(pack_name_list(principals))
    body += put_uint64(valid_after)
    body += put_uint64(valid_before)
    body += put_string(pack_option_map(critical_options or {}))
    body += put_string(pack_option_map(extensions or {}))
    body += put_string(b"")                                  # reserved
    body += put_string(encode_ed25519_public(ca_key.public_key()))
    signature = ca_key.sign(body)
    sig_blob = put_text(ED25519_KEY_TYPE) + put_string(signature)
    return body + put_string(sig_blob)


def parse_certificate(blob: bytes) -> CertificateBlob:
    reader = Reader(blob)
    cert_type_name = reader.text()
    if cert_type_name != ED25519_CERT_TYPE:
        raise MalformedKey(f"unsupported certificate type {cert_type_name!r}")
    nonce = reader.string()
    user_raw = reader.string()
    if len(user_raw) != 32:
        raise MalformedKey("certificate public key must be 32 bytes")
    serial = reader.uint64()
    cert_type = reader.uint32()
    key_id = reader.text()
    principals = unpack_name_list(reader.string())
    valid_after = reader.uint64()
    valid_before = reader.uint64()
    critical_options = unpack_option_map(reader.string())
    extensions = unpack_option_map(reader.string())
    reserved = reader.string()
    signature_key = reader.string()
    signed_len = reader._pos
    sig_blob = reader.string()
    if not reader.at_end():
        raise MalformedKey("trailing bytes after signature")
    sig_reader = Reader(sig_blob)
    sig_type = sig_reader.text()
    if sig_type != ED25519_KEY_TYPE:
        raise MalformedKey(f"unsupported signature type {sig_type!r}")
    signature = sig_reader.string()
    return CertificateBlob(
        nonce=nonce,
        public_key=Ed25519PublicKey.from_public_bytes(user_raw),
        serial=serial,
        cert_type=cert_type,
        key_id=key_id,
        principals=principals,
        valid_after=valid_after,
        valid_before=valid_before,
        critical_options=critical_options,
        extensions=extensions,
        reserved=reserved,
        signature_key=signature_key,
        signature=signature,
        signed_section=blob[:signed_len],
    )


def render_certificate_file(blob: bytes, comment: str = "") -> str:
    line = f"{ED25519_CERT_TYPE} {base64.b64encode(blob).decode('ascii')}"
    return f"{line} {comment}".strip() + "\n"


def parse_certificate_file(text: str) -> bytes:
    parts = text.strip().split()
    if len(parts) < 2 or parts[0] != ED25519_CERT_TYPE:
        raise MalformedKey("expected an ed25519 user certificate line")
    try:
        return base64.b64decode(parts[1].encode("ascii"), validate=True)
    except Exception:
        raise MalformedKey("invalid base64 certificate body")
