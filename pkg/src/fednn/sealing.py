"""Content encryption shared by clients so the relaying server reads nothing.

One sealed record wraps one serialized (encoded key, token) pair in a
hybrid public-key envelope: an ephemeral X25519 exchange derives a
one-off ChaCha20-Poly1305 key, so sealing the same plaintext twice
yields unrelated ciphertexts and any tampering fails authentication.
The scheme sits behind a small registry so alternatives can be plugged
in without touching the protocol code.
"""

import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from fednn.errors import AuthenticationError, FormatError, TruncatedStreamError

SCHEME_X25519_CHACHA = 1

_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class KeyPair:
    """Recipient key material for one sealing scheme."""

    public_key: bytes
    private_key: bytes
    scheme: int = SCHEME_X25519_CHACHA


@dataclass(frozen=True)
class SealedRecord:
    """One encrypted record: scheme id, ephemeral material, ciphertext."""

    scheme: int
    material: bytes
    ciphertext: bytes


class _HybridX25519ChaCha:
    """Ephemeral X25519 + HKDF-SHA256 + ChaCha20-Poly1305."""

    scheme_id = SCHEME_X25519_CHACHA
    material_len = 32 + 12  # ephemeral public key + AEAD nonce
    overhead = 16  # Poly1305 tag

    def keygen(self, seed: int) -> KeyPair:
        digest = hashlib.sha256(b"fednn-keygen-v1:" + str(seed).encode()).digest()
        priv = X25519PrivateKey.from_private_bytes(digest)
        return KeyPair(
            public_key=priv.public_key().public_bytes(
                serialization.Encoding.Raw, serialization.PublicFormat.Raw
            ),
            private_key=digest,
            scheme=self.scheme_id,
        )

    def _derive(self, shared, eph_pub, recip_pub):
        return HKDF(
            algorithm=hashes.SHA256(),
            length=32,
            salt=None,
            info=b"fednn-seal-v1" + eph_pub + recip_pub,
        ).derive(shared)

    def seal(self, public_key: bytes, plaintext: bytes) -> SealedRecord:
        eph = X25519PrivateKey.generate()
        eph_pub = eph.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        shared = eph.exchange(X25519PublicKey.from_public_bytes(public_key))
        key = self._derive(shared, eph_pub, public_key)
        nonce = os.urandom(12)
        ct = ChaCha20Poly1305(key).encrypt(nonce, plaintext, None)
        return SealedRecord(self.scheme_id, eph_pub + nonce, ct)

    def open(self, private_key: bytes, record: SealedRecord) -> bytes:
        if len(record.material) != self.material_len:
            raise FormatError("sealed record material has wrong length")
        eph_pub, nonce = record.material[:32], record.material[32:]
        priv = X25519PrivateKey.from_private_bytes(private_key)
        recip_pub = priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = self._derive(shared, eph_pub, recip_pub)
        try:
            return ChaCha20Poly1305(key).decrypt(nonce, record.ciphertext, None)
        except InvalidTag as exc:
            raise AuthenticationError("sealed record failed authentication") from exc


SCHEMES = {SCHEME_X25519_CHACHA: _HybridX25519ChaCha()}


def _scheme(scheme_id):
    try:
        return SCHEMES[scheme_id]
    except KeyError:
        raise FormatError("unknown sealing scheme %d" % scheme_id) from None


def keygen(seed: int, scheme: int = SCHEME_X25519_CHACHA) -> KeyPair:
    """Deterministic key pair for a seed (reproducible test setups)."""
    return _scheme(scheme).keygen(seed)


def seal_record(keypair_or_public, plaintext: bytes) -> SealedRecord:
    """Encrypt one record under the shared public key; fresh nonce per call."""
    if len(plaintext) == 0:
        raise ValueError("refusing to seal an empty record")
    if isinstance(keypair_or_public, KeyPair):
        scheme = _scheme(keypair_or_public.scheme)
        return scheme.seal(keypair_or_public.public_key, plaintext)
    return _scheme(SCHEME_X25519_CHACHA).seal(keypair_or_public, plaintext)


def open_record(keypair_or_private, record: SealedRecord) -> bytes:
    """Decrypt one record; tampering or a wrong key raises, never garbage."""
    scheme = _scheme(record.scheme)
    if isinstance(keypair_or_private, KeyPair):
        return scheme.open(keypair_or_private.private_key, record)
    return scheme.open(keypair_or_private, record)


def sealed_to_bytes(record: SealedRecord) -> bytes:
    """Self-delimiting wire form: u32 length, u8 scheme, material, ciphertext."""
    body = struct.pack("<B", record.scheme) + record.material + record.ciphertext
    return _LEN.pack(len(body)) + body


def read_sealed(data: bytes, offset: int = 0):
    """Parse one wire record at ``offset``; returns (record, next_offset)."""
    if len(data) - offset < _LEN.size:
        raise TruncatedStreamError("sealed record length prefix truncated")
    (body_len,) = _LEN.unpack_from(data, offset)
    start = offset + _LEN.size
    if body_len < 1 or len(data) - start < body_len:
        raise TruncatedStreamError("sealed record body truncated")
    scheme_id = data[start]
    scheme = _scheme(scheme_id)
    material_end = start + 1 + scheme.material_len
    if material_end > start + body_len:
        raise FormatError("sealed record shorter than scheme material")
    record = SealedRecord(
        scheme=scheme_id,
        material=bytes(data[start + 1 : material_end]),
        ciphertext=bytes(data[material_end : start + body_len]),
    )
    return record, start + body_len


def split_sealed_stream(data: bytes):
    """All records of a concatenated wire stream, in order."""
    records = []
    offset = 0
    while offset < len(data):
        record, offset = read_sealed(data, offset)
        records.append(record)
    return records
