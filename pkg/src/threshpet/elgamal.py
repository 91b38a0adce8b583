"""ElGamal over a prime-order group, plus a hybrid mode for byte payloads.

Plain ElGamal maps a group element ``m`` to ``(g^y, m * pk^y)``.  Chain
payloads (testimony, identity shares) are bytes, so they travel in the
hybrid mode instead: ``g^y`` encapsulates a key derived from ``pk^y`` via
HKDF-SHA256, and the payload is sealed with ChaCha20-Poly1305.
"""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthenticationError, DecodeError, DegenerateKeyError
from .group import Group, GroupElement

# algorithm identifier carried in every hybrid ciphertext
HYBRID_ALG_ID = 0x01
HYBRID_ALG_NAME = "hkdf-sha256+chacha20poly1305"
NONCE_SIZE = 12


@dataclass(frozen=True)
class ElGamalCiphertext:
    c1: GroupElement
    c2: GroupElement


@dataclass(frozen=True)
class HybridCiphertext:
    kem: GroupElement
    nonce: bytes
    body: bytes
    alg: int = HYBRID_ALG_ID

    def encode(self) -> bytes:
        out = bytearray([self.alg])
        for field in (self.kem.encode(), self.nonce, self.body):
            out += len(field).to_bytes(4, "big") + field
        return bytes(out)

    def hex(self) -> str:
        return self.encode().hex()

    @classmethod
    def decode(cls, group: Group, data: bytes) -> "HybridCiphertext":
        if not data:
            raise DecodeError("empty ciphertext")
        alg, pos, fields = data[0], 1, []
        for _ in range(3):
            if pos + 4 > len(data):
                raise DecodeError("truncated ciphertext")
            size = int.from_bytes(data[pos:pos + 4], "big")
            pos += 4
            if pos + size > len(data):
                raise DecodeError("truncated ciphertext")
            fields.append(data[pos:pos + size])
            pos += size
        if pos != len(data):
            raise DecodeError("trailing bytes in ciphertext")
        return cls(group.decode(fields[0]), fields[1], fields[2], alg)

    @classmethod
    def from_hex(cls, group: Group, text: str) -> "HybridCiphertext":
        try:
            raw = bytes.fromhex(text)
        except (ValueError, TypeError) as exc:
            raise DecodeError("bad hex ciphertext") from exc
        return cls.decode(group, raw)


def _check_key(pk: GroupElement):
    if pk.is_identity:
        raise DegenerateKeyError()


def encrypt(pk: GroupElement, m: GroupElement, rng, y: int | None = None) -> ElGamalCiphertext:
    """Encrypt ``m`` under ``pk``.  ``y`` overrides the randomness (tests only)."""
    _check_key(pk)
    group = pk.group
    if y is None:
        y = group.random_scalar(rng, nonzero=True)
    return ElGamalCiphertext(group.generator ** y, m * pk ** y)


def decrypt(s: int, ct: ElGamalCiphertext) -> GroupElement:
    return ct.c2 / ct.c1 ** s


def _derive_key(kem: GroupElement, shared: GroupElement) -> bytes:
    kdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
               info=b"threshpet hybrid v1|" + kem.encode())
    return kdf.derive(shared.encode())


def _aad(alg: int, kem: GroupElement) -> bytes:
    return bytes([alg]) + kem.encode()


def hybrid_encrypt(pk: GroupElement, payload: bytes, rng) -> HybridCiphertext:
    _check_key(pk)
    group = pk.group
    y = group.random_scalar(rng, nonzero=True)
    kem = group.generator ** y
    key = _derive_key(kem, pk ** y)
    nonce = rng.randbytes(NONCE_SIZE)
    body = ChaCha20Poly1305(key).encrypt(nonce, bytes(payload), _aad(HYBRID_ALG_ID, kem))
    return HybridCiphertext(kem, nonce, body)


def hybrid_decrypt(s: int, ct: HybridCiphertext) -> bytes:
    if ct.alg != HYBRID_ALG_ID or len(ct.nonce) != NONCE_SIZE:
        raise AuthenticationError()
    key = _derive_key(ct.kem, ct.kem ** s)
    try:
        return ChaCha20Poly1305(key).decrypt(ct.nonce, ct.body, _aad(ct.alg, ct.kem))
    except InvalidTag:
        raise AuthenticationError() from None
