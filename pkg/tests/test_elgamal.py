import os
import random

import pytest

from threshpet.elgamal import (
    ElGamalCiphertext,
    HybridCiphertext,
    decrypt,
    encrypt,
    hybrid_decrypt,
    hybrid_encrypt,
)
from threshpet.errors import AuthenticationError, DecodeError, DegenerateKeyError
from threshpet.group import SECP256K1, TOY

BACKENDS = pytest.mark.parametrize("group", [TOY, SECP256K1], ids=["toy", "secp256k1"])


def el(x):
    return TOY.decode(bytes([x]))


def test_toy_encrypt_fixed_randomness():
    # pk = 12 is g^10 (2^10 mod 23); the y = 3 ciphertext by hand
    assert pow(2, 10, 23) == 12 and pow(2, 6, 23) == 18
    ct = encrypt(el(12), el(4), None, y=3)
    assert (ct.c1.raw, ct.c2.raw) == (8, 4 * pow(12, 3, 23) % 23) == (8, 12)
    ct = encrypt(TOY.generator ** 6, el(4), None, y=3)
    assert (ct.c1.raw, ct.c2.raw) == (8, 4 * pow(18, 3, 23) % 23)


def test_toy_decrypt_example():
    assert pow(8, 7, 23) == 12 and pow(2, 7, 23) == 13
    assert decrypt(7, ElGamalCiphertext(el(8), el(2))).raw == 4


def test_zero_randomness_and_identity_c1():
    m = el(9)
    ct = encrypt(el(13), m, None, y=0)
    assert ct.c1.is_identity and ct.c2 == m
    assert decrypt(5, ElGamalCiphertext(TOY.identity, m)) == m


def test_rng_is_consulted():
    rng = random.Random(0)
    cts = {encrypt(el(13), el(4), rng).c1 for _ in range(40)}
    assert len(cts) > 1


@BACKENDS
def test_round_trip_and_wrong_key(group):
    rng = random.Random(3)
    wrong_ok = 0
    for _ in range(200 if group is TOY else 30):
        s = group.random_scalar(rng, nonzero=True)
        m = group.generator ** group.random_scalar(rng)
        ct = encrypt(group.generator ** s, m, rng)
        assert decrypt(s, ct) == m
        s2 = (s + 1 + rng.randrange(group.order - 1)) % group.order
        wrong_ok += decrypt(s2, ct) == m
    if group is SECP256K1:
        assert wrong_ok == 0


def test_identity_key_rejected():
    with pytest.raises(DegenerateKeyError):
        encrypt(TOY.identity, el(4), random.Random(0))
    with pytest.raises(DegenerateKeyError):
        hybrid_encrypt(SECP256K1.identity, b"x", random.Random(0))


@BACKENDS
def test_hybrid_round_trip(group):
    rng = random.Random(8)
    s = group.random_scalar(rng, nonzero=True)
    pk = group.generator ** s
    for payload in (b"", b"a", os.urandom(1 << 20)):
        ct = hybrid_encrypt(pk, payload, rng)
        assert hybrid_decrypt(s, ct) == payload
        assert hybrid_decrypt(s, HybridCiphertext.decode(group, ct.encode())) == payload


@BACKENDS
def test_hybrid_tamper_and_wrong_key(group):
    rng = random.Random(9)
    s = group.random_scalar(rng, nonzero=True)
    ct = hybrid_encrypt(group.generator ** s, b"testimony", rng)
    # every other key fails: y != 0 makes kem^s' differ from kem^s
    for s2 in range(group.order) if group is TOY else [s + 1, s - 1, 12345]:
        if s2 % group.order != s:
            with pytest.raises(AuthenticationError):
                hybrid_decrypt(s2, ct)
    for i in range(len(ct.body) * 8):
        body = bytearray(ct.body)
        body[i // 8] ^= 1 << (i % 8)
        with pytest.raises(AuthenticationError):
            hybrid_decrypt(s, HybridCiphertext(ct.kem, ct.nonce, bytes(body)))
    with pytest.raises(AuthenticationError):
        hybrid_decrypt(s, HybridCiphertext(ct.kem * group.generator, ct.nonce, ct.body))
    with pytest.raises(AuthenticationError):
        hybrid_decrypt(s, HybridCiphertext(ct.kem, bytes(12), ct.body))
    with pytest.raises(AuthenticationError):
        hybrid_decrypt(s, HybridCiphertext(ct.kem, ct.nonce, ct.body, alg=2))


def test_hybrid_decode_rejects_garbage():
    ct = hybrid_encrypt(TOY.generator, b"abc", random.Random(1))
    raw = ct.encode()
    for bad in (b"", raw[:-1], raw + b"\x00", raw[:3]):
        with pytest.raises(DecodeError):
            HybridCiphertext.decode(TOY, bad)
