import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from threshpet.errors import InsufficientSharesError, ParameterError
from threshpet.group import SECP256K1, TOY
from threshpet.vss import (
    FeldmanCommitment,
    ShamirShare,
    consistent_secrets,
    lagrange_coefficients,
    reconstruct,
    reconstruct_in_exponent,
    share,
    verify_share,
)


def test_frozen_example():
    shares, comm = share(TOY, 5, 2, 3, None, coefficients=[3])
    assert [(s.index, s.value) for s in shares] == [(1, 8), (2, 0), (3, 3)]
    assert [(x, (5 + 3 * x) % 11) for x in (1, 2, 3)] == [(1, 8), (2, 0), (3, 3)]
    assert comm.public == TOY.generator ** 5
    assert lagrange_coefficients(TOY, [1, 3]) == [7, 5]
    assert (3 * pow(2, -1, 11) % 11, 1 * pow(-2, -1, 11) % 11) == (7, 5)
    assert (7 * 8 + 5 * 3) % 11 == 5
    assert reconstruct(TOY, [shares[0], shares[2]], 2) == 5
    pts = [(s.index, TOY.generator ** s.value) for s in shares]
    assert reconstruct_in_exponent(TOY, pts, 2) == TOY.generator ** 5


def test_degree_zero_and_single_index():
    shares, _ = share(TOY, 7, 1, 4, random.Random(0))
    assert all(s.value == 7 for s in shares)
    assert lagrange_coefficients(TOY, [4]) == [1]
    pt = TOY.generator ** 3
    assert reconstruct_in_exponent(TOY, [(2, pt)], 1) == pt


def test_parameter_checks():
    with pytest.raises(ParameterError):
        share(TOY, 1, 4, 3, random.Random(0))
    with pytest.raises(ParameterError):
        share(TOY, 1, 0, 3, random.Random(0))
    with pytest.raises(ParameterError):
        share(TOY, 1, 2, 11, random.Random(0))
    with pytest.raises(ParameterError):
        share(TOY, 1, 2, 3, None, coefficients=[1, 2])
    with pytest.raises(ParameterError):
        ShamirShare(0, 1)
    with pytest.raises(ParameterError):
        lagrange_coefficients(TOY, [1, 12])
    with pytest.raises(ParameterError):
        reconstruct(TOY, [ShamirShare(1, 2), ShamirShare(1, 3)], 2)


def test_insufficient_shares():
    shares, _ = share(TOY, 5, 3, 5, random.Random(1))
    with pytest.raises(InsufficientSharesError):
        reconstruct(TOY, shares[:2], 3)
    with pytest.raises(InsufficientSharesError):
        reconstruct_in_exponent(TOY, [(s.index, TOY.generator) for s in shares[:2]], 3)


def test_completeness_every_subset_exhaustive_toy():
    rng = random.Random(2)
    for k in range(1, 6):
        for t in range(1, k + 1):
            for secret in range(11):
                shares, comm = share(TOY, secret, t, k, rng)
                assert all(verify_share(s, comm) for s in shares)
                for size in range(t, k + 1):
                    for subset in itertools.combinations(shares, size):
                        assert reconstruct(TOY, subset, t) == secret


def test_single_bit_corruption_detected():
    rng = random.Random(3)
    for group in (TOY, SECP256K1):
        for _ in range(5 if group is TOY else 2):
            shares, comm = share(group, group.random_scalar(rng), 3, 5, rng)
            for s in shares:
                for bit in range(group.order.bit_length()):
                    bad = s.value ^ (1 << bit)
                    assert not verify_share(ShamirShare(s.index, bad), comm)


def test_t_minus_one_shares_leave_every_secret_possible():
    rng = random.Random(4)
    for t in range(2, 5):
        shares, _ = share(TOY, rng.randrange(11), t, 5, rng)
        assert consistent_secrets(TOY, shares[: t - 1], t) == list(range(11))
        assert len(consistent_secrets(TOY, shares[:t], t)) == 1


def test_swapped_indices_rejected_exhaustively():
    # over every toy polynomial of degree 1 with distinct f(1) != f(2)
    for a0 in range(11):
        for a1 in range(1, 11):
            shares, comm = share(TOY, a0, 2, 2, None, coefficients=[a1])
            s1, s2 = shares
            assert not verify_share(ShamirShare(1, s2.value), comm)
            assert not verify_share(ShamirShare(2, s1.value), comm)


def test_reconstruct_agrees_with_exponent_reconstruct():
    rng = random.Random(5)
    for _ in range(200):
        k = rng.randint(1, 6)
        t = rng.randint(1, k)
        shares, comm = share(TOY, rng.randrange(11), t, k, rng)
        subset = rng.sample(shares, rng.randint(t, k))
        pts = [(s.index, TOY.generator ** s.value) for s in subset]
        assert reconstruct_in_exponent(TOY, pts, t) == TOY.generator ** reconstruct(TOY, subset, t)
        assert reconstruct_in_exponent(TOY, pts, t) == comm.public


def test_commitment_combine_and_hex():
    rng = random.Random(6)
    sa, ca = share(SECP256K1, 10, 2, 3, rng)
    sb, cb = share(SECP256K1, 20, 2, 3, rng)
    cc = ca.combine(cb)
    assert cc.public == SECP256K1.generator ** 30
    for x, y in zip(sa, sb):
        assert verify_share(ShamirShare(x.index, (x.value + y.value) % SECP256K1.order), cc)
    assert FeldmanCommitment.from_hex(SECP256K1, cc.to_hex()) == cc
    _, c3 = share(SECP256K1, 1, 3, 3, rng)
    with pytest.raises(ParameterError):
        ca.combine(c3)


@settings(max_examples=40, deadline=None)
@given(secret=st.integers(0, SECP256K1.order - 1), t=st.integers(1, 4), extra=st.integers(0, 3),
       seed=st.integers(0, 2**32))
def test_property_share_reconstruct_secp(secret, t, extra, seed):
    rng = random.Random(seed)
    shares, comm = share(SECP256K1, secret, t, t + extra, rng)
    rng.shuffle(shares)
    assert reconstruct(SECP256K1, shares, t) == secret
    assert verify_share(shares[0], comm)
