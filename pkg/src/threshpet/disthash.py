"""Duplicate-detection hash ``h_P(u) = g_P ** (k_P * u)`` evaluated by rabbits.

``k_P`` and ``u`` are both Shamir-shared among the rabbits.  One Beaver
multiplication turns shares of ``u`` and ``k_P`` into shares ``z_i`` of
``k_P * u``; each participant publishes only ``g_P ** z_i`` and the output
is assembled in the exponent.  The openings ``d = u - a`` and
``e = k_P - b`` are masked by the triple and reveal nothing on their own.

Triples come from a trusted dealer at setup.  That is a stated trust
assumption, not a protocol step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import (
    InsufficientParticipantsError,
    InsufficientTriplesError,
    ParameterError,
    SessionMismatchError,
    TripleReuseError,
)
from .group import Group, GroupElement
from .vss import (
    FeldmanCommitment,
    ShamirShare,
    check_params,
    reconstruct,
    reconstruct_in_exponent,
    share,
)

HASH_GENERATOR_TAG = b"petition-hash"


@dataclass(frozen=True)
class HashKeyShare:
    rabbit: int
    share: ShamirShare
    commitment: FeldmanCommitment


@dataclass(frozen=True)
class TripleShare:
    triple_id: int
    a: ShamirShare
    b: ShamirShare
    c: ShamirShare


@dataclass(frozen=True)
class BeaverTriple:
    triple_id: int
    a_shares: tuple[ShamirShare, ...]
    b_shares: tuple[ShamirShare, ...]
    c_shares: tuple[ShamirShare, ...]

    def for_rabbit(self, i: int) -> TripleShare:
        return TripleShare(self.triple_id, self.a_shares[i - 1], self.b_shares[i - 1], self.c_shares[i - 1])


def hash_generator(group: Group, petition_id: bytes) -> GroupElement:
    return group.hash_to_group(HASH_GENERATOR_TAG, petition_id)


def hash_setup(group: Group, t: int, k: int, petition_id: bytes, rng, key: int | None = None):
    """Share a fresh nonzero hash key among ``k`` rabbits.

    The key is the sum of one random sharing per rabbit, so no single
    party ever knows it.  ``key`` forces the value (tests only); a forced
    zero is ignored and a key is sampled instead.

    Returns ``(key_shares, g_P)``.
    """
    check_params(group, t, k)
    q = group.order
    if key is not None and key % q:
        shares, comm = share(group, key, t, k, rng)
    else:
        while True:
            parts = [share(group, group.random_scalar(rng), t, k, rng) for _ in range(k)]
            values = [sum(p[0][r].value for p in parts) % q for r in range(k)]
            comm = parts[0][1]
            for _, c in parts[1:]:
                comm = comm.combine(c)
            shares = [ShamirShare(r + 1, values[r]) for r in range(k)]
            if not comm.public.is_identity:
                break
    key_shares = [HashKeyShare(s.index, s, comm) for s in shares]
    return key_shares, hash_generator(group, petition_id)


def triple_gen(group: Group, t: int, k: int, rng, triple_id: int = 0,
               a: int | None = None, b: int | None = None) -> BeaverTriple:
    check_params(group, t, k)
    q = group.order
    a = group.random_scalar(rng) if a is None else a % q
    b = group.random_scalar(rng) if b is None else b % q
    c = a * b % q
    a_sh, _ = share(group, a, t, k, rng)
    b_sh, _ = share(group, b, t, k, rng)
    c_sh, _ = share(group, c, t, k, rng)
    return BeaverTriple(triple_id, tuple(a_sh), tuple(b_sh), tuple(c_sh))


class TriplePool:
    """Dealer-provisioned triples; each id is handed out at most once."""

    def __init__(self, triples=()):
        self._triples = {tr.triple_id: tr for tr in triples}
        self.consumed: set[int] = set()

    def __len__(self):
        return len(self._triples) - len(self.consumed & set(self._triples))

    def claim(self) -> BeaverTriple:
        for tid in sorted(self._triples):
            if tid not in self.consumed:
                self.consumed.add(tid)
                return self._triples[tid]
        raise InsufficientTriplesError()


@dataclass
class HashEvalInput:
    """One rabbit's private inputs to an evaluation session."""

    session_id: str
    rabbit: int
    u_share: ShamirShare
    key_share: HashKeyShare
    triple: TripleShare


@dataclass
class HashEvalSession:
    session_id: str
    triple_id: int
    participants: list[int]
    d: int | None = None
    e: int | None = None
    partials: list[tuple[int, GroupElement]] = field(default_factory=list)
    output: GroupElement | None = None


def open_masks(group: Group, inp: HashEvalInput) -> tuple[int, int]:
    """The participant's share of ``d = u - a`` and ``e = k_P - b``."""
    q = group.order
    return ((inp.u_share.value - inp.triple.a.value) % q,
            (inp.key_share.share.value - inp.triple.b.value) % q)


def product_share(group: Group, triple: TripleShare, d: int, e: int) -> int:
    """Share of ``k_P * u``: ``c_i + d*b_i + e*a_i + d*e``."""
    q = group.order
    return (triple.c.value + d * triple.b.value + e * triple.a.value + d * e) % q


def partial_output(group: Group, g_P: GroupElement, triple: TripleShare, d: int, e: int) -> GroupElement:
    return g_P ** product_share(group, triple, d, e)


def run_hash_session(group: Group, g_P: GroupElement, t: int, inputs, session_id: str,
                     consumed: set) -> HashEvalSession:
    """Run one evaluation among the rabbits in ``inputs`` (all in-process).

    ``consumed`` is the shared set of spent triple ids; the triple used here
    is added to it.
    """
    inputs = sorted(inputs, key=lambda inp: inp.rabbit)
    if len(inputs) < t:
        raise InsufficientParticipantsError()
    if any(inp.session_id != session_id for inp in inputs):
        raise SessionMismatchError()
    if len({inp.rabbit for inp in inputs}) != len(inputs):
        raise ParameterError("duplicate participant")
    triple_ids = {inp.triple.triple_id for inp in inputs}
    if len(triple_ids) != 1:
        raise SessionMismatchError("participants hold different triples")
    (tid,) = triple_ids
    if tid in consumed:
        raise TripleReuseError()
    consumed.add(tid)

    session = HashEvalSession(session_id, tid, [inp.rabbit for inp in inputs])
    openings = [(inp.rabbit, open_masks(group, inp)) for inp in inputs]
    session.d = reconstruct(group, [ShamirShare(i, de[0]) for i, de in openings], t)
    session.e = reconstruct(group, [ShamirShare(i, de[1]) for i, de in openings], t)
    session.partials = [
        (inp.rabbit, partial_output(group, g_P, inp.triple, session.d, session.e)) for inp in inputs
    ]
    session.output = reconstruct_in_exponent(group, session.partials, t)
    return session


def dist_hash_eval(group: Group, g_P: GroupElement, t: int, inputs, session_id: str,
                   consumed: set) -> GroupElement:
    return run_hash_session(group, g_P, t, inputs, session_id, consumed).output


def local_hash_oracle(u: int, k_P: int, g_P: GroupElement) -> GroupElement:
    """Centralised ``h_P``; only for tests that know the key."""
    return g_P ** (k_P * u)
