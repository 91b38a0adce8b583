"""Key-generation ceremony.

Every key rabbit ``i`` picks a secret ``x[i, j]`` for every fragment
``j`` and Feldman-shares it among all ``k`` rabbits (itself included).
Fragment ``j`` is ``s_j = sum_i x[i, j]``; its public value is
``F_j = prod_i g^x[i, j]`` and the petition key is ``p = prod_j F_j``.
Nobody ever holds ``s_j`` until ``t`` rabbits pool their shares.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import (
    CeremonyError,
    DegenerateKeyError,
    FragmentVerificationError,
    InsufficientSharesError,
    ParameterError,
)
from .group import Group, GroupElement
from .vss import FeldmanCommitment, ShamirShare, check_params, reconstruct, share, verify_share


@dataclass
class FragmentContribution:
    rabbit: int
    fragment: int
    secret: int
    commitment: FeldmanCommitment
    outgoing_shares: list[ShamirShare]


@dataclass(frozen=True)
class KeyFragment:
    index: int
    value: int


@dataclass(frozen=True)
class PetitionPublicKey:
    p: GroupElement
    fragment_publics: tuple[GroupElement, ...]

    @property
    def n(self) -> int:
        return len(self.fragment_publics)

    def composed(self, m: int) -> GroupElement:
        """Key for fragments ``1..m``: the multi-threshold ``p_m``."""
        if not 1 <= m <= self.n:
            raise ParameterError(f"threshold {m} outside 1..{self.n}")
        return self.p.group.product(self.fragment_publics[:m])


def contribute(group: Group, i: int, j: int, t: int, k: int, rng, secret: int | None = None):
    check_params(group, t, k)
    if not 1 <= i <= k:
        raise ParameterError(f"rabbit index {i} outside 1..{k}")
    if j < 1:
        raise ParameterError("fragment index must be positive")
    if secret is None:
        secret = group.random_scalar(rng)
    shares, comm = share(group, secret, t, k, rng)
    return FragmentContribution(i, j, secret % group.order, comm, shares)


def verify_contributions(contributions) -> list[int]:
    """Return the rabbits whose outgoing shares fail their own commitment."""
    culprits = set()
    for c in contributions:
        if c.commitment.threshold < 1 or any(not verify_share(s, c.commitment) for s in c.outgoing_shares):
            culprits.add(c.rabbit)
    return sorted(culprits)


def aggregate_public(group: Group, commitments, k: int, n: int) -> PetitionPublicKey:
    """Combine the published ``(i, j) -> commitment`` map into the petition key.

    Rejects a key for which any composed prefix ``p_m`` is the identity:
    such a key cannot be encrypted to, and for ``m < n`` it would let the
    released suffix of fragments already decrypt the whole petition.  Also
    rejects ``p_m == p`` for ``m < n`` (a zero suffix sum), which would let
    fragments ``1..m`` alone open everything before the trigger.
    """
    missing = [(i, j) for i in range(1, k + 1) for j in range(1, n + 1) if (i, j) not in commitments]
    if missing:
        raise CeremonyError("incomplete ceremony", culprits=[i for i, _ in missing])
    publics = tuple(
        group.product(commitments[i, j].public for i in range(1, k + 1)) for j in range(1, n + 1)
    )
    prefixes, acc = [], group.identity
    for f in publics:
        acc = acc * f
        if acc.is_identity:
            raise DegenerateKeyError()
        prefixes.append(acc)
    if acc in prefixes[:-1]:
        raise DegenerateKeyError()
    return PetitionPublicKey(acc, publics)


def reconstruct_fragment(group: Group, j: int, share_sets, t: int, public_key: PetitionPublicKey,
                         commitments=None) -> KeyFragment:
    """Rebuild ``s_j`` from ``share_sets[i]``, the pooled shares of ``x[i, j]``.

    With ``commitments`` given, shares failing their commitment are dropped
    before interpolation, so one lying rabbit cannot poison the result.
    """
    if not share_sets:
        raise InsufficientSharesError()
    if commitments is not None:
        contributors = {i for (i, jj) in commitments if jj == j}
        if not contributors <= set(share_sets):
            raise InsufficientSharesError()
    total = 0
    for i, shares in sorted(share_sets.items()):
        shares = list(shares)
        if commitments is not None:
            shares = [s for s in shares if verify_share(s, commitments[i, j])]
        total += reconstruct(group, shares, t)
    value = total % group.order
    if group.generator ** value != public_key.fragment_publics[j - 1]:
        raise FragmentVerificationError()
    return KeyFragment(j, value)


@dataclass
class CeremonyTranscript:
    """The public record of a ceremony: all commitments and each rabbit's ack.

    An ack is the digest of the commitment set the rabbit checked its
    incoming shares against.
    """

    commitments: dict
    acks: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256(b"threshpet ceremony v1")
        for (i, j) in sorted(self.commitments):
            h.update(f"|{i},{j}:".encode())
            h.update(",".join(self.commitments[i, j].to_hex()).encode())
        return h.hexdigest()


@dataclass
class CeremonyReport:
    ok: bool
    problems: list[str]

    def __bool__(self):
        return self.ok


def verify_ceremony(header, transcript: CeremonyTranscript) -> CeremonyReport:
    """Recompute every public ceremony value and compare with ``header``.

    ``header`` needs ``group``, ``public_key``, ``n``, ``k`` and ``t``.
    """
    group, pk = header.group, header.public_key
    n, k, t = header.n, header.k, header.t
    problems = []
    comms = transcript.commitments
    expected = {(i, j) for i in range(1, k + 1) for j in range(1, n + 1)}
    if set(comms) != expected:
        problems.append("incomplete ceremony: contribution set does not cover all (rabbit, fragment) pairs")
    for key in sorted(expected & set(comms)):
        if comms[key].threshold != t:
            problems.append(f"contribution {key} commits to {comms[key].threshold} coefficients, expected {t}")
    if len(pk.fragment_publics) != n:
        problems.append(f"header lists {len(pk.fragment_publics)} fragment publics, expected {n}")
    elif not problems:
        for j in range(1, n + 1):
            f = group.product(comms[i, j].public for i in range(1, k + 1))
            if f != pk.fragment_publics[j - 1]:
                problems.append(f"fragment public F_{j} does not match its commitments")
    if pk.p != group.product(pk.fragment_publics):
        problems.append("public key is not the product of the fragment publics")
    acc = group.identity
    for m, f in enumerate(pk.fragment_publics, start=1):
        acc = acc * f
        if acc.is_identity:
            problems.append(f"composed key p_{m} is the identity")
            break
    if k >= 2:
        for j in range(1, n + 1):
            if len({i for (i, jj) in comms if jj == j}) < 2:
                problems.append(f"fragment {j} has fewer than two independent contributions")
    digest = transcript.digest()
    for i in range(1, k + 1):
        if transcript.acks.get(i) != digest:
            problems.append(f"rabbit {i} did not confirm the published commitments")
    return CeremonyReport(not problems, problems)


@dataclass
class Ceremony:
    """Result of an in-process ceremony (no network); used by tests and demos."""

    group: Group
    n: int
    k: int
    t: int
    contributions: dict
    public_key: PetitionPublicKey

    @property
    def commitments(self):
        return {key: c.commitment for key, c in self.contributions.items()}

    def transcript(self) -> CeremonyTranscript:
        tr = CeremonyTranscript(self.commitments)
        digest = tr.digest()
        tr.acks = {i: digest for i in range(1, self.k + 1)}
        return tr

    def held_by(self, rabbit: int) -> dict:
        """The shares rabbit ``rabbit`` stores: ``(i, j) -> ShamirShare``."""
        return {key: c.outgoing_shares[rabbit - 1] for key, c in self.contributions.items()}

    def share_sets(self, j: int, rabbits) -> dict:
        return {
            i: [self.contributions[i, j].outgoing_shares[r - 1] for r in rabbits]
            for i in range(1, self.k + 1)
        }

    def fragment(self, j: int, rabbits=None) -> KeyFragment:
        rabbits = list(rabbits) if rabbits is not None else list(range(1, self.t + 1))
        return reconstruct_fragment(self.group, j, self.share_sets(j, rabbits), self.t,
                                    self.public_key, self.commitments)

    @property
    def secret_key(self) -> int:
        return sum(c.secret for c in self.contributions.values()) % self.group.order


def run_ceremony(group: Group, n: int, k: int, t: int, rng, max_attempts: int = 64,
                 secrets=None) -> Ceremony:
    """Run every rabbit's contributions and aggregate, retrying a degenerate key.

    ``secrets`` optionally forces ``x[i, j]`` (tests only); a forced
    degenerate key is not retried.
    """
    if n < 1:
        raise ParameterError("n must be at least 1")
    check_params(group, t, k)
    for _ in range(max_attempts):
        contribs = {
            (i, j): contribute(group, i, j, t, k, rng, None if secrets is None else secrets[i, j])
            for i in range(1, k + 1) for j in range(1, n + 1)
        }
        culprits = verify_contributions(contribs.values())
        if culprits:
            raise CeremonyError("share verification failed", culprits)
        try:
            pk = aggregate_public(group, {key: c.commitment for key, c in contribs.items()}, k, n)
        except DegenerateKeyError:
            if secrets is not None:
                raise
            continue
        return Ceremony(group, n, k, t, contribs, pk)
    raise CeremonyError("could not produce a non-degenerate key")
