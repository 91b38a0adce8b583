"""Role state machines: author, dealer, validator, user, key rabbit, board.

Parties only talk through the network (see :mod:`threshpet.simnet`).  Each
handler consumes one envelope and may send more; nothing blocks.  Message
payloads are JSON objects with hex-encoded scalars and group elements.

Signing follows the flow user -> validator -> rabbits, user -> rabbits,
rabbits -> board.  The lowest-indexed live rabbit coordinates each
session: it runs the hash evaluation, appends the validation record,
collects fragment shares and appends the cyphersignature.  Sessions are
processed one at a time because the chain has a single writer.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

from .chain import Cyphersignature, PetitionParams, SignatureChain, ValidationRecord, replay
from .disthash import HashEvalInput, HashKeyShare, TripleShare, hash_generator, open_masks, partial_output, triple_gen
from .dkg import (
    CeremonyTranscript,
    PetitionPublicKey,
    aggregate_public,
    contribute,
    reconstruct_fragment,
)
from .elgamal import HybridCiphertext, hybrid_encrypt
from .errors import (
    CeremonyError,
    DegenerateKeyError,
    InsufficientSharesError,
    MalformedRecordError,
    ParameterError,
    SessionError,
    ThreshPetError,
)
from .group import Group
from .vss import FeldmanCommitment, ShamirShare, reconstruct, reconstruct_in_exponent, share, verify_share

log = logging.getLogger(__name__)

IDENTITY_TAG = b"identity"
BOARD = "board"
AUTHOR = "author"
DEALER = "dealer"

# message kinds that are rabbit-to-rabbit MPC traffic rather than signing-flow edges
MPC_KINDS = frozenset({
    "session-ready", "hash-open", "hash-open-reply", "hash-combine", "hash-partial",
    "fragment-request", "fragment-shares", "session-done", "session-abort",
})


def rabbit_id(i: int) -> str:
    return f"rabbit:{i}"


def validator_tag(validator: str) -> bytes:
    return b"validator:" + validator.encode()


def canonical_evidence(evidence: str) -> bytes:
    if not isinstance(evidence, str) or not evidence or evidence != evidence.strip() \
            or not evidence.isprintable():
        raise ParameterError("malformed evidence")
    return evidence.encode("utf-8")


def derive_identifier(group: Group, evidence: str) -> int:
    """Canonical ``u`` for a real-world identity, the same at every validator."""
    data = canonical_evidence(evidence)
    u = group.hash_to_scalar(IDENTITY_TAG, data)
    counter = 0
    while u == 0:
        counter += 1
        u = group.hash_to_scalar(IDENTITY_TAG, data + b"#" + str(counter).encode())
    return u


def session_hash(group: Group, validator: str, p_u: bytes) -> int:
    """``h_V(p_U)``."""
    return group.hash_to_scalar(validator_tag(validator), p_u)


def digest_hex(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"|")
    return h.hexdigest()


def commitment_digest(comm: FeldmanCommitment) -> str:
    return digest_hex(*comm.to_hex())


class Party:
    id: str

    def handle(self, env, net):
        method = getattr(self, "on_" + env.kind.replace("-", "_"), None)
        if method is None:
            net.note(self.id, "ignored", kind=env.kind, src=env.src)
            return
        method(env.body(), env, net)


# ---------------------------------------------------------------------------
class Board(Party):
    """The public bulletin board holding the signature chain."""

    id = BOARD

    def __init__(self, chain: SignatureChain | None = None):
        self.chain = chain
        self.problems: list[str] = []

    def on_publish_chain(self, body, env, net):
        # a honeypot header still replays; users check the ceremony before signing
        self.chain, self.problems = replay(body["chain"].encode("ascii"))
        if self.chain is None:
            raise MalformedRecordError("unreadable chain")

    def on_expire(self, body, env, net):
        self.chain.expire(body["at"])

    def on_append_validation(self, body, env, net):
        rec = ValidationRecord.from_record(self.chain.group, body)
        self.chain.append_validation(rec, now=net.tick)

    def on_append_signature(self, body, env, net):
        sig = Cyphersignature.from_record(self.chain.group, body)
        self.chain.append_cyphersignature(sig, now=net.tick)


# ---------------------------------------------------------------------------
@dataclass
class PetitionConfig:
    text: bytes
    n: int
    k: int
    t: int
    v: int
    validators: tuple[str, ...]
    expiry: int | None = None
    thresholds: tuple[int, ...] | None = None
    triples: int | None = None

    def __post_init__(self):
        if self.n < 1 or self.v < 1:
            raise ParameterError("n and v must be at least 1")
        if not 1 <= self.t <= self.k:
            raise ParameterError(f"need 1 <= t <= k, got t={self.t}, k={self.k}")
        if self.thresholds is not None:
            th = tuple(self.thresholds)
            if not th or list(th) != sorted(set(th)) or th[0] < 1 or th[-1] > self.n:
                raise ParameterError("thresholds must be strictly increasing within 1..n")
            if th[-1] != self.n:
                raise ParameterError("largest threshold must equal n")
            self.thresholds = th
        if len(self.validators) < self.v:
            raise ParameterError("fewer validators than v")

    @property
    def triple_count(self) -> int:
        return 4 * self.n if self.triples is None else self.triples


class Author(Party):
    """Starts the ceremony and publishes the header.

    ``honeypot`` scripts a malicious author: ``"substitute-key"`` replaces
    ``p`` by a key it knows, ``"forge-fragment"`` alters ``F_1``, and
    ``"forge-commitments"`` swaps in a whole ceremony of its own.
    """

    id = AUTHOR

    def __init__(self, group: Group, config: PetitionConfig, rng, honeypot: str | None = None):
        self.group = group
        self.config = config
        self.rng = rng
        self.honeypot = honeypot
        self.petition_id = None
        self.attempt = 0
        self.commitments = {}
        self.hash_commitments = {}
        self.acks = {}
        self.complaints = {}
        self.status = "idle"
        self.known_secret = None

    def start(self, net):
        cfg = self.config
        salt = self.rng.randbytes(16)
        self.petition_id = hashlib.sha256(b"petition-id|" + cfg.text + salt).digest()[:16]
        self._begin(net)

    def _begin(self, net):
        cfg = self.config
        self.commitments, self.hash_commitments, self.acks, self.complaints = {}, {}, {}, {}
        self.status = "ceremony"
        net.broadcast(self.id, [rabbit_id(i) for i in range(1, cfg.k + 1)], "ceremony-start", {
            "petition_id": self.petition_id.hex(),
            "text": cfg.text.hex(),
            "n": cfg.n, "k": cfg.k, "t": cfg.t,
            "thresholds": None if cfg.thresholds is None else list(cfg.thresholds),
            "attempt": self.attempt,
        })

    def on_dkg_commitments(self, body, env, net):
        if body["attempt"] != self.attempt:
            return
        i = body["rabbit"]
        for j, items in enumerate(body["fragments"], start=1):
            self.commitments[i, j] = FeldmanCommitment.from_hex(self.group, items)
        self.hash_commitments[i] = FeldmanCommitment.from_hex(self.group, body["hash_key"])

    def on_dkg_ack(self, body, env, net):
        if body["attempt"] != self.attempt:
            return
        self.acks[body["rabbit"]] = body["digest"]
        self._maybe_finish(net)

    def on_dkg_complaint(self, body, env, net):
        if body["attempt"] != self.attempt:
            return
        self.complaints[body["rabbit"]] = body["culprits"]
        self._maybe_finish(net)

    def _maybe_finish(self, net):
        cfg = self.config
        if len(self.acks) + len(self.complaints) < cfg.k:
            return
        if self.complaints:
            culprits = sorted({c for cs in self.complaints.values() for c in cs})
            self.status = "aborted"
            net.note(self.id, "ceremony-aborted", culprits=culprits)
            net.abort_ceremony(CeremonyError("share verification failed", culprits))
            return
        try:
            pk = aggregate_public(self.group, self.commitments, cfg.k, cfg.n)
            hash_comm = self.hash_commitments[1]
            for i in range(2, cfg.k + 1):
                hash_comm = hash_comm.combine(self.hash_commitments[i])
            if hash_comm.public.is_identity:
                raise DegenerateKeyError()
        except DegenerateKeyError:
            self.attempt += 1
            net.note(self.id, "ceremony-restart", attempt=self.attempt)
            self._begin(net)
            return
        transcript = CeremonyTranscript(dict(self.commitments), dict(self.acks))
        pk = self._apply_honeypot(pk, transcript)
        header = PetitionParams(
            petition_text=cfg.text, petition_id=self.petition_id, group=self.group,
            public_key=pk, n=cfg.n, k=cfg.k, t=cfg.t, v=cfg.v,
            hash_generator=hash_generator(self.group, self.petition_id),
            hash_key_commitment=hash_comm, validators=tuple(cfg.validators),
            expiry=cfg.expiry, thresholds=cfg.thresholds,
        )
        net.send(self.id, DEALER, "provision", {
            "petition_id": self.petition_id.hex(), "count": cfg.triple_count, "t": cfg.t, "k": cfg.k,
        })
        chain = SignatureChain.create(header, transcript)
        net.publish(self.id, "publish-chain", {"chain": chain.dumps().decode("ascii")})
        self.status = "published"
        net.note(self.id, "header-published", petition_id=self.petition_id.hex())

    def _apply_honeypot(self, pk: PetitionPublicKey, transcript: CeremonyTranscript):
        if self.honeypot is None:
            return pk
        g, q = self.group.generator, self.group.order
        if self.honeypot == "substitute-key":
            self.known_secret = self.group.random_scalar(self.rng, nonzero=True)
            return PetitionPublicKey(g ** self.known_secret, pk.fragment_publics)
        if self.honeypot == "forge-fragment":
            forged = list(pk.fragment_publics)
            forged[0] = forged[0] * g
            return PetitionPublicKey(pk.p, tuple(forged))
        if self.honeypot == "forge-commitments":
            cfg = self.config
            secret, publics = 0, []
            for (i, j) in sorted(transcript.commitments):
                x = self.group.random_scalar(self.rng, nonzero=True)
                secret = (secret + x) % q
                _, comm = share(self.group, x, cfg.t, cfg.k, self.rng)
                transcript.commitments[i, j] = comm
            self.known_secret = secret
            for j in range(1, cfg.n + 1):
                publics.append(self.group.product(transcript.commitments[i, j].public
                                                  for i in range(1, cfg.k + 1)))
            return PetitionPublicKey(self.group.product(publics), tuple(publics))
        raise ParameterError(f"unknown honeypot mode {self.honeypot!r}")


class Dealer(Party):
    """Trusted setup dealer for Beaver triples."""

    id = DEALER

    def __init__(self, group: Group, rng):
        self.group = group
        self.rng = rng

    def on_provision(self, body, env, net):
        t, k = body["t"], body["k"]
        per_rabbit = {i: [] for i in range(1, k + 1)}
        hx = self.group.scalar_hex
        for tid in range(body["count"]):
            tr = triple_gen(self.group, t, k, self.rng, tid)
            for i in range(1, k + 1):
                ts = tr.for_rabbit(i)
                per_rabbit[i].append([tid, hx(ts.a.value), hx(ts.b.value), hx(ts.c.value)])
        for i, items in per_rabbit.items():
            net.send(self.id, rabbit_id(i), "triples", {"petition_id": body["petition_id"], "triples": items})


# ---------------------------------------------------------------------------
class Validator(Party):
    def __init__(self, vid: str, group: Group, t: int, k: int, rng):
        self.vid = vid
        self.id = f"validator:{vid}"
        self.group = group
        self.t, self.k = t, k
        self.rng = rng
        self.registry: dict[str, int] = {}
        self.sessions: dict[str, int] = {}
        self.seen_hashes: list[str] = []

    @property
    def tag(self) -> bytes:
        return validator_tag(self.vid)

    def validate_user(self, evidence: str) -> int:
        u = derive_identifier(self.group, evidence)
        self.registry[evidence] = u
        return u

    def on_sign_request(self, body, env, net):
        try:
            u = self.validate_user(body["evidence"])
        except ParameterError as exc:
            net.note(self.id, "rejected", reason=str(exc))
            return
        sh = body["session_hash"]
        self.sessions[sh] = u
        self.seen_hashes.append(sh)
        self.distribute(sh, net)

    def distribute(self, sh: str, net):
        """Share the session's ``u`` among all ``k`` rabbits."""
        if sh not in self.sessions:
            raise SessionError("unknown session")
        shares, comm = share(self.group, self.sessions.pop(sh), self.t, self.k, self.rng)
        for s in shares:
            net.send(self.id, rabbit_id(s.index), "u-share", {
                "validator": self.vid, "session_hash": sh, "index": s.index,
                "value": self.group.scalar_hex(s.value), "commitment": comm.to_hex(),
            })


class User(Party):
    def __init__(self, name: str, group: Group, evidence: str, petition_text: bytes,
                 testimony: bytes | None, rng, threshold: int | None = None):
        self.id = f"user:{name}"
        self.name = name
        self.group = group
        self.evidence = evidence
        self.threshold = threshold
        # no testimony: random bits keep p_U unguessable
        self.testimony = rng.randbytes(32) if testimony is None else testimony
        self.p_u = petition_text + self.testimony
        self.progress: dict[str, str] = {}

    def initiate(self, validator: str, net):
        sh = self.group.scalar_hex(session_hash(self.group, validator, self.p_u))
        self.progress[validator] = "requested"
        net.send(self.id, f"validator:{validator}", "sign-request",
                 {"evidence": self.evidence, "session_hash": sh})
        return sh

    def reveal(self, validator: str, rabbits, net):
        sh = self.group.scalar_hex(session_hash(self.group, validator, self.p_u))
        for r in rabbits:
            net.send(self.id, r, "reveal", {
                "validator": validator, "session_hash": sh, "p_u": self.p_u.hex(),
                "threshold": self.threshold,
            })
        self.progress[validator] = "revealed"

    def sign(self, chain: SignatureChain, validators, net) -> bool:
        """Run the user's side for every listed validator; False if refused."""
        report = chain.ceremony_report()
        if not report.ok:
            net.note(self.id, "refused", reason="ceremony does not verify", problems=report.problems)
            return False
        rabbits = [rabbit_id(i) for i in range(1, chain.header.k + 1)]
        for vid in validators:
            self.initiate(vid, net)
            self.reveal(vid, rabbits, net)
        return True


# ---------------------------------------------------------------------------
@dataclass
class RabbitPetition:
    """What one rabbit holds for one petition."""

    petition_id: bytes
    text: bytes
    n: int
    thresholds: tuple[int, ...] | None
    attempt: int = 0
    own: dict = field(default_factory=dict)             # j -> FragmentContribution (until acked)
    own_hash: tuple | None = None                       # (shares, commitment)
    commitments: dict = field(default_factory=dict)     # (i, j) -> FeldmanCommitment
    hash_commitments: dict = field(default_factory=dict)
    contrib_shares: dict = field(default_factory=dict)  # (i, j) -> value
    hash_parts: dict = field(default_factory=dict)      # i -> value
    hash_key: HashKeyShare | None = None
    public_key: PetitionPublicKey | None = None
    triples: dict = field(default_factory=dict)         # id -> TripleShare
    ready: bool = False
    erased: bool = False

    def key_for(self, threshold):
        n_u = self.n if threshold is None else threshold
        return self.public_key.composed(n_u)


@dataclass
class RabbitSession:
    validator: str
    session_hash: str
    u_share: ShamirShare | None = None
    u_commitment: FeldmanCommitment | None = None
    p_u: bytes | None = None
    petition_id: bytes | None = None
    threshold: int | None = None
    sent_ready: bool = False
    collided: bool = False


@dataclass
class CoordSession:
    key: tuple
    petition_id: bytes
    threshold: int | None
    p_u: bytes
    enc_shares: dict
    triple_id: int | None = None
    participants: list = field(default_factory=list)
    openings: dict = field(default_factory=dict)
    partials: dict = field(default_factory=dict)
    dup_hash: object = None
    fragment: int | None = None
    fragment_replies: dict = field(default_factory=dict)
    stage: str = "queued"


class KeyRabbit(Party):
    """Holds fragment shares, a hash-key share and triples; one may coordinate.

    ``behaviour`` scripts active deviations: ``"bad-dkg-shares"`` sends a
    corrupted share to the next rabbit during the ceremony,
    ``"bad-fragment-shares"`` answers fragment requests with garbage.
    """

    def __init__(self, index: int, group: Group, k: int, t: int, rng, delay_window: int = 0,
                 behaviour: str | None = None):
        self.index = index
        self.id = rabbit_id(index)
        self.group = group
        self.k, self.t = k, t
        self.rng = rng
        self.delay_window = delay_window
        self.behaviour = behaviour
        self.petitions: dict[bytes, RabbitPetition] = {}
        self.sessions: dict[tuple, RabbitSession] = {}
        # coordinator state
        self.ready_msgs: dict[tuple, dict] = {}
        self.queue: list[tuple] = []
        self.active: CoordSession | None = None

    # -- ceremony -------------------------------------------------------
    def on_ceremony_start(self, body, env, net):
        pid = bytes.fromhex(body["petition_id"])
        th = body["thresholds"]
        st = RabbitPetition(pid, bytes.fromhex(body["text"]), body["n"],
                            None if th is None else tuple(th), body["attempt"])
        self.petitions[pid] = st
        n, t, k = body["n"], self.t, self.k
        for j in range(1, n + 1):
            st.own[j] = contribute(self.group, self.index, j, t, k, self.rng)
        h_secret = self.group.random_scalar(self.rng)
        st.own_hash = share(self.group, h_secret, t, k, self.rng)
        hx = self.group.scalar_hex
        for r in range(1, k + 1):
            frag_vals = [st.own[j].outgoing_shares[r - 1].value for j in range(1, n + 1)]
            hash_val = st.own_hash[0][r - 1].value
            if self.behaviour == "bad-dkg-shares" and r == self.index % k + 1:
                frag_vals[0] = (frag_vals[0] + 1) % self.group.order
            payload = {"petition_id": body["petition_id"], "attempt": st.attempt, "rabbit": self.index,
                       "fragments": [hx(x) for x in frag_vals], "hash_key": hx(hash_val)}
            if r == self.index:
                self._store_dkg_shares(st, payload)
            else:
                net.send(self.id, rabbit_id(r), "dkg-shares", payload)
        comm_payload = {
            "petition_id": body["petition_id"], "attempt": st.attempt, "rabbit": self.index,
            "fragments": [st.own[j].commitment.to_hex() for j in range(1, n + 1)],
            "hash_key": st.own_hash[1].to_hex(),
        }
        targets = [rabbit_id(r) for r in range(1, k + 1) if r != self.index] + [AUTHOR]
        net.broadcast(self.id, targets, "dkg-commitments", comm_payload)
        self._store_dkg_commitments(st, comm_payload)
        self._maybe_ack(st, net)

    def _petition(self, body):
        st = self.petitions.get(bytes.fromhex(body["petition_id"]))
        if st is None or st.attempt != body.get("attempt", st.attempt):
            return None
        return st

    def _store_dkg_shares(self, st, body):
        i = body["rabbit"]
        for j, h in enumerate(body["fragments"], start=1):
            st.contrib_shares[i, j] = self.group.scalar_from_hex(h)
        st.hash_parts[i] = self.group.scalar_from_hex(body["hash_key"])

    def _store_dkg_commitments(self, st, body):
        i = body["rabbit"]
        for j, items in enumerate(body["fragments"], start=1):
            st.commitments[i, j] = FeldmanCommitment.from_hex(self.group, items)
        st.hash_commitments[i] = FeldmanCommitment.from_hex(self.group, body["hash_key"])

    def on_dkg_shares(self, body, env, net):
        st = self._petition(body)
        if st is not None:
            self._store_dkg_shares(st, body)
            self._maybe_ack(st, net)

    def on_dkg_commitments(self, body, env, net):
        st = self._petition(body)
        if st is not None:
            self._store_dkg_commitments(st, body)
            self._maybe_ack(st, net)

    def _maybe_ack(self, st: RabbitPetition, net):
        k = self.k
        if st.ready or len(st.hash_parts) < k or len(st.hash_commitments) < k:
            return
        culprits = set()
        for (i, j), value in st.contrib_shares.items():
            if not verify_share(ShamirShare(self.index, value), st.commitments[i, j]):
                culprits.add(i)
        for i, value in st.hash_parts.items():
            if not verify_share(ShamirShare(self.index, value), st.hash_commitments[i]):
                culprits.add(i)
        base = {"petition_id": st.petition_id.hex(), "attempt": st.attempt, "rabbit": self.index}
        st.ready = True
        st.own = {}
        st.own_hash = None
        if culprits:
            net.broadcast(self.id, [AUTHOR], "dkg-complaint", {**base, "culprits": sorted(culprits)})
            return
        comm = st.hash_commitments[1]
        for i in range(2, k + 1):
            comm = comm.combine(st.hash_commitments[i])
        key_value = sum(st.hash_parts.values()) % self.group.order
        st.hash_key = HashKeyShare(self.index, ShamirShare(self.index, key_value), comm)
        st.hash_parts = {}
        try:
            st.public_key = aggregate_public(self.group, st.commitments, k, st.n)
        except DegenerateKeyError:
            st.public_key = None
        digest = CeremonyTranscript(st.commitments).digest()
        net.broadcast(self.id, [AUTHOR], "dkg-ack", {**base, "digest": digest})

    def on_triples(self, body, env, net):
        st = self.petitions.get(bytes.fromhex(body["petition_id"]))
        if st is None or st.erased:
            return
        sd = self.group.scalar_from_hex
        for tid, a, b, c in body["triples"]:
            st.triples[tid] = TripleShare(tid, ShamirShare(self.index, sd(a)),
                                          ShamirShare(self.index, sd(b)), ShamirShare(self.index, sd(c)))

    # -- signing: inputs from validator and user ---------------------------
    def on_u_share(self, body, env, net):
        key = (body["validator"], body["session_hash"])
        comm = FeldmanCommitment.from_hex(self.group, body["commitment"])
        sh = ShamirShare(body["index"], self.group.scalar_from_hex(body["value"]))
        if sh.index != self.index or comm.threshold != self.t or not verify_share(sh, comm):
            net.note(self.id, "rejected", reason="u-share does not verify", session=list(key))
            return
        sess = self.sessions.setdefault(key, RabbitSession(*key))
        if sess.u_share is not None:
            return self._collide(sess, net)
        sess.u_share, sess.u_commitment = sh, comm
        self._advance(sess, net)

    def on_reveal(self, body, env, net):
        key = (body["validator"], body["session_hash"])
        p_u = bytes.fromhex(body["p_u"])
        try:
            pid = self.check_reveal(body["validator"], body["session_hash"], p_u, body["threshold"])
        except SessionError as exc:
            net.note(self.id, "rejected", reason=str(exc), session=list(key))
            self.sessions.pop(key, None)
            return
        sess = self.sessions.setdefault(key, RabbitSession(*key))
        if sess.p_u is not None:
            return self._collide(sess, net)
        sess.p_u, sess.petition_id, sess.threshold = p_u, pid, body["threshold"]
        self._advance(sess, net)

    def _collide(self, sess: RabbitSession, net):
        # two sessions share h_V(p_U) at one validator; neither may proceed
        sess.collided = True
        net.note(self.id, "rejected", reason="session collision",
                 session=[sess.validator, sess.session_hash])

    def check_reveal(self, validator: str, sh: str, p_u: bytes, threshold) -> bytes:
        """Check the preimage and bind the session to a petition; returns its id."""
        if self.group.scalar_hex(session_hash(self.group, validator, p_u)) != sh:
            raise SessionError("preimage mismatch")
        matches = [st for st in self.petitions.values() if st.ready and p_u.startswith(st.text)]
        if not matches:
            raise SessionError("unknown petition")
        st = max(matches, key=lambda s: len(s.text))
        if st.erased:
            raise SessionError("expired")
        if st.thresholds is None and threshold is not None:
            raise SessionError("petition takes no threshold")
        if st.thresholds is not None and threshold not in st.thresholds:
            raise SessionError("threshold not offered")
        if st.public_key is None:
            raise SessionError("petition key unavailable")
        return st.petition_id

    def _advance(self, sess: RabbitSession, net):
        if sess.sent_ready or sess.collided or sess.u_share is None or sess.p_u is None:
            return
        st = self.petitions[sess.petition_id]
        enc = hybrid_encrypt(st.key_for(sess.threshold), self.group.encode_scalar(sess.u_share.value), self.rng)
        sess.sent_ready = True
        net.send(self.id, net.coordinator(), "session-ready", {
            "validator": sess.validator, "session_hash": sess.session_hash, "rabbit": self.index,
            "petition_id": sess.petition_id.hex(), "threshold": sess.threshold,
            "enc_share": enc.hex(), "commitment": commitment_digest(sess.u_commitment),
            "p_u": sess.p_u.hex(),
        })

    # -- MPC participant side ---------------------------------------------
    def _input(self, body) -> tuple[RabbitSession, RabbitPetition]:
        key = (body["validator"], body["session_hash"])
        sess = self.sessions.get(key)
        if sess is None:
            raise SessionError("unknown session")
        return sess, self.petitions[sess.petition_id]

    def on_hash_open(self, body, env, net):
        reply = {"validator": body["validator"], "session_hash": body["session_hash"], "rabbit": self.index}
        try:
            sess, st = self._input(body)
            triple = st.triples.get(body["triple_id"])
            if triple is None or st.hash_key is None:
                raise SessionError("triple reuse" if st.hash_key is not None else "expired")
            inp = HashEvalInput(repr(sess), self.index, sess.u_share, st.hash_key, triple)
            d_i, e_i = open_masks(self.group, inp)
            reply.update(d=self.group.scalar_hex(d_i), e=self.group.scalar_hex(e_i))
        except SessionError as exc:
            reply["error"] = str(exc)
        net.send(self.id, env.src, "hash-open-reply", reply)

    def on_hash_combine(self, body, env, net):
        reply = {"validator": body["validator"], "session_hash": body["session_hash"], "rabbit": self.index}
        try:
            sess, st = self._input(body)
            triple = st.triples.pop(body["triple_id"], None)
            if triple is None:
                raise SessionError("triple reuse")
            d = self.group.scalar_from_hex(body["d"])
            e = self.group.scalar_from_hex(body["e"])
            g_p = hash_generator(self.group, st.petition_id)
            reply["partial"] = partial_output(self.group, g_p, triple, d, e).hex()
        except SessionError as exc:
            reply["error"] = str(exc)
        net.send(self.id, env.src, "hash-partial", reply)

    def on_fragment_request(self, body, env, net):
        st = self.petitions.get(bytes.fromhex(body["petition_id"]))
        j = body["fragment"]
        reply = {"validator": body["validator"], "session_hash": body["session_hash"],
                 "rabbit": self.index, "fragment": j}
        if st is None or st.erased or not any(jj == j for (_, jj) in st.contrib_shares):
            reply["shares"] = None
        else:
            shares = {}
            for (i, jj), value in sorted(st.contrib_shares.items()):
                if jj == j:
                    if self.behaviour == "bad-fragment-shares":
                        value = (value + 1) % self.group.order
                    shares[str(i)] = self.group.scalar_hex(value)
            reply["shares"] = shares
        net.send(self.id, env.src, "fragment-shares", reply)

    def on_session_done(self, body, env, net):
        self.sessions.pop((body["validator"], body["session_hash"]), None)
        st = self.petitions.get(bytes.fromhex(body["petition_id"])) if body.get("petition_id") else None
        if st is not None and body.get("triple_id") is not None:
            # an opened triple must never be used again
            st.triples.pop(body["triple_id"], None)

    on_session_abort = on_session_done

    def on_expire_directive(self, body, env, net):
        st = self.petitions.get(bytes.fromhex(body["petition_id"]))
        if st is not None:
            self.erase(st)
        for key in [k for k, s in self.sessions.items() if s.petition_id == bytes.fromhex(body["petition_id"])]:
            del self.sessions[key]

    def erase(self, st: RabbitPetition):
        st.contrib_shares.clear()
        st.triples.clear()
        st.hash_key = None
        st.erased = True

    def delete_fragment_shares(self):
        for st in self.petitions.values():
            st.contrib_shares.clear()

    # -- coordinator side ---------------------------------------------------
    def on_session_ready(self, body, env, net):
        key = (body["validator"], body["session_hash"])
        msgs = self.ready_msgs.setdefault(key, {})
        msgs[body["rabbit"]] = body
        if len(msgs) < self.k:
            return
        first = msgs[1] if 1 in msgs else next(iter(msgs.values()))
        fields = ("petition_id", "threshold", "commitment", "p_u")
        if any(m[f] != first[f] for m in msgs.values() for f in fields):
            net.note(self.id, "session-rejected", session=list(key), reason="rabbits disagree on session inputs")
            del self.ready_msgs[key]
            self._finish(key, net, abort=True)
            return
        self.queue.append(key)
        self._pump(net)

    def _pump(self, net):
        if self.active is not None or not self.queue:
            return
        key = self.queue.pop(0)
        msgs = self.ready_msgs.pop(key)
        first = msgs[min(msgs)]
        self.active = CoordSession(
            key, bytes.fromhex(first["petition_id"]), first["threshold"], bytes.fromhex(first["p_u"]),
            {r: HybridCiphertext.from_hex(self.group, m["enc_share"]) for r, m in msgs.items()},
        )
        delay = self.rng.randint(0, self.delay_window) if self.delay_window else 0
        net.timer(self.id, delay, "session-start", {"validator": key[0], "session_hash": key[1]})

    def _key_body(self):
        return {"validator": self.active.key[0], "session_hash": self.active.key[1]}

    def on_session_start(self, body, env, net):
        cs = self.active
        chain = net.chain
        if chain.frozen or (chain.header.expiry is not None and net.tick >= chain.header.expiry):
            return self._abort("expired", net)
        st = self.petitions[cs.petition_id]
        if not st.triples:
            return self._abort("insufficient triples", net)
        cs.triple_id = min(st.triples)
        live = net.live_rabbits()
        cs.participants = [i for i in sorted(cs.enc_shares) if i in live][: self.t]
        if len(cs.participants) < self.t:
            return self._abort("insufficient participants", net)
        cs.stage = "hash-open"
        for i in cs.participants:
            net.send(self.id, rabbit_id(i), "hash-open", {**self._key_body(), "triple_id": cs.triple_id})

    def on_hash_open_reply(self, body, env, net):
        cs = self.active
        if cs is None or cs.stage != "hash-open" or (body["validator"], body["session_hash"]) != cs.key:
            return
        if "error" in body:
            return self._abort(body["error"], net)
        sd = self.group.scalar_from_hex
        cs.openings[body["rabbit"]] = (sd(body["d"]), sd(body["e"]))
        if len(cs.openings) < len(cs.participants):
            return
        d = reconstruct(self.group, [ShamirShare(i, de[0]) for i, de in sorted(cs.openings.items())], self.t)
        e = reconstruct(self.group, [ShamirShare(i, de[1]) for i, de in sorted(cs.openings.items())], self.t)
        cs.stage = "hash-combine"
        hx = self.group.scalar_hex
        for i in cs.participants:
            net.send(self.id, rabbit_id(i), "hash-combine",
                     {**self._key_body(), "triple_id": cs.triple_id, "d": hx(d), "e": hx(e)})

    def on_hash_partial(self, body, env, net):
        cs = self.active
        if cs is None or cs.stage != "hash-combine" or (body["validator"], body["session_hash"]) != cs.key:
            return
        if "error" in body:
            return self._abort(body["error"], net)
        cs.partials[body["rabbit"]] = self.group.from_hex(body["partial"])
        if len(cs.partials) < len(cs.participants):
            return
        cs.dup_hash = reconstruct_in_exponent(self.group, sorted(cs.partials.items()), self.t)
        self._publish_validation(net)

    def _publish_validation(self, net):
        cs = self.active
        chain = net.chain
        validator = cs.key[0]
        if not chain.check_duplicate(cs.dup_hash):
            return self._abort("duplicate user", net)
        if any(rec.validator == validator for rec in chain.validations_for(cs.dup_hash)):
            return self._abort("duplicate validation", net)
        rec = ValidationRecord(validator, cs.dup_hash,
                               tuple(cs.enc_shares[i] for i in range(1, self.k + 1)), cs.threshold)
        try:
            net.publish(self.id, "append-validation", rec.to_record())
        except ThreshPetError as exc:
            return self._abort(str(exc), net)
        net.note(self.id, "validation-published", session=list(cs.key))
        distinct = {r.validator for r in chain.validations_for(cs.dup_hash)}
        if len(distinct) < chain.header.v:
            return self._finish(cs.key, net)
        j = chain.select_fragment(cs.threshold)
        if j is None:
            return self._publish_signature(None, net)
        cs.fragment = j
        cs.stage = "fragment"
        for i in sorted(net.live_rabbits()):
            net.send(self.id, rabbit_id(i), "fragment-request",
                     {**self._key_body(), "petition_id": cs.petition_id.hex(), "fragment": j})

    def on_fragment_shares(self, body, env, net):
        cs = self.active
        if cs is None or cs.stage != "fragment" or (body["validator"], body["session_hash"]) != cs.key:
            return
        cs.fragment_replies[body["rabbit"]] = body["shares"]
        if len(cs.fragment_replies) < len(net.live_rabbits()):
            return
        st = self.petitions[cs.petition_id]
        j = cs.fragment
        share_sets = {i: [] for i in range(1, self.k + 1)}
        for r, shares in sorted(cs.fragment_replies.items()):
            for i_str, value in (shares or {}).items():
                share_sets[int(i_str)].append(ShamirShare(r, self.group.scalar_from_hex(value)))
        try:
            frag = reconstruct_fragment(self.group, j, share_sets, self.t, net.chain.header.public_key,
                                        {(i, j): st.commitments[i, j] for i in range(1, self.k + 1)})
        except (InsufficientSharesError, ThreshPetError) as exc:
            return self._abort(str(exc), net)
        self._publish_signature(frag, net)

    def _publish_signature(self, frag, net):
        cs = self.active
        chain = net.chain
        st = self.petitions[cs.petition_id]
        testimony = cs.p_u[len(st.text):]
        vals = chain.validations_for(cs.dup_hash)
        current = [r for r in vals if r.validator == cs.key[0]][0]
        sig = Cyphersignature(
            testimony=hybrid_encrypt(st.key_for(cs.threshold), testimony, self.rng),
            shares=current.shares, dup_hash=cs.dup_hash, fragment=frag, threshold=cs.threshold,
            validators=tuple(sorted({r.validator for r in vals})),
        )
        try:
            net.publish(self.id, "append-signature", sig.to_record(self.group))
        except ThreshPetError as exc:
            return self._abort(str(exc), net)
        net.note(self.id, "signature-published", session=list(cs.key),
                 fragment=None if frag is None else frag.index)
        self._finish(cs.key, net)

    def _abort(self, reason: str, net):
        net.note(self.id, "session-rejected", session=list(self.active.key), reason=reason)
        self._finish(self.active.key, net, abort=True)

    def _finish(self, key, net, abort=False):
        kind = "session-abort" if abort else "session-done"
        body = {"validator": key[0], "session_hash": key[1], "petition_id": None, "triple_id": None}
        if self.active is not None and self.active.key == key:
            body.update(petition_id=self.active.petition_id.hex(), triple_id=self.active.triple_id)
        for i in range(1, self.k + 1):
            net.send(self.id, rabbit_id(i), kind, body)
        if self.active is not None and self.active.key == key:
            self.active = None
        self._pump(net)

    # -- persistence ----------------------------------------------------------
    def to_dict(self) -> dict:
        hx = self.group.scalar_hex
        petitions = []
        for st in self.petitions.values():
            petitions.append({
                "petition_id": st.petition_id.hex(), "text": st.text.hex(), "n": st.n,
                "thresholds": None if st.thresholds is None else list(st.thresholds),
                "commitments": [[i, j, c.to_hex()] for (i, j), c in sorted(st.commitments.items())],
                "contrib_shares": [[i, j, hx(v)] for (i, j), v in sorted(st.contrib_shares.items())],
                "hash_key": None if st.hash_key is None else {
                    "value": hx(st.hash_key.share.value), "commitment": st.hash_key.commitment.to_hex()},
                "triples": [[tid, hx(tr.a.value), hx(tr.b.value), hx(tr.c.value)]
                            for tid, tr in sorted(st.triples.items())],
                "erased": st.erased,
            })
        return {"index": self.index, "k": self.k, "t": self.t, "group": self.group.name,
                "delay_window": self.delay_window, "petitions": petitions}

    @classmethod
    def from_dict(cls, d: dict, group: Group, rng) -> "KeyRabbit":
        r = cls(d["index"], group, d["k"], d["t"], rng, d.get("delay_window", 0))
        sd = group.scalar_from_hex
        for p in d["petitions"]:
            th = p["thresholds"]
            st = RabbitPetition(bytes.fromhex(p["petition_id"]), bytes.fromhex(p["text"]), p["n"],
                                None if th is None else tuple(th))
            st.commitments = {(i, j): FeldmanCommitment.from_hex(group, c) for i, j, c in p["commitments"]}
            st.contrib_shares = {(i, j): sd(v) for i, j, v in p["contrib_shares"]}
            if p["hash_key"] is not None:
                st.hash_key = HashKeyShare(r.index, ShamirShare(r.index, sd(p["hash_key"]["value"])),
                                           FeldmanCommitment.from_hex(group, p["hash_key"]["commitment"]))
            for tid, a, b, c in p["triples"]:
                st.triples[tid] = TripleShare(tid, ShamirShare(r.index, sd(a)), ShamirShare(r.index, sd(b)),
                                              ShamirShare(r.index, sd(c)))
            st.public_key = aggregate_public(group, st.commitments, r.k, st.n)
            st.ready = True
            st.erased = p["erased"]
            r.petitions[st.petition_id] = st
        return r
