"""The petition: public header plus an append-only, hash-linked record chain.

On disk a chain is one canonical JSON object per line (sorted keys, no
whitespace, hex for all binary fields).  Every record carries ``prev``,
the ``hash`` of its predecessor, and its own ``hash`` over everything
else.  Record 0 is the header, followed by the ceremony transcript
(``contribution`` and ``ceremony-ack`` records), then ``validation``,
``cyphersignature`` and at most one ``expiry`` record.

Verification is by replay: the chain is rebuilt record by record through
the same append operations that produced it, and every re-serialised
record must match the stored bytes exactly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import tempfile
from dataclasses import dataclass, field

from .disthash import hash_generator, local_hash_oracle
from .dkg import CeremonyTranscript, KeyFragment, PetitionPublicKey, verify_ceremony
from .elgamal import HybridCiphertext, hybrid_decrypt
from .errors import (
    AlreadyTriggeredError,
    AuthenticationError,
    DecodeError,
    DuplicateUserError,
    ExpiredError,
    FragmentReleasedError,
    FragmentVerificationError,
    InsufficientValidationsError,
    MalformedRecordError,
    NotTriggeredError,
    ParameterError,
    ProtocolRejection,
    ShareInconsistencyError,
    ThreshPetError,
    VerificationError,
)
from .group import Group, GroupDesc, GroupElement, group_from_desc
from .vss import FeldmanCommitment, ShamirShare, reconstruct

FORMAT_VERSION = 1
GENESIS = "0" * 64
TRIGGERED = "TRIGGERED"
NOT_TRIGGERED = "NOT_TRIGGERED"


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def record_digest(body: dict) -> str:
    payload = {key: val for key, val in body.items() if key != "hash"}
    return hashlib.sha256(canonical(payload).encode()).hexdigest()


@dataclass
class PetitionParams:
    petition_text: bytes
    petition_id: bytes
    group: Group
    public_key: PetitionPublicKey
    n: int
    k: int
    t: int
    v: int
    hash_generator: GroupElement
    hash_key_commitment: FeldmanCommitment
    validators: tuple[str, ...]
    expiry: int | None = None
    thresholds: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 1 <= self.t <= self.k:
            raise ParameterError(f"need 1 <= t <= k, got t={self.t}, k={self.k}")
        if self.v < 1 or self.n < 1:
            raise ParameterError("n and v must be at least 1")
        if len(self.validators) < self.v or len(set(self.validators)) != len(self.validators):
            raise ParameterError("need at least v distinct validators")
        if self.thresholds is not None:
            th = tuple(self.thresholds)
            if not th or list(th) != sorted(set(th)) or th[0] < 1 or th[-1] != self.n:
                raise ParameterError("thresholds must be strictly increasing, within 1..n, ending at n")
            self.thresholds = th
        if self.public_key.n != self.n:
            raise ParameterError("fragment publics do not match n")

    @property
    def multi(self) -> bool:
        return self.thresholds is not None

    def check_threshold(self, threshold):
        if self.multi:
            if threshold not in self.thresholds:
                raise ParameterError(f"threshold {threshold} not offered by this petition")
        elif threshold is not None:
            raise ParameterError("single-threshold petition takes no per-signature threshold")

    def effective_threshold(self, threshold) -> int:
        return self.n if threshold is None else threshold

    def key_for(self, threshold=None) -> GroupElement:
        """Encryption key for a signer choosing ``threshold`` (``p`` itself if none)."""
        return self.public_key.composed(self.effective_threshold(threshold))

    def to_record(self) -> dict:
        return {
            "type": "header",
            "version": FORMAT_VERSION,
            "petition_text": self.petition_text.hex(),
            "petition_id": self.petition_id.hex(),
            "group": self.group.desc.to_dict(),
            "public_key": self.public_key.p.hex(),
            "fragment_publics": [f.hex() for f in self.public_key.fragment_publics],
            "n": self.n,
            "k": self.k,
            "t": self.t,
            "v": self.v,
            "expiry": self.expiry,
            "thresholds": None if self.thresholds is None else list(self.thresholds),
            "validators": list(self.validators),
            "hash_generator": self.hash_generator.hex(),
            "hash_key_commitment": self.hash_key_commitment.to_hex(),
        }

    @classmethod
    def from_record(cls, d: dict) -> "PetitionParams":
        if d.get("type") != "header" or d.get("version") != FORMAT_VERSION:
            raise MalformedRecordError("not a version-1 header")
        group = group_from_desc(GroupDesc.from_dict(d["group"]))
        publics = tuple(group.from_hex(h) for h in d["fragment_publics"])
        pk = PetitionPublicKey(group.from_hex(d["public_key"]), publics)
        return cls(
            petition_text=bytes.fromhex(d["petition_text"]),
            petition_id=bytes.fromhex(d["petition_id"]),
            group=group,
            public_key=pk,
            n=_int(d["n"]), k=_int(d["k"]), t=_int(d["t"]), v=_int(d["v"]),
            hash_generator=group.from_hex(d["hash_generator"]),
            hash_key_commitment=FeldmanCommitment.from_hex(group, d["hash_key_commitment"]),
            validators=tuple(str(x) for x in d["validators"]),
            expiry=None if d["expiry"] is None else _int(d["expiry"]),
            thresholds=None if d["thresholds"] is None else tuple(_int(x) for x in d["thresholds"]),
        )


def _int(x) -> int:
    if type(x) is not int:
        raise MalformedRecordError(f"expected integer, got {x!r}")
    return x


@dataclass(frozen=True)
class ValidationRecord:
    validator: str
    dup_hash: GroupElement
    shares: tuple[HybridCiphertext, ...]
    threshold: int | None = None

    def to_record(self) -> dict:
        return {
            "type": "validation",
            "validator": self.validator,
            "dup_hash": self.dup_hash.hex(),
            "shares": [c.hex() for c in self.shares],
            "threshold": self.threshold,
        }

    @classmethod
    def from_record(cls, group: Group, d: dict) -> "ValidationRecord":
        return cls(
            validator=str(d["validator"]),
            dup_hash=group.from_hex(d["dup_hash"]),
            shares=tuple(HybridCiphertext.from_hex(group, h) for h in d["shares"]),
            threshold=None if d["threshold"] is None else _int(d["threshold"]),
        )


@dataclass(frozen=True)
class Cyphersignature:
    testimony: HybridCiphertext
    shares: tuple[HybridCiphertext, ...]
    dup_hash: GroupElement
    fragment: KeyFragment | None
    threshold: int | None = None
    validators: tuple[str, ...] = ()

    def to_record(self, group: Group) -> dict:
        frag = None
        if self.fragment is not None:
            frag = {"index": self.fragment.index, "value": group.scalar_hex(self.fragment.value)}
        return {
            "type": "cyphersignature",
            "testimony": self.testimony.hex(),
            "shares": [c.hex() for c in self.shares],
            "dup_hash": self.dup_hash.hex(),
            "fragment": frag,
            "threshold": self.threshold,
            "validators": list(self.validators),
        }

    @classmethod
    def from_record(cls, group: Group, d: dict) -> "Cyphersignature":
        frag = d["fragment"]
        if frag is not None:
            frag = KeyFragment(_int(frag["index"]), group.scalar_from_hex(frag["value"]))
        return cls(
            testimony=HybridCiphertext.from_hex(group, d["testimony"]),
            shares=tuple(HybridCiphertext.from_hex(group, h) for h in d["shares"]),
            dup_hash=group.from_hex(d["dup_hash"]),
            fragment=frag,
            threshold=None if d["threshold"] is None else _int(d["threshold"]),
            validators=tuple(str(x) for x in d["validators"]),
        )


@dataclass
class TriggerReport:
    state: str
    released: list[int]
    signatures: int
    m_star: int | None = None
    decryptable: list[int] = field(default_factory=list)
    complete: bool = False

    def to_dict(self):
        return {
            "state": self.state,
            "released": self.released,
            "signatures": self.signatures,
            "m_star": self.m_star,
            "decryptable": self.decryptable,
            "complete": self.complete,
        }


@dataclass
class DecryptedSignature:
    record: int
    identity: int | None
    testimony: bytes | None
    threshold: int | None = None
    error: str | None = None


def cascade_level(thresholds, n: int | None = None) -> int:
    """``max{m : #{n_U <= m} >= m}`` over the signed thresholds, 0 if none.

    ``n`` caps the level at the number of fragments that exist.
    """
    thresholds = sorted(thresholds)
    best = 0
    top = len(thresholds) if n is None else min(n, len(thresholds))
    for m in range(1, top + 1):
        if thresholds[m - 1] <= m:
            best = m
    return best


class SignatureChain:
    """In-memory chain.  Appends are serialised by the caller (single writer)."""

    def __init__(self, header: PetitionParams):
        self.header = header
        self.records: list[dict] = []
        self.validations: list[tuple[int, ValidationRecord]] = []
        self.signatures: list[tuple[int, Cyphersignature]] = []
        self.released: dict[int, int] = {}
        self.frozen = False
        self.transcript = CeremonyTranscript({})
        self._push(header.to_record())

    @property
    def group(self) -> Group:
        return self.header.group

    # -- construction ---------------------------------------------------
    @classmethod
    def create(cls, header: PetitionParams, transcript: CeremonyTranscript) -> "SignatureChain":
        chain = cls(header)
        for (i, j) in sorted(transcript.commitments):
            chain.add_contribution(i, j, transcript.commitments[i, j])
        for i in sorted(transcript.acks):
            chain.add_ack(i, transcript.acks[i])
        return chain

    def _push(self, body: dict) -> dict:
        body = dict(body)
        body["prev"] = self.records[-1]["hash"] if self.records else GENESIS
        body["hash"] = record_digest(body)
        self.records.append(body)
        return body

    @property
    def head(self) -> str:
        return self.records[-1]["hash"]

    def _ceremony_open(self):
        if self.validations or self.signatures or self.frozen:
            raise MalformedRecordError("ceremony records must precede all signing records")

    def add_contribution(self, i: int, j: int, commitment: FeldmanCommitment):
        self._ceremony_open()
        if (i, j) in self.transcript.commitments or self.transcript.acks:
            raise MalformedRecordError(f"unexpected contribution record ({i}, {j})")
        self.transcript.commitments[i, j] = commitment
        self._push({"type": "contribution", "rabbit": i, "fragment": j, "commitment": commitment.to_hex()})

    def add_ack(self, i: int, digest: str):
        self._ceremony_open()
        if i in self.transcript.acks:
            raise MalformedRecordError(f"duplicate ack from rabbit {i}")
        self.transcript.acks[i] = digest
        self._push({"type": "ceremony-ack", "rabbit": i, "digest": digest})

    def ceremony_report(self):
        report = verify_ceremony(self.header, self.transcript)
        h = self.header
        if h.hash_generator != hash_generator(h.group, h.petition_id):
            report.problems.append("hash generator does not derive from the petition id")
        if h.hash_key_commitment.threshold != h.t or h.hash_key_commitment.public.is_identity:
            report.problems.append("hash key commitment is malformed")
        report.ok = not report.problems
        return report

    # -- appends --------------------------------------------------------
    def _check_open(self, now):
        if self.frozen:
            raise ExpiredError()
        exp = self.header.expiry
        if exp is not None and now is not None and now >= exp:
            raise ExpiredError()

    def _check_shares(self, shares):
        if len(shares) != self.header.k:
            raise MalformedRecordError(
                f"record carries {len(shares)} share ciphertexts, expected {self.header.k}")

    def append_validation(self, record: ValidationRecord, now=None) -> dict:
        self._check_open(now)
        self._check_shares(record.shares)
        if record.validator not in self.header.validators:
            raise MalformedRecordError(f"unknown validator {record.validator!r}")
        self.header.check_threshold(record.threshold)
        if not self.ceremony_complete:
            raise MalformedRecordError("ceremony transcript incomplete")
        if not self.check_duplicate(record.dup_hash):
            raise DuplicateUserError()
        if any(rec.validator == record.validator for rec in self.validations_for(record.dup_hash)):
            raise DuplicateUserError("duplicate validation")
        body = self._push(record.to_record())
        self.validations.append((len(self.records) - 1, record))
        return body

    @property
    def ceremony_complete(self) -> bool:
        h = self.header
        return len(self.transcript.commitments) == h.n * h.k and len(self.transcript.acks) == h.k

    def validations_for(self, h: GroupElement) -> list[ValidationRecord]:
        return [rec for _, rec in self.validations if rec.dup_hash == h]

    def signed(self, h: GroupElement) -> bool:
        return any(sig.dup_hash == h for _, sig in self.signatures)

    def check_duplicate(self, h: GroupElement, v: int | None = None) -> bool:
        """True to accept one more validation record for ``h``, False to reject."""
        v = self.header.v if v is None else v
        return not self.signed(h) and len(self.validations_for(h)) + 1 <= v

    def select_fragment(self, threshold: int | None = None) -> int | None:
        """Fragment to release for a signer choosing ``threshold``.

        The largest unreleased ``j <= n_U``; if all of those are out, the
        smallest unreleased ``j > n_U``; ``None`` once all ``n`` are out.
        """
        n_u = self.header.effective_threshold(threshold)
        below = [j for j in range(1, n_u + 1) if j not in self.released]
        if below:
            return max(below)
        above = [j for j in range(n_u + 1, self.header.n + 1) if j not in self.released]
        return min(above) if above else None

    def append_cyphersignature(self, sig: Cyphersignature, now=None) -> dict:
        self._check_open(now)
        h = self.header
        self._check_shares(sig.shares)
        h.check_threshold(sig.threshold)
        if self.signed(sig.dup_hash):
            raise DuplicateUserError()
        vals = self.validations_for(sig.dup_hash)
        distinct = {rec.validator for rec in vals}
        if len(distinct) < h.v:
            raise InsufficientValidationsError()
        if set(sig.validators) != distinct:
            raise MalformedRecordError("listed validators do not match the validation records")
        if any(rec.threshold != sig.threshold for rec in vals):
            raise MalformedRecordError("threshold differs from the validation records")
        expected = self.select_fragment(sig.threshold)
        if sig.fragment is None:
            if expected is not None:
                raise MalformedRecordError("cyphersignature must release a fragment")
        else:
            j = sig.fragment.index
            if j in self.released:
                raise FragmentReleasedError()
            if j != expected:
                raise MalformedRecordError(f"fragment {j} released, selection rule gives {expected}")
            if self.group.generator ** sig.fragment.value != h.public_key.fragment_publics[j - 1]:
                raise FragmentVerificationError()
        body = self._push(sig.to_record(self.group))
        self.signatures.append((len(self.records) - 1, sig))
        if sig.fragment is not None:
            self.released[sig.fragment.index] = sig.fragment.value
        return body

    def expire(self, now: int) -> dict:
        h = self.header
        if self.frozen:
            raise ExpiredError()
        if h.expiry is None:
            raise ProtocolRejection("petition has no expiry")
        if now < h.expiry:
            raise ProtocolRejection("petition has not reached its expiry")
        if len(self.released) == h.n:
            raise AlreadyTriggeredError()
        body = self._push({"type": "expiry", "at": now})
        self.frozen = True
        return body

    # -- trigger and decryption ------------------------------------------
    def prefix_released(self, threshold=None) -> bool:
        n_u = self.header.effective_threshold(threshold)
        return all(j in self.released for j in range(1, n_u + 1))

    def trigger_check(self) -> TriggerReport:
        h = self.header
        released = sorted(self.released)
        complete = len(released) == h.n
        if not h.multi:
            decryptable = [idx for idx, _ in self.signatures] if complete else []
            return TriggerReport(TRIGGERED if complete else NOT_TRIGGERED, released,
                                 len(self.signatures), None, decryptable, complete)
        m_star = cascade_level((sig.threshold for _, sig in self.signatures), h.n)
        decryptable = [idx for idx, sig in self.signatures if sig.threshold <= m_star]
        state = TRIGGERED if m_star >= 1 else NOT_TRIGGERED
        return TriggerReport(state, released, len(self.signatures), m_star, decryptable, complete)

    def secret_for(self, threshold=None) -> int:
        n_u = self.header.effective_threshold(threshold)
        return sum(self.released[j] for j in range(1, n_u + 1)) % self.group.order

    def released_sum(self) -> int:
        return sum(self.released.values()) % self.group.order

    def open_signature(self, sig: Cyphersignature, s: int, hash_key=None) -> tuple[int, bytes]:
        """Decrypt one cyphersignature under ``s``; returns ``(u, testimony)``.

        ``u`` is reconstructed from every ``t``-subset of the decrypted
        shares and all subsets must agree.  ``hash_key`` (tests only)
        additionally checks the duplicate hash against ``u``.
        """
        group, t = self.group, self.header.t
        shares = []
        for i, ct in enumerate(sig.shares, start=1):
            raw = hybrid_decrypt(s, ct)
            try:
                shares.append(ShamirShare(i, group.decode_scalar(raw)))
            except DecodeError:
                raise ShareInconsistencyError("share does not decode to a scalar") from None
        testimony = hybrid_decrypt(s, sig.testimony)
        candidates = {reconstruct(group, subset, t) for subset in itertools.combinations(shares, t)}
        if len(candidates) != 1:
            raise ShareInconsistencyError()
        (u,) = candidates
        if hash_key is not None and local_hash_oracle(u, hash_key, self.header.hash_generator) != sig.dup_hash:
            raise ShareInconsistencyError("identity does not match its duplicate hash")
        return u, testimony

    def decrypt_chain(self, hash_key=None) -> list[DecryptedSignature]:
        """Decrypt every signature whose key prefix is public.

        Per-record failures are reported in ``error`` rather than raised.
        """
        report = self.trigger_check()
        if report.state != TRIGGERED:
            raise NotTriggeredError()
        out = []
        for idx, sig in self.signatures:
            if not self.prefix_released(sig.threshold):
                continue
            try:
                u, testimony = self.open_signature(sig, self.secret_for(sig.threshold), hash_key)
                out.append(DecryptedSignature(idx, u, testimony, sig.threshold))
            except (AuthenticationError, ShareInconsistencyError) as exc:
                out.append(DecryptedSignature(idx, None, None, sig.threshold, str(exc)))
        return out

    # -- persistence ----------------------------------------------------
    def lines(self) -> list[str]:
        return [canonical(r) for r in self.records]

    def dumps(self) -> bytes:
        return "".join(line + "\n" for line in self.lines()).encode("ascii")

    def save(self, path):
        atomic_write(path, self.dumps())

    @classmethod
    def loads(cls, data: bytes) -> "SignatureChain":
        chain, problems = replay(data)
        if problems:
            raise VerificationError(problems)
        return chain

    @classmethod
    def load(cls, path) -> "SignatureChain":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())

    def verify(self) -> list[str]:
        return verify_bytes(self.dumps())


def atomic_write(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _apply(chain: SignatureChain, body: dict):
    kind = body.get("type")
    group = chain.group
    if kind == "contribution":
        chain.add_contribution(_int(body["rabbit"]), _int(body["fragment"]),
                               FeldmanCommitment.from_hex(group, body["commitment"]))
    elif kind == "ceremony-ack":
        chain.add_ack(_int(body["rabbit"]), str(body["digest"]))
    elif kind == "validation":
        chain.append_validation(ValidationRecord.from_record(group, body))
    elif kind == "cyphersignature":
        chain.append_cyphersignature(Cyphersignature.from_record(group, body))
    elif kind == "expiry":
        chain.expire(_int(body["at"]))
    else:
        raise MalformedRecordError(f"unknown record type {kind!r}")


def replay(data: bytes):
    """Rebuild a chain from file bytes.  Returns ``(chain or None, problems)``."""
    problems = []
    if not data.endswith(b"\n"):
        problems.append("file: missing final newline")
    raw_lines = data.split(b"\n")
    if raw_lines and raw_lines[-1] == b"":
        raw_lines.pop()
    bodies = []
    prev = GENESIS
    for idx, raw in enumerate(raw_lines):
        try:
            text = raw.decode("ascii")
            body = json.loads(text)
            if not isinstance(body, dict):
                raise ValueError("not an object")
        except ValueError as exc:
            problems.append(f"record {idx}: unparseable ({exc.__class__.__name__})")
            bodies.append(None)
            prev = None
            continue
        if canonical(body) != text:
            problems.append(f"record {idx}: not in canonical form")
        if body.get("hash") != record_digest(body):
            problems.append(f"record {idx}: record hash mismatch")
        if prev is not None and body.get("prev") != prev:
            problems.append(f"record {idx}: broken link to previous record")
        prev = body.get("hash")
        bodies.append(body)
    if not bodies or bodies[0] is None:
        problems.append("record 0: missing header")
        return None, problems

    try:
        chain = SignatureChain(PetitionParams.from_record(_strip(bodies[0])))
    except (ThreshPetError, KeyError, TypeError, ValueError) as exc:
        problems.append(f"record 0: invalid header ({exc})")
        return None, problems
    if chain.records[0] != bodies[0]:
        problems.append("record 0: header does not re-serialise identically")

    ceremony_checked = False
    for idx, body in enumerate(bodies[1:], start=1):
        if body is None:
            return chain, problems
        if not ceremony_checked and body.get("type") not in ("contribution", "ceremony-ack"):
            ceremony_checked = True
            problems.extend(f"record {idx}: ceremony: {p}" for p in chain.ceremony_report().problems)
        try:
            _apply(chain, _strip(body))
        except (ThreshPetError, KeyError, TypeError, ValueError) as exc:
            problems.append(f"record {idx}: rejected on replay ({exc or exc.__class__.__name__})")
            return chain, problems
        if chain.records[-1] != body:
            problems.append(f"record {idx}: does not re-serialise identically")
    if not ceremony_checked:
        problems.extend(f"ceremony: {p}" for p in chain.ceremony_report().problems)
    return chain, problems


def _strip(body: dict) -> dict:
    return {key: val for key, val in body.items() if key not in ("prev", "hash")}


def verify_bytes(data: bytes) -> list[str]:
    return replay(data)[1]
