"""Deterministic in-process network and scenario runner.

Messages are queued on a heap ordered by ``(tick, seq)``; ``seq`` is a
global counter, so delivery order is a pure function of the script and
its seed.  Every party gets its own ``random.Random`` derived from the
seed.  Publications to the board are synchronous so the coordinator sees
acceptance or rejection immediately.

Ticks in a script's event list count from the end of the key ceremony,
which always runs to quiescence first.  Expiry uses the same clock.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field

from .chain import SignatureChain, canonical
from .dkg import reconstruct_fragment
from .elgamal import hybrid_decrypt
from .errors import CeremonyError, ParameterError, ThreshPetError
from .group import Group, get_group
from .parties import (
    AUTHOR,
    BOARD,
    DEALER,
    MPC_KINDS,
    Author,
    Board,
    Dealer,
    KeyRabbit,
    Party,
    PetitionConfig,
    User,
    Validator,
    derive_identifier,
    rabbit_id,
    session_hash,
)
from .vss import ShamirShare, consistent_secrets, reconstruct

log = logging.getLogger(__name__)

SECURE = "secure"
PUBLIC = "public"
TIMER = "timer"
SCRIPT = "script"

# kinds that belong to setup rather than to the signing flow
SETUP_KINDS = frozenset({
    "ceremony-start", "dkg-shares", "dkg-commitments", "dkg-ack", "dkg-complaint",
    "provision", "triples", "publish-chain",
})


@dataclass(frozen=True)
class Envelope:
    tick: int
    seq: int
    src: str
    dst: str
    channel: str
    kind: str
    payload: bytes

    def body(self) -> dict:
        return json.loads(self.payload)

    def meta(self) -> dict:
        return {"tick": self.tick, "seq": self.seq, "src": self.src, "dst": self.dst,
                "channel": self.channel, "kind": self.kind, "size": len(self.payload)}


class Network:
    def __init__(self, rng: random.Random, jitter: int = 0):
        self.rng = rng
        self.jitter = jitter
        self.tick = 0
        self._seq = itertools.count()
        self._heap: list[tuple[int, int, Envelope]] = []
        self.parties: dict[str, Party] = {}
        self.crashed: set[str] = set()
        self.drop_rules: list[dict] = []
        self.deliveries: list[Envelope] = []
        self.log: list[dict] = []
        self.ceremony_error: CeremonyError | None = None
        self.board = Board()
        self.register(self.board)

    def register(self, party: Party):
        self.parties[party.id] = party

    @property
    def chain(self) -> SignatureChain | None:
        return self.board.chain

    def live_rabbits(self) -> set[int]:
        return {p.index for pid, p in self.parties.items()
                if isinstance(p, KeyRabbit) and pid not in self.crashed}

    def coordinator(self) -> str:
        return rabbit_id(min(self.live_rabbits()))

    def note(self, party: str, event: str, **fields):
        self.log.append({"tick": self.tick, "party": party, "event": event, **fields})

    def _dropped(self, src, dst, kind) -> bool:
        for rule in self.drop_rules:
            if all(rule.get(key) in (None, val) for key, val in (("src", src), ("dst", dst), ("kind", kind))):
                return True
        return False

    def _enqueue(self, tick, src, dst, channel, kind, body):
        env = Envelope(tick, next(self._seq), src, dst, channel, kind, canonical(body).encode("ascii"))
        heapq.heappush(self._heap, (env.tick, env.seq, env))
        return env

    def send(self, src: str, dst: str, kind: str, body: dict, channel: str = SECURE):
        if self._dropped(src, dst, kind):
            self.note(src, "dropped", dst=dst, kind=kind)
            return None
        delay = 1 + (self.rng.randint(0, self.jitter) if self.jitter else 0)
        return self._enqueue(self.tick + delay, src, dst, channel, kind, body)

    def broadcast(self, src: str, dsts, kind: str, body: dict):
        for dst in dsts:
            self.send(src, dst, kind, body)

    def timer(self, pid: str, delay: int, kind: str, body: dict):
        return self._enqueue(self.tick + delay, pid, pid, TIMER, kind, body)

    def schedule(self, tick: int, body: dict):
        return self._enqueue(tick, SCRIPT, SCRIPT, TIMER, "event", body)

    def publish(self, src: str, kind: str, body: dict):
        """Synchronous append to the board; rejections raise to the caller."""
        env = Envelope(self.tick, next(self._seq), src, BOARD, PUBLIC, kind, canonical(body).encode("ascii"))
        self.deliveries.append(env)
        self.log.append({"event": "publish", **env.meta()})
        self.board.handle(env, self)

    def abort_ceremony(self, exc: CeremonyError):
        self.ceremony_error = exc

    def step(self) -> bool:
        if not self._heap:
            return False
        tick, _, env = heapq.heappop(self._heap)
        self.tick = max(self.tick, tick)
        if env.dst in self.crashed:
            self.log.append({"event": "lost", **env.meta()})
            return True
        party = self.parties.get(env.dst)
        if party is None:
            raise ParameterError(f"no party {env.dst!r}")
        if env.channel != TIMER:
            self.deliveries.append(env)
            self.log.append({"event": "deliver", **env.meta()})
        try:
            party.handle(env, self)
        except ThreshPetError as exc:
            self.note(env.dst, "error", kind=env.kind, error=str(exc) or exc.__class__.__name__)
        return True

    def run(self, until: int | None = None, max_steps: int = 10_000_000):
        for _ in range(max_steps):
            if not self._heap or (until is not None and self._heap[0][0] > until):
                return
            self.step()
        raise RuntimeError("network did not quiesce")

    def reset_clock(self):
        if self._heap:
            raise RuntimeError("clock reset with messages in flight")
        self.tick = 0

    def view(self, parties) -> list[Envelope]:
        """Everything the given parties legitimately observed on the wire."""
        parties = set(parties)
        return [e for e in self.deliveries
                if e.channel == PUBLIC or e.src in parties or e.dst in parties]

    def census(self, since: int = 0) -> Counter:
        """Signing-flow edges as ``(src role, dst role, kind)`` counts."""
        def role(pid):
            return pid.split(":")[0]
        return Counter((role(e.src), role(e.dst), e.kind) for e in self.deliveries[since:]
                       if e.kind not in MPC_KINDS and e.kind not in SETUP_KINDS)


# ---------------------------------------------------------------------------
ACTIONS = {"sign", "expire", "corrupt", "attack", "sabotage", "crash", "drop"}


@dataclass
class ScenarioScript:
    seed: int
    petition: PetitionConfig
    backend: str = "toy"
    users: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    delay_window: int = 0
    behaviours: dict = field(default_factory=dict)
    honeypot: str | None = None
    jitter: int = 0
    dictionary: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioScript":
        try:
            p = d["petition"]
            validators = tuple(d.get("validators") or [f"V{i}" for i in range(1, p["v"] + 1)])
            cfg = PetitionConfig(
                text=p["text"].encode("utf-8"), n=p["n"], k=p["k"], t=p["t"], v=p["v"],
                validators=validators, expiry=p.get("expiry"),
                thresholds=None if p.get("thresholds") is None else tuple(p["thresholds"]),
                triples=p.get("triples"),
            )
            rabbits = d.get("rabbits", {})
            script = cls(
                seed=d.get("seed", 0), petition=cfg, backend=d.get("backend", "toy"),
                users=dict(d.get("users", {})), events=list(d.get("events", [])),
                delay_window=rabbits.get("delay_window", 0),
                behaviours={int(i): b for i, b in rabbits.get("behaviours", {}).items()},
                honeypot=d.get("author", {}).get("honeypot"),
                jitter=d.get("network", {}).get("jitter", 0),
                dictionary=list(d.get("dictionary", [])),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParameterError(f"malformed scenario: {exc!r}") from None
        script.check()
        return script

    @classmethod
    def load(cls, path) -> "ScenarioScript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def check(self):
        get_group(self.backend)
        for name, u in self.users.items():
            if "evidence" not in u:
                raise ParameterError(f"user {name!r} has no evidence")
        for ev in self.events:
            action = ev.get("action")
            if action not in ACTIONS:
                raise ParameterError(f"unknown action {action!r}")
            if not isinstance(ev.get("at", 0), int) or ev.get("at", 0) < 0:
                raise ParameterError("event time must be a non-negative integer")
            if action == "sign":
                if ev.get("user") not in self.users:
                    raise ParameterError(f"unknown user {ev.get('user')!r}")
                vals = ev.get("validators") or list(self.petition.validators[: self.petition.v])
                if any(v not in self.petition.validators for v in vals):
                    raise ParameterError("sign event names an unknown validator")
            if action in ("corrupt", "sabotage"):
                if any(not 1 <= i <= self.petition.k for i in ev.get("rabbits", [])):
                    raise ParameterError("rabbit index out of range")


@dataclass
class ScenarioResult:
    chain_bytes: bytes
    log: list
    reports: list
    network: Network
    script: ScenarioScript

    @property
    def chain(self) -> SignatureChain | None:
        return self.network.chain

    def log_lines(self) -> str:
        return "".join(canonical(entry) + "\n" for entry in self.log)

    def reports_of(self, kind: str) -> list:
        return [r for r in self.reports if r["kind"] == kind]


class Scenario:
    """Builds the parties for a script and drives its events."""

    id = SCRIPT

    def __init__(self, script: ScenarioScript):
        self.script = script
        self.group: Group = get_group(script.backend)
        seed = script.seed
        self.rng = random.Random(f"{seed}:script")
        self.net = Network(random.Random(f"{seed}:net"))
        cfg = script.petition

        def prng(pid):
            return random.Random(f"{seed}:{pid}")

        self.author = Author(self.group, cfg, prng(AUTHOR), script.honeypot)
        self.dealer = Dealer(self.group, prng(DEALER))
        self.rabbits = [KeyRabbit(i, self.group, cfg.k, cfg.t, prng(rabbit_id(i)), script.delay_window,
                                  script.behaviours.get(i)) for i in range(1, cfg.k + 1)]
        self.validators = {vid: Validator(vid, self.group, cfg.t, cfg.k, prng(f"validator:{vid}"))
                           for vid in cfg.validators}
        for p in [self.author, self.dealer, *self.rabbits, *self.validators.values(), self]:
            self.net.register(p)
        self.corrupt_rabbits: set[int] = set()
        self.corrupt_validators: set[str] = set()
        self.sabotaged: set[int] = set()
        self.reports: list[dict] = []
        self.attempts = 0
        self.refusals = 0
        self.signers: dict[str, int] = {}

    # -- driver ---------------------------------------------------------------
    def run(self) -> ScenarioResult:
        net = self.net
        self.author.start(net)
        net.run()
        if self.author.status == "published":
            net.reset_clock()
            net.jitter = self.script.jitter
            for ev in self.script.events:
                net.schedule(ev.get("at", 0), ev)
            net.run()
        if self.script.honeypot is not None:
            self.reports.append(self.honeypot_report())
        if self.sabotaged:
            self.reports.append(self.sabotage_report())
        if (self.corrupt_rabbits or self.corrupt_validators) and not self.reports_of("attack"):
            self.reports.append(self.attack_report())
        self.reports.append(self.summary())
        chain_bytes = net.chain.dumps() if net.chain is not None else b""
        return ScenarioResult(chain_bytes, net.log, self.reports, net, self.script)

    def reports_of(self, kind):
        return [r for r in self.reports if r["kind"] == kind]

    def handle(self, env, net):
        ev = env.body()
        getattr(self, "do_" + ev["action"])(ev)

    def do_sign(self, ev):
        name = ev["user"]
        entry = self.script.users[name]
        testimony = ev.get("testimony", entry.get("testimony"))
        if testimony is not None:
            testimony = testimony.encode("utf-8")
        self.attempts += 1
        user = User(f"{name}#{self.attempts}", self.group, entry["evidence"], self.script.petition.text,
                    testimony, random.Random(f"{self.script.seed}:user:{name}:{self.attempts}"),
                    ev.get("threshold", entry.get("threshold")))
        self.net.register(user)
        vals = ev.get("validators") or list(self.script.petition.validators[: self.script.petition.v])
        if not user.sign(self.net.chain, vals, self.net):
            self.refusals += 1
        else:
            self.signers[user.id] = derive_identifier(self.group, entry["evidence"])

    def do_expire(self, ev):
        net = self.net
        try:
            net.publish(AUTHOR, "expire", {"at": net.tick})
        except ThreshPetError as exc:
            net.note(AUTHOR, "expire-rejected", reason=str(exc))
            return
        net.note(AUTHOR, "expired")
        net.broadcast(AUTHOR, [rabbit_id(r.index) for r in self.rabbits], "expire-directive",
                      {"petition_id": net.chain.header.petition_id.hex()})

    def do_corrupt(self, ev):
        self.corrupt_rabbits.update(ev.get("rabbits", []))
        self.corrupt_validators.update(ev.get("validators", []))
        self.net.note("adversary", "corrupt", rabbits=sorted(self.corrupt_rabbits),
                      validators=sorted(self.corrupt_validators))

    def do_attack(self, ev):
        self.reports.append(self.attack_report())

    def do_sabotage(self, ev):
        for i in ev.get("rabbits", []):
            self.rabbits[i - 1].delete_fragment_shares()
            self.sabotaged.add(i)
        self.net.note("adversary", "sabotage", rabbits=sorted(self.sabotaged))

    def do_crash(self, ev):
        self.net.crashed.update(ev.get("parties", []))

    def do_drop(self, ev):
        self.net.drop_rules.append({key: ev.get(key) for key in ("src", "dst", "kind")})

    # -- reports ----------------------------------------------------------------
    def summary(self) -> dict:
        chain = self.net.chain
        out = {"kind": "summary", "attempts": self.attempts, "refusals": self.refusals,
               "ceremony_error": None, "culprits": []}
        if self.net.ceremony_error is not None:
            out["ceremony_error"] = str(self.net.ceremony_error)
            out["culprits"] = self.net.ceremony_error.culprits
        if chain is not None:
            out.update(trigger=chain.trigger_check().to_dict(), frozen=chain.frozen,
                       validations=len(chain.validations), signatures=len(chain.signatures))
        return out

    def honeypot_report(self) -> dict:
        chain = self.net.chain
        report = chain.ceremony_report() if chain is not None else None
        return {"kind": "honeypot", "mode": self.script.honeypot,
                "detected": report is None or not report.ok,
                "problems": [] if report is None else report.problems,
                "refusals": self.refusals, "signatures": 0 if chain is None else len(chain.signatures)}

    def sabotage_report(self) -> dict:
        """Try to rebuild every unreleased fragment from all shares still held."""
        chain = self.net.chain
        h = chain.header
        rebuilt, failed = [], []
        for j in range(1, h.n + 1):
            if j in chain.released:
                continue
            try:
                pooled = self._pool_fragment(j, [r.index for r in self.rabbits])
                reconstruct_fragment(self.group, j, pooled, h.t, h.public_key, self._commitments(j))
                rebuilt.append(j)
            except ThreshPetError:
                failed.append(j)
        return {"kind": "sabotage", "rabbits": sorted(self.sabotaged), "remaining": h.k - len(self.sabotaged),
                "rebuilt": rebuilt, "unrecoverable": failed, "triggerable": not failed}

    def _commitments(self, j):
        return {(i, j): self.net.chain.transcript.commitments[i, j] for i in range(1, self.script.petition.k + 1)}

    def _pool_fragment(self, j, holders) -> dict:
        pooled = {i: [] for i in range(1, self.script.petition.k + 1)}
        for r in holders:
            for st in self.rabbits[r - 1].petitions.values():
                for (i, jj), value in st.contrib_shares.items():
                    if jj == j:
                        pooled[i].append(ShamirShare(r, value))
        return pooled

    def _candidates(self, shares, t):
        """Secrets consistent with ``shares``; ``None`` means every scalar is."""
        q = self.group.order
        if q <= 1 << 16:
            found = consistent_secrets(self.group, shares, t)
            return None if len(found) == q else set(found)
        if len(shares) >= t:
            return {reconstruct(self.group, shares, t)}
        return None

    def attack_report(self) -> dict:
        """Attempt every attack open to the current corruption set."""
        chain = self.net.chain
        h = chain.header
        t, q = h.t, self.group.order
        corrupt = sorted(self.corrupt_rabbits)
        report = {"kind": "attack", "tick": self.net.tick, "rabbits": corrupt,
                  "validators": sorted(self.corrupt_validators)}

        # (a) fragment theft from pooled contribution shares
        stolen, candidates = {}, {}
        for j in range(1, h.n + 1):
            if j in chain.released:
                continue
            pooled = self._pool_fragment(j, corrupt)
            sums = {0}
            for i in range(1, h.k + 1):
                cands = self._candidates(pooled[i], t)
                if cands is None:
                    sums = None
                    break
                sums = {(a + b) % q for a in sums for b in cands}
            candidates[j] = q if sums is None else len(sums)
            if sums is not None and len(sums) == 1:
                (s,) = sums
                if self.group.generator ** s == h.public_key.fragment_publics[j - 1]:
                    stolen[j] = s
        report["fragment_theft"] = {"targets": sorted(candidates), "candidates": candidates,
                                    "recovered": sorted(stolen), "success": bool(stolen)}

        # (b) h_P on a fresh challenge identity
        u = self.group.random_scalar(self.rng, nonzero=True)
        key_shares = [r.petitions[h.petition_id].hash_key.share for r in self.rabbits
                      if r.index in self.corrupt_rabbits and h.petition_id in r.petitions
                      and r.petitions[h.petition_id].hash_key is not None]
        truth = h.hash_generator ** (self._true_hash_key() * u)
        cands = self._candidates(key_shares, t)
        outputs = None if cands is None else {h.hash_generator ** (kk * u) for kk in cands}
        report["hash_challenge"] = {
            "candidates": q if outputs is None else len(outputs),
            "success": outputs is not None and outputs == {truth},
        }

        # (c) signer identification before trigger
        report["identification"] = self._identify(stolen)
        if self.corrupt_validators:
            report["validator"] = self._validator_view()
        return report

    def _true_hash_key(self) -> int:
        shares = [r.petitions[self.net.chain.header.petition_id].hash_key.share for r in self.rabbits]
        return reconstruct(self.group, shares, self.script.petition.t)

    def _identify(self, stolen: dict) -> dict:
        chain = self.net.chain
        h = chain.header
        ids = {f"rabbit:{i}" for i in self.corrupt_rabbits}
        sessions: dict[tuple, list] = {}
        for env in self.net.view(ids):
            if env.kind == "u-share" and env.dst in ids:
                b = env.body()
                sessions.setdefault((b["validator"], b["session_hash"]), []).append(
                    ShamirShare(b["index"], self.group.scalar_from_hex(b["value"])))
        identified = set()
        for shares in sessions.values():
            cands = self._candidates(shares, h.t)
            if cands is not None and len(cands) == 1:
                identified |= cands
        # decryption with every fragment the adversary holds, released or stolen
        known = dict(chain.released)
        known.update(stolen)
        opened = 0
        for _, sig in chain.signatures:
            n_u = h.effective_threshold(sig.threshold)
            if all(j in known for j in range(1, n_u + 1)):
                s = sum(known[j] for j in range(1, n_u + 1)) % self.group.order
                try:
                    hybrid_decrypt(s, sig.testimony)
                    opened += 1
                except ThreshPetError:
                    pass
        true_signers = set(self.signers.values())
        return {"sessions_observed": len(sessions), "identities_recovered": len(identified),
                "records_opened": opened,
                "success": bool(identified & true_signers) or opened > 0}

    def _validator_view(self) -> dict:
        """What corrupt validators learn, and whether they can link sessions to a petition."""
        text = self.net.chain.header.petition_text
        issued, hashes = set(), set()
        for vid in sorted(self.corrupt_validators):
            val = self.validators[vid]
            issued.update(val.registry.values())
            hashes.update((vid, sh) for sh in val.seen_hashes)
        linked = 0
        for vid, sh in hashes:
            for guess in self.script.dictionary:
                p_u = text + guess.encode("utf-8")
                if self.group.scalar_hex(session_hash(self.group, vid, p_u)) == sh:
                    linked += 1
                    break
        return {"issued": sorted(self.group.scalar_hex(u) for u in issued),
                "sessions": len(hashes), "linked": linked}


def run_scenario(script: ScenarioScript | dict) -> ScenarioResult:
    if isinstance(script, dict):
        script = ScenarioScript.from_dict(script)
    return Scenario(script).run()
