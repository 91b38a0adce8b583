import random
from collections import Counter

import pytest

from threshpet.errors import ParameterError, SessionError
from threshpet.group import SECP256K1, TOY
from threshpet.parties import (
    KeyRabbit,
    PetitionConfig,
    Validator,
    derive_identifier,
    session_hash,
)
from threshpet.simnet import Scenario, ScenarioScript, run_scenario
from threshpet.vss import reconstruct

from _util import distinct_identities, honest_script


def test_identifier_is_validator_independent():
    a = Validator("V1", SECP256K1, 2, 3, random.Random(0))
    b = Validator("V2", SECP256K1, 2, 3, random.Random(1))
    assert a.validate_user("passport:123") == b.validate_user("passport:123") != 0
    assert a.validate_user("passport:124") != a.validate_user("passport:123")
    for bad in ("", " padded", "tab\there", None):
        with pytest.raises(ParameterError):
            a.validate_user(bad)


def test_zero_identifier_resampled():
    # find toy evidence whose first hash is 0
    ev = next(f"z{i}" for i in range(1000) if TOY.hash_to_scalar(b"identity", f"z{i}".encode()) == 0)
    assert derive_identifier(TOY, ev) != 0
    assert derive_identifier(TOY, ev) == derive_identifier(TOY, ev)


def test_session_hash_is_per_validator():
    p_u = b"Pet" + b"testimony"
    assert session_hash(SECP256K1, "V1", p_u) == SECP256K1.hash_to_scalar(b"validator:V1", p_u)
    assert session_hash(SECP256K1, "V1", p_u) != session_hash(SECP256K1, "V2", p_u)


def test_distribute_unknown_session():
    v = Validator("V1", TOY, 2, 3, random.Random(0))
    with pytest.raises(SessionError):
        v.distribute("00", None)


def _ready_scenario(**kw):
    sc = Scenario(ScenarioScript.from_dict(honest_script(TOY, signers=0, **kw)))
    sc.author.start(sc.net)
    sc.net.run()
    sc.net.reset_clock()
    return sc


def test_reveal_checks():
    sc = _ready_scenario()
    r = sc.rabbits[0]
    text = sc.script.petition.text
    sh = TOY.scalar_hex(session_hash(TOY, "V1", text + b"m"))
    assert r.check_reveal("V1", sh, text + b"m", None) == sc.net.chain.header.petition_id
    with pytest.raises(SessionError, match="preimage"):
        r.check_reveal("V1", sh, text + b"n", None)
    other = b"Another petition" + b"m"
    with pytest.raises(SessionError, match="unknown petition"):
        r.check_reveal("V1", TOY.scalar_hex(session_hash(TOY, "V1", other)), other, None)
    with pytest.raises(SessionError):
        r.check_reveal("V1", sh, text + b"m", 2)


def test_honest_flow_census_matches_signature_diagram():
    sc = _ready_scenario()
    mark = len(sc.net.deliveries)
    sc.script.users["alice"] = {"evidence": "alice", "testimony": "hi"}
    sc.net.schedule(0, {"action": "sign", "user": "alice"})
    sc.net.run()
    assert sc.net.census(mark) == Counter({
        ("user", "validator", "sign-request"): 1,
        ("validator", "rabbit", "u-share"): 3,
        ("user", "rabbit", "reveal"): 3,
        ("rabbit", "board", "append-validation"): 1,
        ("rabbit", "board", "append-signature"): 1,
    })
    assert len(sc.net.chain.validations) == 1 and len(sc.net.chain.signatures) == 1


def _scalars(obj, seen=None):
    """Every int reachable from ``obj`` (dataclasses, dicts, lists, shares)."""
    seen = set() if seen is None else seen
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, bool):
        return
    if isinstance(obj, int):
        yield obj
    elif isinstance(obj, bytes):
        yield int.from_bytes(obj, "big")
    elif isinstance(obj, str):
        try:
            yield int(obj, 16)
        except ValueError:
            pass
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from _scalars(k, seen)
            yield from _scalars(v, seen)
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for v in obj:
            yield from _scalars(v, seen)
    elif hasattr(obj, "__dict__") or hasattr(obj, "__dataclass_fields__"):
        for name in getattr(obj, "__dataclass_fields__", None) or vars(obj):
            if name not in ("group", "rng"):
                yield from _scalars(getattr(obj, name), seen)


def test_rabbit_state_never_holds_identifier_in_clear():
    """Structural scan of every rabbit's state after every delivery (secp256k1, so no chance hits)."""
    sc = _ready_scenario(n=3, k=3, t=2, backend="prod")
    evidence = ["alice", "bob", "carol"]
    us = {derive_identifier(SECP256K1, e) for e in evidence}
    for i, e in enumerate(evidence):
        sc.script.users[f"x{i}"] = {"evidence": e, "testimony": None}
        sc.net.schedule(i, {"action": "sign", "user": f"x{i}"})
    steps = 0
    while sc.net.step():
        steps += 1
        for r in sc.rabbits:
            assert us.isdisjoint(_scalars(r)), f"u found in rabbit {r.index} after step {steps}"
    assert len(sc.net.chain.signatures) == 3
    assert {d.identity for d in sc.net.chain.decrypt_chain()} == us


def test_toy_session_collision_rejected_not_merged():
    sc = _ready_scenario(n=5)
    text = sc.script.petition.text
    # two testimonies with the same toy session hash at V1
    by_hash = {}
    for i in range(100):
        by_hash.setdefault(session_hash(TOY, "V1", text + b"m%d" % i), []).append("m%d" % i)
    pair = next(v for v in by_hash.values() if len(v) >= 2)[:2]
    ev = distinct_identities(TOY, 2)
    for i in range(2):
        sc.script.users[f"c{i}"] = {"evidence": ev[i], "testimony": pair[i]}
        sc.net.schedule(0, {"action": "sign", "user": f"c{i}"})
    sc.net.run()
    assert len(sc.net.chain.signatures) == 0
    assert any(e.get("reason") == "session collision" for e in sc.net.log)


def test_second_attempt_rejected_before_fragment_release():
    script = honest_script(TOY, n=3, signers=1)
    script["events"].append({"at": 50, "action": "sign", "user": "u0", "testimony": "again"})
    res = run_scenario(script)
    chain = res.chain
    assert len(chain.signatures) == 1 and len(chain.released) == 1
    assert any(e.get("reason") == "duplicate user" for e in res.log)


def test_two_validators_one_signature():
    script = honest_script(TOY, v=2, signers=2, validators=["V1", "V2", "V3"])
    script["events"].append({"at": 40, "action": "sign", "user": "u0", "validators": ["V3", "V2"]})
    res = run_scenario(script)
    chain = res.chain
    assert len(chain.validations) == 4 and len(chain.signatures) == 2
    for _, sig in chain.signatures:
        assert len({r.validator for r in chain.validations_for(sig.dup_hash)}) == 2


def test_insufficient_triples():
    res = run_scenario(honest_script(TOY, signers=3, triples=1))
    assert len(res.chain.signatures) == 1
    assert any(e.get("reason") == "insufficient triples" for e in res.log)


def test_rabbit_persistence_round_trip():
    sc = _ready_scenario()
    for r in sc.rabbits:
        again = KeyRabbit.from_dict(r.to_dict(), TOY, random.Random(0))
        assert again.to_dict() == r.to_dict()


def test_petition_config_checks():
    with pytest.raises(ParameterError):
        PetitionConfig(b"x", 3, 3, 4, 1, ("V1",))
    with pytest.raises(ParameterError):
        PetitionConfig(b"x", 3, 3, 2, 2, ("V1",))
    with pytest.raises(ParameterError):
        PetitionConfig(b"x", 3, 3, 2, 1, ("V1",), thresholds=(1, 2))


def test_hash_key_shares_reconstruct_consistently():
    sc = _ready_scenario()
    pid = sc.net.chain.header.petition_id
    shares = [r.petitions[pid].hash_key.share for r in sc.rabbits]
    key = reconstruct(TOY, shares[:2], 2)
    assert key == reconstruct(TOY, shares[1:], 2) != 0
    assert TOY.generator ** key == sc.net.chain.header.hash_key_commitment.public
