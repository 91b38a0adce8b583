"""Command-line front end.

All parties run in this process.  Rabbit key material lives next to the
chain file in ``<chain>.keys/rabbit-<i>.json``; every file is replaced
atomically, and the chain is written last.

Exit codes: 0 success, 2 parameter or validation error, 3 protocol
rejection, 4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import random
import secrets
import sys
import time
from pathlib import Path

from .chain import SignatureChain, atomic_write, canonical, replay
from .errors import (
    CeremonyError,
    ParameterError,
    ProtocolRejection,
    ThreshPetError,
    VerificationError,
)
from .group import get_group
from .parties import AUTHOR, Author, Dealer, KeyRabbit, PetitionConfig, User, Validator
from .simnet import Network, ScenarioScript, run_scenario

EXIT_OK, EXIT_PARAM, EXIT_REJECTED, EXIT_VERIFY = 0, 2, 3, 4


class Rejected(ProtocolRejection):
    pass


def keys_dir(chain_path) -> Path:
    p = Path(chain_path)
    return p.with_name(p.name + ".keys")


def command_rng(seed, command: str, head: str, party: str = ""):
    """Per-command randomness: ``H(seed | command | chain head | party)`` when seeded."""
    if seed is None:
        return secrets.SystemRandom()
    return random.Random(hashlib.sha256(f"{seed}|{command}|{head}|{party}".encode()).digest())


class Output:
    def __init__(self, fmt: str, stream=None):
        self.fmt = fmt
        self.stream = stream or sys.stdout

    def emit(self, kind: str, text: str | None = None, **fields):
        if self.fmt == "json-lines":
            print(canonical({"kind": kind, **fields}), file=self.stream)
        else:
            if text is None:
                text = " ".join(f"{k}={v}" for k, v in fields.items())
            print(text, file=self.stream)


# ---------------------------------------------------------------------------
def load_chain(path) -> SignatureChain:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ParameterError(f"cannot read chain file: {exc.strerror}") from None
    return SignatureChain.loads(data)


def load_rabbits(path, chain: SignatureChain, seed, command: str) -> list[KeyRabbit]:
    rabbits = []
    for i in range(1, chain.header.k + 1):
        f = keys_dir(path) / f"rabbit-{i}.json"
        try:
            d = json.loads(f.read_text())
        except (OSError, ValueError) as exc:
            raise ParameterError(f"cannot read key material for rabbit {i}: {exc}") from None
        rabbits.append(KeyRabbit.from_dict(d, chain.group, command_rng(seed, command, chain.head, f"rabbit:{i}")))
    return rabbits


def save_rabbits(path, rabbits):
    d = keys_dir(path)
    d.mkdir(exist_ok=True)
    for r in rabbits:
        atomic_write(d / f"rabbit-{r.index}.json", (canonical(r.to_dict()) + "\n").encode())


def _now(args) -> int:
    return int(time.time()) if args.now is None else args.now


def _ints(text):
    if text is None:
        return None
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ParameterError(f"not a comma-separated integer list: {text!r}") from None


# ---------------------------------------------------------------------------
def cmd_new(args, out: Output) -> int:
    path = Path(args.chain)
    if path.exists():
        raise ParameterError(f"{path} already exists")
    group = get_group(args.backend)
    validators = tuple(args.validators.split(",")) if args.validators else \
        tuple(f"V{i}" for i in range(1, args.v + 1))
    cfg = PetitionConfig(args.text.encode("utf-8"), args.n, args.k, args.t, args.v, validators,
                         args.expiry, _ints(args.thresholds), args.triples)
    seed = args.seed
    net = Network(command_rng(seed, "new", "", "net"))
    author = Author(group, cfg, command_rng(seed, "new", "", AUTHOR))
    rabbits = [KeyRabbit(i, group, cfg.k, cfg.t, command_rng(seed, "new", "", f"rabbit:{i}"), args.delay_window)
               for i in range(1, cfg.k + 1)]
    for p in [author, Dealer(group, command_rng(seed, "new", "", "dealer")), *rabbits]:
        net.register(p)
    author.start(net)
    net.run()
    if net.ceremony_error is not None:
        raise net.ceremony_error
    chain = net.chain
    save_rabbits(path, rabbits)
    chain.save(path)
    h = chain.header
    out.emit("created", f"created {path}: n={h.n} k={h.k} t={h.t} v={h.v}"
             + (f" thresholds={','.join(map(str, h.thresholds))}" if h.multi else ""),
             chain=str(path), petition_id=h.petition_id.hex(), n=h.n, k=h.k, t=h.t, v=h.v,
             thresholds=None if h.thresholds is None else list(h.thresholds), records=len(chain.records))
    return EXIT_OK


def cmd_sign(args, out: Output) -> int:
    chain = load_chain(args.chain)
    h = chain.header
    now = _now(args)
    if chain.frozen or (h.expiry is not None and now >= h.expiry):
        raise Rejected("expired")
    seed = args.seed
    head = chain.head
    rabbits = load_rabbits(args.chain, chain, seed, "sign")
    net = Network(command_rng(seed, "sign", head, "net"))
    net.board.chain = chain
    net.tick = now
    for r in rabbits:
        net.register(r)
    vids = args.validators.split(",") if args.validators else list(h.validators[: h.v])
    unknown = [v for v in vids if v not in h.validators]
    if unknown:
        raise ParameterError(f"unknown validator(s): {', '.join(unknown)}")
    for vid in vids:
        net.register(Validator(vid, h.group, h.t, h.k, command_rng(seed, "sign", head, f"validator:{vid}")))
    testimony = None if args.testimony is None else args.testimony.encode("utf-8")
    user = User("cli", h.group, args.identity, h.petition_text, testimony,
                command_rng(seed, "sign", head, "user"), args.threshold)
    net.register(user)
    if args.threshold is not None:
        h.check_threshold(args.threshold)
    before = len(chain.records)
    if not user.sign(chain, vids, net):
        raise VerificationError(chain.ceremony_report().problems)
    net.run()
    reasons = [e.get("reason") for e in net.log if e.get("event") in ("rejected", "session-rejected", "refused")]
    appended = chain.records[before:]
    save_rabbits(args.chain, rabbits)
    if appended:
        chain.save(args.chain)
    for idx, rec in enumerate(appended, start=before):
        out.emit("record", f"appended record {idx} ({rec['type']}) {rec['hash']}",
                 index=idx, type=rec["type"], hash=rec["hash"])
    if reasons:
        reason = reasons[0]
        if reason == "malformed evidence":
            raise ParameterError(reason)
        raise Rejected(reason)
    if not any(rec["type"] == "cyphersignature" for rec in appended):
        raise Rejected("insufficient validations")
    report = chain.trigger_check()
    out.emit("trigger", report.state, **report.to_dict())
    return EXIT_OK


def cmd_status(args, out: Output) -> int:
    chain = load_chain(args.chain)
    h = chain.header
    rep = chain.trigger_check()
    out.emit("status",
             f"signatures={rep.signatures} validations={len(chain.validations)} "
             f"released={','.join(map(str, rep.released)) or '-'} state={rep.state}"
             + (f" m*={rep.m_star} decryptable={len(rep.decryptable)}" if h.multi else "")
             + (" frozen" if chain.frozen else ""),
             n=h.n, k=h.k, t=h.t, v=h.v, validations=len(chain.validations), frozen=chain.frozen,
             records=len(chain.records), **rep.to_dict())
    return EXIT_OK


def cmd_verify(args, out: Output) -> int:
    try:
        with open(args.chain, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ParameterError(f"cannot read chain file: {exc.strerror}") from None
    chain, problems = replay(data)
    if problems:
        for p in problems:
            out.emit("problem", p, problem=p)
        return EXIT_VERIFY
    out.emit("verified", f"ok: {len(chain.records)} records verified", records=len(chain.records))
    return EXIT_OK


def _show(b: bytes) -> str:
    try:
        text = b.decode("utf-8")
        if text.isprintable():
            return text
    except UnicodeDecodeError:
        pass
    return b.hex()


def cmd_decrypt(args, out: Output) -> int:
    chain = load_chain(args.chain)
    rows = chain.decrypt_chain()
    for d in rows:
        if d.error:
            out.emit("signature", f"record {d.record}: {d.error}", record=d.record, error=d.error)
        else:
            out.emit("signature", f"record {d.record}: u={chain.group.scalar_hex(d.identity)} "
                     f"testimony={_show(d.testimony)!r}", record=d.record,
                     identity=chain.group.scalar_hex(d.identity), testimony=d.testimony.hex(),
                     threshold=d.threshold)
    return EXIT_OK


def cmd_expire(args, out: Output) -> int:
    chain = load_chain(args.chain)
    now = _now(args)
    chain.expire(now)
    rabbits = load_rabbits(args.chain, chain, args.seed, "expire")
    for r in rabbits:
        for st in r.petitions.values():
            r.erase(st)
    save_rabbits(args.chain, rabbits)
    chain.save(args.chain)
    out.emit("expired", f"expired at {now}; rabbit stores erased", at=now)
    return EXIT_OK


def cmd_simulate(args, out: Output) -> int:
    try:
        with open(args.script, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ParameterError(f"cannot read scenario: {exc}") from None
    if args.seed is not None:
        d["seed"] = args.seed
    result = run_scenario(ScenarioScript.from_dict(d))
    if args.chain:
        atomic_write(args.chain, result.chain_bytes)
    if args.log:
        atomic_write(args.log, result.log_lines().encode("utf-8"))
    for rep in result.reports:
        fields = {k: v for k, v in rep.items() if k != "kind"}
        out.emit(rep["kind"], canonical(rep) if out.fmt != "json-lines" else None, **fields)
    return EXIT_OK


# ---------------------------------------------------------------------------
def _global_flags(parser, defaults: bool):
    # accepted before or after the subcommand; subparser copies never override with defaults
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--chain", default=d(None), help="chain file")
    parser.add_argument("--backend", choices=["toy", "prod"], default=d("prod"))
    parser.add_argument("--seed", type=int, default=d(None), help="make the command deterministic")
    parser.add_argument("--format", choices=["text", "json-lines"], default=d("text"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="threshpet", description="Threshold-anonymous petitions.")
    _global_flags(ap, True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, False)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("new", help="create a petition and run the key ceremony")
    p.add_argument("--text", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--v", type=int, default=1)
    p.add_argument("--validators", help="comma-separated validator ids")
    p.add_argument("--thresholds", help="comma-separated n_1 < ... < n_r (last must equal n)")
    p.add_argument("--expiry", type=int)
    p.add_argument("--triples", type=int)
    p.add_argument("--delay-window", type=int, default=0)

    p = add("sign", help="validate a user and append their signature")
    p.add_argument("--identity", required=True)
    p.add_argument("--testimony")
    p.add_argument("--threshold", type=int)
    p.add_argument("--validators")
    p.add_argument("--now", type=int)

    add("status", help="counts and trigger state")
    add("verify", help="recompute every public check")
    add("decrypt", help="decrypt signatures once triggered")

    p = add("expire", help="freeze the petition and erase rabbit stores")
    p.add_argument("--now", type=int)

    p = add("simulate", help="run a scenario script")
    p.add_argument("script")
    p.add_argument("--log", help="write the event log here")
    return ap


COMMANDS = {"new": cmd_new, "sign": cmd_sign, "status": cmd_status, "verify": cmd_verify,
            "decrypt": cmd_decrypt, "expire": cmd_expire, "simulate": cmd_simulate}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    out = Output(args.format)
    if args.command != "simulate" and not args.chain:
        ap.error("--chain is required")
    try:
        return COMMANDS[args.command](args, out)
    except VerificationError as exc:
        for p in exc.problems:
            out.emit("error", f"error: {p}", error=p)
        return EXIT_VERIFY
    except ParameterError as exc:
        out.emit("error", f"error: {exc}", error=str(exc))
        return EXIT_PARAM
    except (ProtocolRejection, CeremonyError) as exc:
        fields = {"culprits": exc.culprits} if isinstance(exc, CeremonyError) else {}
        out.emit("error", f"error: {exc}", error=str(exc), **fields)
        return EXIT_REJECTED
    except ThreshPetError as exc:
        out.emit("error", f"error: {exc}", error=str(exc))
        return EXIT_REJECTED


if __name__ == "__main__":
    sys.exit(main())
