import json
import subprocess
import sys
from pathlib import Path

import pytest

from threshpet.cli import main

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


def jl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture
def petition(tmp_path, capsys):
    chain = str(tmp_path / "p.chain")
    code, _ = run(capsys, "--chain", chain, "--backend", "toy", "--seed", "1",
                  "new", "--text", "fix the roof", "--n", "3", "--k", "3", "--t", "2", "--v", "1")
    assert code == 0
    return chain


def sign(capsys, chain, ident, *extra):
    return run(capsys, "sign", "--chain", chain, "--seed", "1", "--identity", ident, "--now", "0", *extra)


def test_full_flow(petition, capsys):
    # toy identifiers live in Z_11; these three differ
    ids = ["alice@example.org", "bob@example.org", "carol@example.org"]
    from threshpet.group import TOY
    from threshpet.parties import derive_identifier
    assert len({derive_identifier(TOY, i) for i in ids}) == 3
    code, out = run(capsys, "--chain", petition, "decrypt")
    assert code == 3 and "not triggered" in out.lower()
    for i, ident in enumerate(ids):
        code, out = sign(capsys, petition, ident, "--testimony", f"saw it {i}")
        assert code == 0, out
    assert "TRIGGERED" in out and "NOT_TRIGGERED" not in out
    code, out = run(capsys, "--chain", petition, "--format", "json-lines", "decrypt")
    rows = jl(out)
    assert code == 0 and len(rows) == 3
    assert {bytes.fromhex(r["testimony"]) for r in rows} == {b"saw it 0", b"saw it 1", b"saw it 2"}
    code, out = run(capsys, "--chain", petition, "verify")
    assert code == 0 and out.startswith("ok:")


def test_duplicate_signature_rejected(petition, capsys):
    assert sign(capsys, petition, "alice@example.org")[0] == 0
    before = Path(petition).read_bytes()
    code, out = sign(capsys, petition, "alice@example.org")
    assert code == 3 and "duplicate" in out
    assert Path(petition).read_bytes() == before


def test_status_json(petition, capsys):
    sign(capsys, petition, "alice@example.org")
    code, out = run(capsys, "status", "--chain", petition, "--format", "json-lines")
    (row,) = jl(out)
    assert code == 0 and row["signatures"] == 1 and row["state"] == "NOT_TRIGGERED"


@pytest.mark.parametrize("argv", [
    ["new", "--text", "x", "--n", "3", "--k", "2", "--t", "3"],
    ["new", "--text", "x", "--n", "3", "--k", "3", "--t", "2", "--thresholds", "1,2"],
    ["new", "--text", "x", "--n", "0", "--k", "3", "--t", "2"],
])
def test_parameter_errors(tmp_path, capsys, argv):
    code, out = run(capsys, "--chain", str(tmp_path / "c"), "--backend", "toy", *argv)
    assert code == 2 and out.startswith("error:")


def test_missing_chain_file(tmp_path, capsys):
    assert run(capsys, "--chain", str(tmp_path / "nope"), "status")[0] == 2


def test_corruption_detected(petition, capsys):
    sign(capsys, petition, "alice@example.org")
    data = bytearray(Path(petition).read_bytes())
    data[len(data) // 2] ^= 0x01
    Path(petition).write_bytes(bytes(data))
    code, out = run(capsys, "--chain", petition, "--format", "json-lines", "verify")
    assert code == 4 and all(r["kind"] == "problem" for r in jl(out))


def test_expire_freezes(tmp_path, capsys):
    petition = str(tmp_path / "e.chain")
    run(capsys, "--chain", petition, "--backend", "toy", "--seed", "1",
        "new", "--text", "x", "--n", "3", "--k", "3", "--t", "2", "--expiry", "5")
    sign(capsys, petition, "alice@example.org")
    code, out = run(capsys, "--chain", petition, "expire", "--now", "4")
    assert code == 3 and "not reached" in out
    code, _ = run(capsys, "--chain", petition, "expire", "--now", "5")
    assert code == 0
    keys = json.loads((Path(petition + ".keys") / "rabbit-1.json").read_text())
    assert "erased" in json.dumps(keys)
    code, out = sign(capsys, petition, "bob@example.org")
    assert code == 3 and "expired" in out


def test_expire_without_expiry_rejected(petition, capsys):
    code, out = run(capsys, "--chain", petition, "expire", "--now", "5")
    assert code == 3 and "no expiry" in out
    assert run(capsys, "--chain", petition, "verify")[0] == 0


def test_seeded_new_is_deterministic(tmp_path, capsys):
    paths = [tmp_path / "a", tmp_path / "b"]
    for p in paths:
        run(capsys, "--chain", str(p), "--backend", "toy", "--seed", "9",
            "new", "--text", "t", "--n", "2", "--k", "3", "--t", "2")
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_simulate_scenario(tmp_path, capsys):
    log = tmp_path / "log"
    code, out = run(capsys, "--format", "json-lines", "simulate", str(SCENARIOS / "alice_bob.json"),
                    "--log", str(log), "--chain", str(tmp_path / "sim.chain"))
    assert code == 0
    summary = [r for r in jl(out) if r["kind"] == "summary"][0]
    assert summary["trigger"]["m_star"] == 10
    assert log.read_text().count("\n") > 100
    assert run(capsys, "--chain", str(tmp_path / "sim.chain"), "verify")[0] == 0


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "threshpet.cli", "--chain", str(tmp_path / "x"), "status"],
                         capture_output=True, text=True)
    assert res.returncode == 2
