import json
import subprocess
import sys

import pytest

from fedblind.cli import main
from fedblind.harness import SimConfig, run_scenario
from fedblind.numcore import DeterministicRng, RsaKeyPair, Seed
from fedblind.oprf import DomainCredential
from fedblind.protocol import CentralService, FederationDirectory, IdentityProvider, idp_name
from fedblind.registry import Registry
from fedblind.wire import Router, serve

SEED = "00" * 31 + "01"


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.strip()]
    return code, lines[-1] if lines else None


def test_keygen_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.key", tmp_path / "b.key"
    assert run_cli(capsys, "keygen", "--key-bits", 64, "--seed", SEED, "--out", a)[0] == 0
    assert run_cli(capsys, "keygen", "--key-bits", 64, "--seed", SEED, "--out", b)[0] == 0
    assert a.read_text() == b.read_text()
    assert RsaKeyPair.load(a).modulus_n.bit_length() == 64
    assert (tmp_path / "a.pub").exists()


def test_sim_matches_library(capsys):
    code, out = run_cli(capsys, "sim", "--scenario", "duplicate-no-token", "--seed", SEED)
    assert code == 0
    assert out["duplicates_detected"] == out["duplicates_attempted"] == 1
    report, _ = run_scenario(SimConfig(seed=Seed.from_hex(SEED), scenario="duplicate-no-token"))
    assert out == report.to_dict()


def test_audit_against_saved_transcript(tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    assert run_cli(capsys, "sim", "--scenario", "honest", "--seed", SEED, "--transcript-out", t)[0] == 0
    code, out = run_cli(capsys, "audit", "--scenario", "honest", "--seed", SEED, "--transcript", t)
    assert code == 0 and out["result"] == "clean" and out["transcript_match"]
    code, out = run_cli(capsys, "audit", "--scenario", "kyc-fail", "--seed", SEED, "--transcript", t)
    assert code == 1 and not out["transcript_match"]


@pytest.mark.parametrize("argv", [[], ["bogus"], ["sim"], ["sim", "--scenario", "nope"],
                                  ["sim", "--scenario", "honest", "--seed", "zz"],
                                  ["sim", "--scenario", "honest", "--frobnicate"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2


def test_missing_setting_is_exit_2(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("FEDBLIND_CONFIG", raising=False)
    code, out = run_cli(capsys, "check", "--upi", "x")
    assert code == 2 and out["code"] == "config_error"


@pytest.fixture
def federation(tmp_path, capsys):
    """Key, directory and two credentials made by the CLI; services started in-process."""
    key = tmp_path / "cts.key"
    directory = tmp_path / "dir.txt"
    run_cli(capsys, "keygen", "--key-bits", 64, "--seed", SEED, "--out", key)
    for i in ("1", "2"):
        code, _ = run_cli(capsys, "onboard-idp", "--key", key, "--idp-id", i,
                          "--directory", directory, "--out", tmp_path / f"{i}.cred")
        assert code == 0
    code, out = run_cli(capsys, "onboard-idp", "--key", key, "--idp-id", "1", "--directory", directory)
    assert code == 2 and out["code"] == "duplicate_idp_id"

    fed_dir = FederationDirectory.load(directory)
    peer_router = Router()
    cts = CentralService(RsaKeyPair.load(key), DeterministicRng(Seed.from_int(0), "cts"), peer_router,
                         Registry.open(tmp_path / "reg.log", fed_dir.cts_pub.n_len), fed_dir)
    services = [serve(cts)]
    peers = {}
    for i in ("1", "2"):
        cred = DomainCredential.from_text((tmp_path / f"{i}.cred").read_text())
        idp = IdentityProvider(cred, fed_dir, DeterministicRng(Seed.from_int(1), i), Router())
        svc = serve(idp)
        services.append(svc)
        peer_router.route(idp_name(i), svc.address)
        peers[i] = svc.address_text
    yield {"dir": tmp_path, "cts": services[0].address_text, "peers": peers, "directory": directory, "registry": cts.registry}
    for svc in services:
        svc.shutdown()
    peer_router.close()
    cts.registry.close()


def client_args(f, idp, verb, upi, *extra):
    args = [verb, "--cts", f["cts"], "--credential", f["dir"] / f"{idp}.cred", "--directory", f["directory"],
            "--upi", upi, "--seed", SEED]
    for i, addr in f["peers"].items():
        args += ["--peer", f"{i}={addr}"]
    return args + list(extra)


def test_enroll_flow(federation, capsys):
    f = federation
    user_key = f["dir"] / "alice.key"
    tok = f["dir"] / "alice.tok"
    code, out = run_cli(capsys, *client_args(f, "1", "check", "UPI-alice"))
    assert code == 0 and out["result"] == "clear"

    code, out = run_cli(capsys, *client_args(f, "1", "enroll", "UPI-alice", "--user-key", user_key,
                                             "--key-bits", 64, "--token-out", tok))
    assert code == 0 and out["result"] == "token_issued" and tok.exists()

    code, out = run_cli(capsys, *client_args(f, "1", "enroll", "UPI-alice", "--user-key", user_key, "--key-bits", 64))
    assert (code, out["code"]) == (1, "already_registered")

    code, out = run_cli(capsys, *client_args(f, "2", "enroll-with-token", "UPI-alice", "--user-key", user_key,
                                             "--token", tok))
    assert code == 0 and out["token"]["pid"] != json.loads(tok.read_text())["pid"]

    code, out = run_cli(capsys, *client_args(f, "2", "enroll-with-token", "UPI-alice",
                                             "--user-key", f["dir"] / "mallory.key", "--key-bits", 64, "--token", tok,
                                             "--seed", "ab" * 32))
    assert (code, out["code"]) == (1, "proof_of_possession_failed")

    code, out = run_cli(capsys, *client_args(f, "1", "enroll", "UPI-bob", "--kyc", "fail",
                                             "--user-key", user_key))
    assert (code, out["code"]) == (1, "kyc_failed")
    assert f["registry"].summary()["records"] == 2
    assert len(Registry.load(f["dir"] / "reg.log")) == 2


def test_check_matches_over_wire(federation, capsys):
    f = federation
    assert run_cli(capsys, *client_args(f, "1", "enroll", "UPI-carol", "--user-key", f["dir"] / "c.key",
                                        "--key-bits", 64))[0] == 0
    code, out = run_cli(capsys, *client_args(f, "2", "check", "UPI-carol"))
    assert code == 1 and out["result"] == "matched"
    assert f["registry"].summary()["alarm"] == 1


def test_config_file_via_env(federation, capsys, monkeypatch):
    f = federation
    cfg = f["dir"] / "client.conf"
    lines = [f"cts={f['cts']}", f"credential={f['dir'] / '2.cred'}", f"directory={f['directory']}", f"seed={SEED}"]
    lines += [f"idp.{i}={a}" for i, a in f["peers"].items()]
    cfg.write_text("\n".join(lines) + "\n")
    monkeypatch.setenv("FEDBLIND_CONFIG", str(cfg))
    code, out = run_cli(capsys, "check", "--upi", "UPI-dave")
    assert code == 0 and out["result"] == "clear"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fedblind", "sim", "--scenario", "honest", "--seed", SEED],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["leakage_violations"] == 0
