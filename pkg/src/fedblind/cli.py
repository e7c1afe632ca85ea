"""``fedblind`` command line.

Exit codes: 0 success, 1 protocol rejection, 2 usage or configuration error.
Every result is printed as one JSON object per line on stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from .credentials import Token, UserKeyPair, load_user_key
from .errors import ConfigError, FedblindError, ProtocolRejection
from .harness import SCENARIOS, SimConfig, Transcript, run_scenario
from .numcore import DEFAULT_KEY_BITS, DeterministicRng, RsaKeyPair, Seed, generate_keypair, to_hex
from .oprf import DomainCredential
from .protocol import CTS_NAME, CentralService, FederationDirectory, IdentityProvider, KycOracle, Upi, User, idp_name
from .registry import Registry
from .wire import Router, load_config, serve

VERBS = ("keygen", "onboard-idp", "serve-cts", "serve-idp", "enroll", "enroll-with-token", "check", "sim", "audit")


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True, separators=(",", ":")), flush=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        _emit({"result": "error", "code": "usage", "detail": message})
        raise SystemExit(2)


def _seed_arg(text: str) -> Seed:
    try:
        return Seed.from_hex(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedblind", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, *, seed=True, config=True):
        if seed:
            p.add_argument("--seed", type=_seed_arg, help="32-byte hex seed")
        if config:
            p.add_argument("--config", help="flat key=value config file (default: $FEDBLIND_CONFIG)")

    p = sub.add_parser("keygen", help="generate the CTS master key")
    common(p, config=False)
    p.add_argument("--key-bits", type=int, default=DEFAULT_KEY_BITS)
    p.add_argument("--out", default="cts.key")
    p.add_argument("--pub-out")

    p = sub.add_parser("onboard-idp", help="issue a domain credential and publish its exponent")
    common(p, config=False)
    p.add_argument("--key", required=True, help="CTS key file")
    p.add_argument("--idp-id", required=True)
    p.add_argument("--directory", required=True)
    p.add_argument("--out", help="credential file (default <idp-id>.cred)")

    for verb in ("serve-cts", "serve-idp"):
        p = sub.add_parser(verb, help=f"run the {verb[6:].upper()} service")
        common(p)
        p.add_argument("--listen")
        p.add_argument("--directory")
        if verb == "serve-cts":
            p.add_argument("--key")
            p.add_argument("--registry")
            p.add_argument("--peer", action="append", default=[], metavar="ID=HOST:PORT")
        else:
            p.add_argument("--credential")

    for verb in ("enroll", "enroll-with-token", "check"):
        p = sub.add_parser(verb)
        common(p)
        p.add_argument("--cts", help="CTS endpoint host:port")
        p.add_argument("--credential", help="this IdP's credential file")
        p.add_argument("--directory")
        p.add_argument("--peer", action="append", default=[], metavar="ID=HOST:PORT")
        p.add_argument("--upi", required=True)
        p.add_argument("--kyc", choices=("pass", "fail"), default="pass")
        if verb != "check":
            p.add_argument("--user-key", help="user key file; created if missing")
            p.add_argument("--key-bits", type=int, default=DEFAULT_KEY_BITS)
            p.add_argument("--token-out")
        if verb == "enroll-with-token":
            p.add_argument("--token", required=True)

    for verb in ("sim", "audit"):
        p = sub.add_parser(verb)
        common(p, config=False)
        p.add_argument("--scenario", required=True, choices=SCENARIOS)
        p.add_argument("--n-idps", type=int, default=3)
        p.add_argument("--n-users", type=int, default=4)
        p.add_argument("--key-bits", type=int, default=64)
        p.add_argument("--transcript-out" if verb == "sim" else "--transcript")
        if verb == "sim":
            p.add_argument("--transport", choices=("inprocess", "wire"), default="inprocess")
    return parser


# -- helpers -----------------------------------------------------------------

def _setting(args, config: dict, name: str, required: bool = True):
    value = getattr(args, name.replace("-", "_"), None)
    if value is None:
        value = config.get(name)
    if value is None and required:
        raise ConfigError(f"missing setting {name!r} (flag --{name} or config key)")
    return value


def _peers(args, config: dict) -> dict[str, str]:
    peers = {k[4:]: v for k, v in config.items() if k.startswith("idp.")}
    for item in args.peer:
        idp_id, sep, addr = item.partition("=")
        if not sep:
            raise ConfigError(f"--peer expects ID=HOST:PORT, got {item!r}")
        peers[idp_id] = addr
    return peers


def _runtime_seed(args, config: dict) -> Seed:
    seed = args.seed or config.get("seed")
    if seed is None:
        return Seed(os.urandom(32))
    return seed if isinstance(seed, Seed) else Seed.from_hex(seed)


def _sim_config(args) -> SimConfig:
    return SimConfig(
        n_idps=args.n_idps, n_users=args.n_users, key_bits=args.key_bits,
        seed=args.seed or Seed(bytes(32)), scenario=args.scenario,
    )


# -- verbs -------------------------------------------------------------------

def cmd_keygen(args) -> int:
    seed = args.seed or Seed(os.urandom(32))
    key = generate_keypair(args.key_bits, seed)
    key.save(args.out)
    pub_out = args.pub_out or str(Path(args.out).with_suffix(".pub"))
    Path(pub_out).write_text(key.public.to_text())
    _emit({"result": "ok", "verb": "keygen", "key_file": args.out, "pub_file": pub_out,
           "n": to_hex(key.modulus_n), "e": to_hex(key.public_e)})
    return 0


def cmd_onboard(args) -> int:
    key = RsaKeyPair.load(args.key)
    dir_path = Path(args.directory)
    directory = FederationDirectory.load(dir_path) if dir_path.exists() else FederationDirectory(key.public)
    if directory.cts_pub != key.public:
        raise ConfigError("directory belongs to a different CTS key")
    seed = args.seed or Seed(hashlib.sha256(b"onboard" + args.idp_id.encode() + key.public.to_text().encode()).digest())
    cts = CentralService(key, DeterministicRng(seed), directory=directory)
    cred = cts.onboard_idp(args.idp_id)
    out = args.out or f"{args.idp_id}.cred"
    Path(out).write_text(cred.to_text())
    directory.save(dir_path)
    _emit({"result": "ok", "verb": "onboard-idp", "idp_id": cred.idp_id, "e": to_hex(cred.e_public),
           "credential_file": out, "directory": str(dir_path)})
    return 0


def cmd_serve_cts(args) -> int:
    config = load_config(args.config)
    key = RsaKeyPair.load(_setting(args, config, "key"))
    directory = FederationDirectory.load(_setting(args, config, "directory"))
    registry_path = _setting(args, config, "registry", required=False)
    registry = Registry.open(registry_path, key.public.n_len) if registry_path else None
    router = Router()
    for idp_id, addr in _peers(args, config).items():
        router.route(idp_name(idp_id), addr)
    cts = CentralService(key, DeterministicRng(_runtime_seed(args, config), "cts"), router, registry, directory)
    service = serve(cts, _setting(args, config, "listen"), start=False)
    _emit({"result": "listening", "role": "cts", "address": service.address_text})
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        cts.registry.close()
    return 0


def cmd_serve_idp(args) -> int:
    config = load_config(args.config)
    cred = DomainCredential.from_text(Path(_setting(args, config, "credential")).read_text())
    directory = FederationDirectory.load(_setting(args, config, "directory"))
    idp = IdentityProvider(cred, directory, DeterministicRng(_runtime_seed(args, config)), Router())
    service = serve(idp, _setting(args, config, "listen"), start=False)
    _emit({"result": "listening", "role": idp.name, "address": service.address_text})
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def _client_idp(args, config: dict) -> tuple[IdentityProvider, Router, Upi]:
    cred = DomainCredential.from_text(Path(_setting(args, config, "credential")).read_text())
    directory = FederationDirectory.load(_setting(args, config, "directory"))
    router = Router()
    router.route(CTS_NAME, _setting(args, config, "cts"))
    for idp_id, addr in _peers(args, config).items():
        router.route(idp_name(idp_id), addr)
    upi = Upi.of(args.upi)
    kyc = KycOracle({upi.value: args.kyc == "pass"})
    rng = DeterministicRng(_runtime_seed(args, config), "client")
    idp = IdentityProvider(cred, directory, rng, router, kyc, fan_out=4)
    return idp, router, upi


def _client_user(args, config: dict, router: Router) -> User:
    path = Path(_setting(args, config, "user-key"))
    if path.exists():
        keypair = load_user_key(path)
    else:
        keypair = UserKeyPair.generate(args.key_bits, _runtime_seed(args, config))
        keypair.key.save(path)
    user = User("user", keypair)
    router.register(user.name, user)
    return user


def _report_token(args, config: dict, token: Token, verb: str) -> int:
    out = _setting(args, config, "token-out", required=False)
    if out:
        token.save(out)
    _emit({"result": "token_issued", "verb": verb, "token": token.to_dict(), "token_file": out})
    return 0


def cmd_enroll(args) -> int:
    config = load_config(args.config)
    idp, router, upi = _client_idp(args, config)
    try:
        user = _client_user(args, config, router)
        token = idp.first_enroll(user, upi)
        return _report_token(args, config, token, "enroll")
    finally:
        router.close()


def cmd_enroll_with_token(args) -> int:
    config = load_config(args.config)
    idp, router, upi = _client_idp(args, config)
    try:
        user = _client_user(args, config, router)
        token = idp.subsequent_enroll(user, upi, Token.load(args.token))
        return _report_token(args, config, token, "enroll-with-token")
    finally:
        router.close()


def cmd_check(args) -> int:
    config = load_config(args.config)
    idp, router, upi = _client_idp(args, config)
    try:
        check = idp.cooperative_check(upi)
    finally:
        router.close()
    if check.matched:
        _emit({"result": "matched", "verb": "check", "matched_pid": to_hex(check.matched_pid)})
        return 1
    _emit({"result": "clear", "verb": "check"})
    return 0


def cmd_sim(args) -> int:
    report, transcript = run_scenario(_sim_config(args), transport=args.transport)
    if args.transcript_out:
        transcript.save(args.transcript_out)
    _emit(report.to_dict())
    return 0


def cmd_audit(args) -> int:
    report, transcript = run_scenario(_sim_config(args))
    result = {"verb": "audit", "scenario": args.scenario, "leakage_violations": report.leakage_violations,
              "messages": len(transcript)}
    ok = report.leakage_violations == 0
    if args.transcript:
        given = Transcript.loads(Path(args.transcript).read_text())
        result["transcript_match"] = given.dumps() == transcript.dumps()
        ok = ok and result["transcript_match"]
    result["result"] = "clean" if ok else "violations"
    _emit(result)
    return 0 if ok else 1


_COMMANDS = {
    "keygen": cmd_keygen,
    "onboard-idp": cmd_onboard,
    "serve-cts": cmd_serve_cts,
    "serve-idp": cmd_serve_idp,
    "enroll": cmd_enroll,
    "enroll-with-token": cmd_enroll_with_token,
    "check": cmd_check,
    "sim": cmd_sim,
    "audit": cmd_audit,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.verb](args)
    except ProtocolRejection as exc:
        _emit({"result": "rejected", "verb": args.verb, "code": exc.code})
        return 1
    except (FedblindError, OSError, ValueError) as exc:
        code = exc.code if isinstance(exc, FedblindError) else "config_error"
        _emit({"result": "error", "verb": args.verb, "code": code, "detail": str(exc)})
        return 2


if __name__ == "__main__":
    sys.exit(main())
