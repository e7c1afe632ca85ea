"""Deterministic federation simulator with adversary scenarios and a leakage audit.

Everything is derived from ``SimConfig.seed``: keys, UPIs, blinding factors,
nonces and the randomized schedule. Two runs of the same config therefore
produce byte-identical reports and transcripts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .credentials import Token, UserKeyPair, fdh_sign, token_message
from .errors import (
    DuplicateDetected,
    InvalidToken,
    KycFailed,
    PeerUnavailable,
    ProofOfPossessionFailed,
    RegistryConflict,
    UnknownScenario,
)
from .numcore import DeterministicRng, Natural, Seed, fdh_hash, generate_keypair
from .oprf import Pid
from .protocol import (
    CTS_NAME,
    CentralService,
    IdentityProvider,
    KycOracle,
    Upi,
    User,
)
from .wire import HEX, HEXLIST, SCHEMA, Envelope, Router, decode, encode, serve

SCENARIOS = (
    "honest",
    "duplicate-no-token",
    "duplicate-with-own-token",
    "stolen-token",
    "forged-token",
    "kyc-fail",
    "peer-down-during-check",
    "randomized-mixed",
)


@dataclass(frozen=True)
class SimConfig:
    n_idps: int = 3
    n_users: int = 4
    key_bits: int = 64
    seed: Seed = field(default_factory=lambda: Seed(bytes(32)))
    scenario: str = "honest"

    def __post_init__(self):
        if self.n_idps < 1:
            raise ValueError("n_idps must be at least 1")
        if self.n_users < 0:
            raise ValueError("n_users must be non-negative")
        if self.key_bits < 16:
            raise ValueError("key_bits must be at least 16")


@dataclass
class SimReport:
    scenario: str
    seed: str
    enrollments_ok: int = 0
    duplicates_attempted: int = 0
    duplicates_detected: int = 0
    false_alarms: int = 0
    leakage_violations: int = 0
    adversary_attempts: int = 0
    adversary_successes: int = 0
    kyc_rejections: int = 0
    peer_unavailable_aborts: int = 0
    cross_domain_pid_exposures: int = 0
    registry_final: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# -- transcript --------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptEntry:
    sender: str
    recipient: str
    frame: bytes

    @property
    def envelope(self) -> Envelope:
        return decode(self.frame)

    def to_line(self) -> str:
        obj = json.loads(self.frame)
        obj["from"], obj["to"] = self.sender, self.recipient
        return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


class Transcript:
    """Every inter-role message, in delivery order, as encoded wire frames."""

    def __init__(self) -> None:
        self.entries: list[TranscriptEntry] = []

    def record(self, sender: str, recipient: str, env: Envelope) -> None:
        self.entries.append(TranscriptEntry(sender, recipient, encode(env)))

    def __iter__(self) -> Iterator[TranscriptEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def dumps(self) -> str:
        return "".join(e.to_line() for e in self.entries)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Transcript":
        out = cls()
        for line in text.splitlines():
            obj = json.loads(line)
            sender, recipient = obj.pop("from"), obj.pop("to")
            env = decode(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode() + b"\n")
            out.record(sender, recipient, env)
        return out


# -- leakage audit -----------------------------------------------------------

@dataclass
class SecretsOracle:
    """Everything the harness knows that roles must not see."""

    hashed_upis: set[Natural] = field(default_factory=set)
    evaluated_upis: set[Natural] = field(default_factory=set)
    blinding_factors: set[Natural] = field(default_factory=set)
    pids: set[Natural] = field(default_factory=set)


_PEER_CHECK_TYPES = {"transform_request", "exchange_request"}


def _naturals(env: Envelope) -> Iterable[Natural]:
    required, optional = SCHEMA[env.type]
    kinds = {**required, **optional}
    for name, value in env.body.items():
        if kinds[name] == HEX:
            yield value
        elif kinds[name] == HEXLIST:
            yield from value


def audit_blindness(transcript: Transcript, secrets: SecretsOracle) -> int:
    """Count field values delivered to a role that must not learn them.

    The CTS must never see ``x`` or ``x^d``. A peer IdP serving a check must
    never see ``x``, ``x^d``, ``r`` or any pseudonym.
    """
    cts_forbidden = secrets.hashed_upis | secrets.evaluated_upis
    peer_forbidden = cts_forbidden | secrets.blinding_factors | secrets.pids
    violations = 0
    for entry in transcript:
        env = entry.envelope
        if entry.recipient == CTS_NAME:
            forbidden = cts_forbidden
        elif entry.recipient.startswith("idp:") and env.type in _PEER_CHECK_TYPES:
            forbidden = peer_forbidden
        else:
            continue
        violations += sum(1 for v in _naturals(env) if v in forbidden)
    return violations


def count_cross_domain_exposures(transcript: Transcript, secrets: SecretsOracle) -> int:
    """Pseudonyms of other domains that a checking IdP reconstructed and sent on.

    This is inherent to the cooperative check rather than a violation; it is
    reported so the exposure can be compared across scenarios.
    """
    return sum(
        1
        for entry in transcript
        if entry.sender.startswith("idp:") and entry.envelope.type == "registry_match_request"
        for pid in entry.envelope.body["pids"]
        if pid in secrets.pids
    )


# -- federation --------------------------------------------------------------

class _ReplayingUser(User):
    """Answers every challenge with one captured signature."""

    def __init__(self, name: str, keypair: UserKeyPair, captured_sig: Natural):
        super().__init__(name, keypair)
        self.captured_sig = captured_sig

    def handle(self, env: Envelope) -> Envelope:
        return Envelope("challenge_response", env.session_id, {"sig": self.captured_sig})


class Federation:
    def __init__(self, config: SimConfig, idp_class: type[IdentityProvider], transport: str):
        self.config = config
        self.transcript = Transcript()
        self.secrets = SecretsOracle()
        self.report = SimReport(config.scenario, config.seed.hex())
        self.rng = DeterministicRng(config.seed, "sim")
        self.schedule = self.rng.fork("schedule")
        self.kyc = KycOracle()
        self._services = []

        key_seed = self.rng.fork("cts-key").bytes(32)
        self.cts_key = generate_keypair(config.key_bits, key_seed)
        self.router = Router(self.transcript.record)
        self.cts = CentralService(self.cts_key, self.rng.fork("cts"), self.router)
        self.router.register(CTS_NAME, self.cts)

        self.idps: list[IdentityProvider] = []
        for i in range(config.n_idps):
            cred = self.cts.onboard_idp(str(i + 1))
            idp = idp_class(
                cred, self.cts.directory, self.rng.fork(f"idp-{cred.idp_id}"),
                self.router, self.kyc, observer=self._observe,
            )
            self.idps.append(idp)
            self.router.register(idp.name, idp)
        self._t = {idp.idp_id: idp.credential.t_private for idp in self.idps}

        self.users: list[User] = [self._make_user(f"user:{u}", f"user-{u}") for u in range(config.n_users)]
        self.upis = {u.name: self._upi(u.name) for u in self.users}
        self.enrolled: dict[bytes, set[str]] = {}
        self.alarmed: dict[bytes, set[str]] = {}

        self._routers = [self.router]
        if transport == "wire":
            self._go_remote()
        elif transport != "inprocess":
            raise ValueError(f"unknown transport {transport!r}")

    # -- setup -----------------------------------------------------------------

    def _go_remote(self) -> None:
        cts_router = Router(self.transcript.record)
        harness_router = Router(self.transcript.record)
        cts_service = serve(self.cts)
        self._services.append(cts_service)
        harness_router.route(CTS_NAME, cts_service.address)
        for idp in self.idps:
            service = serve(idp)
            self._services.append(service)
            harness_router.route(idp.name, service.address)
            cts_router.route(idp.name, service.address)
        for user in self.users:
            harness_router.register(user.name, user)
        self.cts.router = cts_router
        for idp in self.idps:
            idp.router = harness_router
        self.router = harness_router
        self._routers = [cts_router, harness_router]

    def close(self) -> None:
        for service in self._services:
            service.shutdown()
        for router in self._routers:
            router.close()

    def _observe(self, kind: str, value: Natural) -> None:
        if kind == "r":
            self.secrets.blinding_factors.add(value)

    def _make_user(self, name: str, label: str) -> User:
        keypair = UserKeyPair.generate(self.config.key_bits, self.rng.fork(label).bytes(32))
        user = User(name, keypair)
        self.router.register(name, user)
        return user

    def _upi(self, label: str) -> Upi:
        upi = Upi(f"UPI/{self.config.seed.hex()[:12]}/{label}".encode())
        x = fdh_hash(upi.value, self.cts_key.public)
        self.secrets.hashed_upis.add(x)
        self.secrets.evaluated_upis.add(pow(x, self.cts_key.private_d, self.cts_key.modulus_n))
        for t in self._t.values():
            self.secrets.pids.add(pow(x, self.cts_key.private_d * t, self.cts_key.modulus_n))
        return upi

    def set_peer_down(self, idp: IdentityProvider, down: bool) -> None:
        for router in self._routers:
            router.set_down(idp.name, down)

    def pick(self, seq):
        return seq[self.schedule.randbelow(len(seq))]

    # -- actions ---------------------------------------------------------------

    def tokenless(self, user: User, idp: IdentityProvider, upi: Upi | None = None) -> Token | None:
        upi = upi or self.upis[user.name]
        was_enrolled = bool(self.enrolled.get(upi.value))
        if was_enrolled:
            self.report.duplicates_attempted += 1
        try:
            token = idp.register(user, upi)
        except (DuplicateDetected, RegistryConflict) as exc:
            if isinstance(exc, DuplicateDetected):
                self.alarmed.setdefault(upi.value, set()).add(idp.idp_id)
            if was_enrolled:
                self.report.duplicates_detected += 1
            else:
                self.report.false_alarms += 1
            return None
        except KycFailed:
            self.report.kyc_rejections += 1
            return None
        except PeerUnavailable:
            self.report.peer_unavailable_aborts += 1
            return None
        self.report.enrollments_ok += 1
        self.enrolled.setdefault(upi.value, set()).add(idp.idp_id)
        return token

    def with_token(self, user: User, idp: IdentityProvider, token: Token) -> Token | None:
        upi = self.upis[user.name]
        try:
            new = idp.subsequent_enroll(user, upi, token)
        except KycFailed:
            self.report.kyc_rejections += 1
            return None
        self.report.enrollments_ok += 1
        self.enrolled.setdefault(upi.value, set()).add(idp.idp_id)
        return new

    def adversary_attempt(self, adversary: User, idp: IdentityProvider, upi: Upi, token: Token) -> None:
        self.report.adversary_attempts += 1
        try:
            idp.subsequent_enroll(adversary, upi, token)
        except (ProofOfPossessionFailed, InvalidToken, KycFailed, RegistryConflict):
            return
        self.report.adversary_successes += 1

    def other_idp(self, idp: IdentityProvider) -> IdentityProvider:
        i = self.idps.index(idp)
        return self.idps[(i + 1) % len(self.idps)]

    def home_idp(self, index: int) -> IdentityProvider:
        return self.idps[index % len(self.idps)]

    def captured_response(self, user: User) -> Natural | None:
        for entry in reversed(self.transcript.entries):
            if entry.sender == user.name:
                return entry.envelope.body["sig"]
        return None

    def forged_tokens(self, adversary: User, victim_token: Token | None) -> list[Token]:
        """Random signature, adversary-self-signed, and spliced/tampered victim tokens."""
        pub = self.cts_key.public
        rng = self.rng.fork("forgery")
        pid = Pid(rng.randrange(2, pub.modulus_n))
        self_sig = fdh_sign(token_message(pid, adversary.pk_u, pub), adversary.keypair.key) % pub.modulus_n
        forged = [
            Token(pid, adversary.pk_u, rng.randrange(2, pub.modulus_n)),
            Token(pid, adversary.pk_u, self_sig or 1),
        ]
        if victim_token is not None:
            forged.append(Token(victim_token.pid, adversary.pk_u, victim_token.signature))
            forged.append(Token(victim_token.pid, victim_token.pk_u, (victim_token.signature + 1) % pub.modulus_n or 1))
        return forged

    def finish(self) -> SimReport:
        self.report.registry_final = self.cts.registry.summary()
        self.report.leakage_violations = audit_blindness(self.transcript, self.secrets)
        self.report.cross_domain_pid_exposures = count_cross_domain_exposures(self.transcript, self.secrets)
        return self.report


# -- scenarios ---------------------------------------------------------------

def _enroll_everyone(fed: Federation) -> list[Token | None]:
    return [fed.tokenless(user, fed.home_idp(u)) for u, user in enumerate(fed.users)]


def _honest(fed: Federation) -> None:
    _enroll_everyone(fed)


def _duplicate_no_token(fed: Federation) -> None:
    _enroll_everyone(fed)
    if fed.users:
        fed.tokenless(fed.users[0], fed.other_idp(fed.home_idp(0)))


def _duplicate_with_own_token(fed: Federation) -> None:
    tokens = _enroll_everyone(fed)
    if len(fed.idps) < 2:
        return
    for u, (user, token) in enumerate(zip(fed.users, tokens)):
        if token is not None:
            fed.with_token(user, fed.other_idp(fed.home_idp(u)), token)


def _stolen_token(fed: Federation) -> None:
    tokens = _enroll_everyone(fed)
    adversary = fed._make_user("user:adversary", "adversary")
    adv_upi = fed._upi("adversary")
    for u, token in enumerate(tokens):
        if token is None:
            continue
        victim = fed.users[u]
        target = fed.other_idp(fed.home_idp(u))
        fed.adversary_attempt(adversary, target, fed.upis[victim.name], token)
        fed.adversary_attempt(adversary, target, adv_upi, token)
        captured = fed.captured_response(victim)
        if captured is not None:
            replayer = _ReplayingUser("user:replayer", adversary.keypair, captured)
            fed.router.register(replayer.name, replayer)
            fed.adversary_attempt(replayer, target, fed.upis[victim.name], token)


def _forged_token(fed: Federation) -> None:
    tokens = _enroll_everyone(fed)
    adversary = fed._make_user("user:adversary", "adversary")
    adv_upi = fed._upi("adversary")
    victim_token = next((t for t in tokens if t is not None), None)
    for i, forged in enumerate(fed.forged_tokens(adversary, victim_token)):
        fed.adversary_attempt(adversary, fed.home_idp(i), adv_upi, forged)


def _kyc_fail(fed: Federation) -> None:
    for u, user in enumerate(fed.users):
        if u % 2 == 0:
            fed.kyc.policy[fed.upis[user.name].value] = False
    _enroll_everyone(fed)


def _peer_down(fed: Federation) -> None:
    if not fed.users:
        return
    if len(fed.idps) >= 2:
        down = fed.idps[-1]
        fed.set_peer_down(down, True)
        fed.tokenless(fed.users[0], fed.idps[0])
        fed.set_peer_down(down, False)
    _enroll_everyone(fed)


def _randomized_mixed(fed: Federation) -> None:
    adversary = fed._make_user("user:adversary", "adversary")
    adv_upi = fed._upi("adversary")
    kyc_user = fed._make_user("user:kyc-fail", "kyc-fail")
    fed.upis[kyc_user.name] = fed._upi("kyc-fail")
    fed.kyc.policy[fed.upis[kyc_user.name].value] = False
    tokens: dict[str, Token] = {}

    def fresh_users() -> list[User]:
        return [u for u in fed.users if not fed.enrolled.get(fed.upis[u.name].value)]

    def enrolled_users() -> list[User]:
        return [u for u in fed.users if u.name in tokens]

    steps = 3 * max(1, len(fed.users))
    for _ in range(steps):
        actions: list[Callable[[], None]] = []
        fresh, enrolled = fresh_users(), enrolled_users()

        if fresh:
            def enroll_fresh():
                user = fed.pick(fresh)
                token = fed.tokenless(user, fed.pick(fed.idps))
                if token is not None:
                    tokens[user.name] = token
            actions.append(enroll_fresh)

            if len(fed.idps) >= 2:
                def peer_down_attempt():
                    user = fed.pick(fresh)
                    target = fed.pick(fed.idps)
                    down = fed.pick([i for i in fed.idps if i is not target])
                    fed.set_peer_down(down, True)
                    try:
                        fed.tokenless(user, target)
                    finally:
                        fed.set_peer_down(down, False)
                actions.append(peer_down_attempt)

        if enrolled:
            def duplicate():
                user = fed.pick(enrolled)
                fed.tokenless(user, fed.pick(fed.idps))
            actions.append(duplicate)

            def open_idps(user: User) -> list[IdentityProvider]:
                upi = fed.upis[user.name].value
                blocked = fed.enrolled[upi] | fed.alarmed.get(upi, set())
                return [i for i in fed.idps if i.idp_id not in blocked]

            growable = [u for u in enrolled if open_idps(u)]
            if growable:
                def multi_idp():
                    user = fed.pick(growable)
                    target = fed.pick(open_idps(user))
                    token = fed.with_token(user, target, tokens[user.name])
                    if token is not None:
                        tokens[user.name] = token
                actions.append(multi_idp)

            def steal():
                victim = fed.pick(enrolled)
                upi = fed.pick([fed.upis[victim.name], adv_upi])
                fed.adversary_attempt(adversary, fed.pick(fed.idps), upi, tokens[victim.name])
            actions.append(steal)

        def forge():
            victim_token = tokens[fed.pick(enrolled).name] if enrolled else None
            forged = fed.pick(fed.forged_tokens(adversary, victim_token))
            fed.adversary_attempt(adversary, fed.pick(fed.idps), adv_upi, forged)
        actions.append(forge)

        def kyc_fail():
            fed.tokenless(kyc_user, fed.pick(fed.idps))
        actions.append(kyc_fail)

        fed.pick(actions)()


_SCENARIO_FUNCS: dict[str, Callable[[Federation], None]] = {
    "honest": _honest,
    "duplicate-no-token": _duplicate_no_token,
    "duplicate-with-own-token": _duplicate_with_own_token,
    "stolen-token": _stolen_token,
    "forged-token": _forged_token,
    "kyc-fail": _kyc_fail,
    "peer-down-during-check": _peer_down,
    "randomized-mixed": _randomized_mixed,
}


def build_federation(
    config: SimConfig,
    idp_class: type[IdentityProvider] = IdentityProvider,
    transport: str = "inprocess",
) -> Federation:
    if config.scenario not in _SCENARIO_FUNCS:
        raise UnknownScenario(config.scenario)
    return Federation(config, idp_class, transport)


def run_scenario(
    config: SimConfig,
    idp_class: type[IdentityProvider] = IdentityProvider,
    transport: str = "inprocess",
) -> tuple[SimReport, Transcript]:
    """Run one built-in scenario; ``transport="wire"`` puts every role behind TCP."""
    fed = build_federation(config, idp_class, transport)
    try:
        _SCENARIO_FUNCS[config.scenario](fed)
        return fed.finish(), fed.transcript
    finally:
        fed.close()
