"""User, IdP and CTS roles and the three enrollment phases.

Roles talk only through a :class:`~fedblind.wire.Router`, so the same code
runs in-process (with a transcript recorder) or against remote services.

Phases
------
* first-time enrollment: blind -> domain transform -> CTS eval -> unblind
  with ``r^t_i`` -> CTS challenges the user and stores ``(PID_i, ok)``.
* subsequent registration: the IdP checks a presented token and a fresh
  challenge signed by the token's key, then runs the first-time path.
* cooperative check: token-less attempts rebuild ``PID_j`` for every peer
  domain via CTS-forwarded transforms and the exponent exchange; a registry
  hit rejects the attempt and records ``(PID_i, alarm)``.
"""

from __future__ import annotations

import enum
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .credentials import (
    Challenge,
    ChallengeVerifier,
    Token,
    UserKeyPair,
    issue_token,
    respond,
    verify_token,
)
from .errors import (
    DuplicateDetected,
    DuplicateIdpId,
    FedblindError,
    InvalidKey,
    InvalidToken,
    KycFailed,
    OutOfPhase,
    OutOfRange,
    PeerUnavailable,
    ProofOfPossessionFailed,
    ProtocolRejection,
    RegistryConflict,
    RemoteError,
    UnexpectedMessage,
    UnknownIdp,
    UnknownSession,
)
from .numcore import (
    DeterministicRng,
    Natural,
    PublicKey,
    RsaKeyPair,
    fdh_hash,
    from_hex,
    mod_inverse,
    mod_pow,
    to_hex,
)
from .oprf import (
    BlindedInput,
    BlindingFactor,
    DomainCredential,
    ExchangeBlinder,
    Pid,
    blind,
    domain_transform,
    evaluate,
    exchange_apply,
    exchange_blind,
    exchange_recover,
    unblind_domain,
)
from .registry import Registry, Status
from .wire import Envelope, Router

CTS_NAME = "cts"
_IDP_ID_RE = re.compile(r"[A-Za-z0-9_.-]{1,32}")


def idp_name(idp_id: str) -> str:
    return f"idp:{idp_id}"


@dataclass(frozen=True)
class Upi:
    value: bytes

    def __post_init__(self):
        if not self.value:
            raise ValueError("UPI must be non-empty")

    @classmethod
    def of(cls, value: "Upi | bytes | str") -> "Upi":
        if isinstance(value, Upi):
            return value
        return cls(value.encode() if isinstance(value, str) else bytes(value))


@dataclass
class KycOracle:
    """Stand-in for document/biometric verification: a fixed pass/fail table."""

    policy: dict[bytes, bool] = field(default_factory=dict)
    default: bool = True

    def verify(self, upi: Upi) -> bool:
        return self.policy.get(upi.value, self.default)


@dataclass
class FederationDirectory:
    """Public federation state: the CTS key and each IdP's published exponent."""

    cts_pub: PublicKey
    idps: dict[str, Natural] = field(default_factory=dict)

    def add(self, idp_id: str, e_public: Natural) -> None:
        if not _IDP_ID_RE.fullmatch(idp_id):
            raise ValueError(f"bad idp id {idp_id!r}")
        if idp_id in self.idps:
            raise DuplicateIdpId(idp_id)
        if e_public < 3 or e_public % 2 == 0 or e_public >= self.cts_pub.modulus_n:
            raise InvalidKey("published exponent must be odd, >= 3 and < N")
        self.idps[idp_id] = e_public

    def to_text(self) -> str:
        lines = [f"cts_n={to_hex(self.cts_pub.modulus_n)}", f"cts_e={to_hex(self.cts_pub.public_e)}"]
        lines += [f"idp:{i}={to_hex(e)}" for i, e in self.idps.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FederationDirectory":
        n = e = None
        entries: list[tuple[str, int]] = []
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidKey(f"bad directory line {line!r:.60}")
            if key == "cts_n":
                n = from_hex(value)
            elif key == "cts_e":
                e = from_hex(value)
            elif key.startswith("idp:"):
                entries.append((key[4:], from_hex(value)))
            else:
                raise InvalidKey(f"bad directory line {line!r:.60}")
        if n is None or e is None:
            raise InvalidKey("directory lacks cts_n/cts_e")
        directory = cls(PublicKey(n, e))
        for idp_id, e_pub in entries:
            directory.add(idp_id, e_pub)
        return directory

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "FederationDirectory":
        return cls.from_text(Path(path).read_text())


# -- sessions ----------------------------------------------------------------

class Phase(str, enum.Enum):
    INIT = "init"
    BLINDED = "blinded"
    TRANSFORMED = "transformed"
    EVALUATED = "evaluated"
    UNBLINDED = "unblinded"
    CHALLENGED = "challenged"
    TOKEN_ISSUED = "token_issued"
    REJECTED = "rejected"


_PHASE_ORDER = [
    Phase.INIT, Phase.BLINDED, Phase.TRANSFORMED, Phase.EVALUATED,
    Phase.UNBLINDED, Phase.CHALLENGED, Phase.TOKEN_ISSUED,
]
_TERMINAL = {Phase.TOKEN_ISSUED, Phase.REJECTED}


@dataclass
class EnrollmentSession:
    """IdP-side state of one OPRF enrollment.

    Each step method checks the phase and advances by exactly one; any
    failure may move the session to ``rejected``. Terminal sessions drop
    ``r`` and ``x``.
    """

    session_id: str
    r: BlindingFactor | None
    x: Natural | None
    phase: Phase = Phase.INIT
    pid: Pid | None = None
    blinded: BlindedInput | None = None
    transformed: BlindedInput | None = None
    evaluated: Natural | None = None
    token: Token | None = None

    def _advance(self, to: Phase) -> None:
        if self.phase in _TERMINAL:
            raise OutOfPhase(f"session already {self.phase.value}")
        expected = _PHASE_ORDER[_PHASE_ORDER.index(self.phase) + 1]
        if to is not expected:
            raise OutOfPhase(f"{to.value} not allowed after {self.phase.value}")
        self.phase = to
        if to in _TERMINAL:
            self._scrub()

    def _scrub(self) -> None:
        self.r = None
        self.x = None
        self.blinded = self.transformed = None
        self.evaluated = None

    def record_blinded(self, value: BlindedInput) -> None:
        self._advance(Phase.BLINDED)
        self.blinded = value

    def record_transformed(self, value: BlindedInput) -> None:
        self._advance(Phase.TRANSFORMED)
        self.transformed = value

    def record_evaluation(self, y: Natural) -> None:
        self._advance(Phase.EVALUATED)
        self.evaluated = y

    def record_pid(self, pid: Pid) -> None:
        self._advance(Phase.UNBLINDED)
        self.pid = pid

    def record_challenge(self) -> None:
        self._advance(Phase.CHALLENGED)

    def record_token(self, token: Token) -> None:
        self._advance(Phase.TOKEN_ISSUED)
        self.token = token

    def reject(self) -> None:
        if self.phase in _TERMINAL:
            raise OutOfPhase(f"session already {self.phase.value}")
        self.phase = Phase.REJECTED
        self._scrub()


@dataclass
class PeerState:
    idp_id: str
    k: ExchangeBlinder | None
    y: Natural | None = None
    t_power: Natural | None = None
    pid: Pid | None = None


@dataclass
class CheckSession:
    session_id: str
    r: BlindingFactor | None
    x_blinded: BlindedInput | None
    peers: dict[str, PeerState] = field(default_factory=dict)
    own_pid: Pid | None = None
    outcome: str = "pending"  # pending | clear | matched | aborted
    matched_pid: Natural | None = None

    @property
    def matched(self) -> bool:
        return self.outcome == "matched"

    def resolve(self, matched_pid: Natural | None) -> None:
        if any(p.pid is None for p in self.peers.values()):
            raise OutOfPhase("peer pseudonyms unresolved")
        self.matched_pid = matched_pid
        self.outcome = "clear" if matched_pid is None else "matched"

    def scrub(self) -> None:
        self.r = None
        self.x_blinded = None
        for peer in self.peers.values():
            peer.k = None
            peer.t_power = None


# -- helpers -----------------------------------------------------------------

_REMOTE_ERRORS: dict[str, Callable[[str], FedblindError]] = {
    "already_registered": lambda c: RegistryConflict(c),
    "alarm_locked": lambda c: RegistryConflict(c),
    "proof_of_possession_failed": lambda c: ProofOfPossessionFailed(),
    "stale_nonce": lambda c: ProofOfPossessionFailed(),
    "peer_unavailable": lambda c: PeerUnavailable(),
}


def _expect(reply: Envelope, env_type: str) -> Envelope:
    if reply.type == env_type:
        return reply
    if reply.type == "error":
        code = reply.body.get("code", "internal")
        raise _REMOTE_ERRORS.get(code, lambda c: RemoteError(c))(code)
    raise UnexpectedMessage(f"expected {env_type}, got {reply.type}")


# -- roles -------------------------------------------------------------------

class User:
    """Holds ``(pk_u, sk_u)`` and answers challenges.

    ``signing_key`` lets a test or adversary answer with a key other than the
    one it claims.
    """

    def __init__(self, name: str, keypair: UserKeyPair, signing_key: RsaKeyPair | None = None):
        self.name = name
        self.keypair = keypair
        self.signing_key = signing_key or keypair.key
        self.tokens: list[Token] = []

    @property
    def pk_u(self) -> PublicKey:
        return self.keypair.pk_u

    def handle(self, env: Envelope) -> Envelope:
        if env.type != "challenge":
            raise UnexpectedMessage(env.type)
        sig = respond(Challenge(env.body["nonce"]), self.signing_key)
        return Envelope("challenge_response", env.session_id, {"sig": sig})


class CentralService:
    """CTS: master key, OPRF evaluation, token signing and the blind registry."""

    name = CTS_NAME

    def __init__(
        self,
        key: RsaKeyPair,
        rng: DeterministicRng,
        router: Router | None = None,
        registry: Registry | None = None,
        directory: FederationDirectory | None = None,
    ):
        self.key = key
        self.pub = key.public
        self.router = router
        self.registry = registry if registry is not None else Registry(self.pub.n_len)
        self.directory = directory or FederationDirectory(self.pub)
        self.verifier = ChallengeVerifier(rng.fork("nonce"))
        self._onboard_rng = rng.fork("onboard")
        self._pending: dict[str, tuple[Pid, PublicKey, Challenge]] = {}
        self._lock = threading.Lock()

    @property
    def public(self) -> PublicKey:
        return self.pub

    def onboard_idp(self, idp_id: str) -> DomainCredential:
        """Issue ``(e_j, t_j)`` with ``e_j * t_j = 1 mod lambda`` and publish ``e_j``."""
        if idp_id in self.directory.idps:
            raise DuplicateIdpId(idp_id)
        lam, n = self.key.lambda_n, self.key.modulus_n
        taken = {self.key.public_e % lam} | {e % lam for e in self.directory.idps.values()}
        upper = min(lam, n)
        for _ in range(10_000):
            e = self._onboard_rng.randrange(3, upper) | 1
            if e >= upper or e % lam in taken:
                continue
            try:
                t = mod_inverse(e, lam)
            except FedblindError:
                continue
            if t == 1:
                continue
            cred = DomainCredential(idp_id, t, e)
            cred.check(lam)
            self.directory.add(idp_id, e)
            return cred
        raise InvalidKey("no unused domain exponent left for this modulus")

    def _element(self, value: Natural) -> Natural:
        if not 0 < value < self.pub.modulus_n:
            raise OutOfRange("value outside Z_N")
        return value

    def handle(self, env: Envelope) -> Envelope:
        sid, body = env.session_id, env.body
        if env.type == "eval_request":
            return Envelope("eval_response", sid, {"y": evaluate(self._element(body["x"]), self.key)})

        if env.type == "transform_request":
            # forwarded to the named peer; its T_j comes back and is evaluated here
            peer = body.get("idp")
            if peer is None or peer not in self.directory.idps:
                raise UnknownIdp(str(peer))
            if self.router is None:
                raise PeerUnavailable("no route to peers")
            reply = self.router.send(
                self.name, idp_name(peer),
                Envelope("transform_request", sid, {"x": self._element(body["x"])}),
            )
            t = _expect(reply, "transform_response").body["t"]
            return Envelope("eval_response", sid, {"y": evaluate(self._element(t), self.key)})

        if env.type == "token_issue_request":
            pid = Pid(self._element(body["pid"]))
            pk_u = PublicKey(body["user_n"], body["user_e"])
            challenge = self.verifier.issue()
            with self._lock:
                self._pending[sid] = (pid, pk_u, challenge)
            return Envelope("challenge", sid, {"nonce": challenge.nonce})

        if env.type == "challenge_response":
            with self._lock:
                pending = self._pending.pop(sid, None)
            if pending is None:
                raise UnknownSession(sid)
            pid, pk_u, challenge = pending
            if not self.verifier.verify(challenge, body["sig"], pk_u):
                raise ProofOfPossessionFailed()
            self.registry.insert(pid, Status.OK)
            token = issue_token(pid, pk_u, self.key)
            return Envelope("token_issue_response", sid, token_to_body(token))

        if env.type == "registry_match_request":
            matched = self.registry.match_any([self._element(p) for p in body["pids"]])
            return Envelope("registry_match_response", sid, {} if matched is None else {"matched_pid": matched})

        if env.type == "alarm_insert":
            self.registry.insert(self._element(body["pid"]), Status.ALARM)
            return Envelope("ack", sid, {})

        raise UnexpectedMessage(env.type)


def token_to_body(token: Token) -> dict[str, Natural]:
    return {
        "pid": token.pid.value,
        "user_n": token.pk_u.modulus_n,
        "user_e": token.pk_u.public_e,
        "sig": token.signature,
    }


def token_from_body(body: Mapping[str, Natural]) -> Token:
    return Token(Pid(body["pid"]), PublicKey(body["user_n"], body["user_e"]), body["sig"])


class IdentityProvider:
    """An IdP: runs KYC, owns a domain exponent, initiates every phase.

    As a peer it answers ``transform_request`` (from the CTS) and
    ``exchange_request`` (from the initiating IdP).
    """

    def __init__(
        self,
        credential: DomainCredential,
        directory: FederationDirectory,
        rng: DeterministicRng,
        router: Router,
        kyc: KycOracle | None = None,
        observer: Callable[[str, Natural], None] | None = None,
        fan_out: int = 1,
    ):
        self.credential = credential
        self.directory = directory
        self.pub = directory.cts_pub
        self.router = router
        self.kyc = kyc or KycOracle()
        self.observer = observer
        self.fan_out = fan_out
        self._rng = rng
        self._session_rng = rng.fork("session-id")
        self.verifier = ChallengeVerifier(rng.fork("nonce"))
        self.sessions: dict[str, EnrollmentSession] = {}
        self.checks: dict[str, CheckSession] = {}

    @property
    def idp_id(self) -> str:
        return self.credential.idp_id

    @property
    def name(self) -> str:
        return idp_name(self.idp_id)

    # -- peer side -------------------------------------------------------------

    def handle(self, env: Envelope) -> Envelope:
        n = self.pub.modulus_n
        if env.type == "transform_request":
            x = env.body["x"]
            if not 0 < x < n:
                raise OutOfRange("value outside Z_N")
            t = domain_transform(BlindedInput(x), self.credential, self.pub).value_x
            return Envelope("transform_response", env.session_id, {"t": t})
        if env.type == "exchange_request":
            s = exchange_apply(env.body["m"], self.credential, self.pub)
            return Envelope("exchange_response", env.session_id, {"s": s})
        raise UnexpectedMessage(env.type)

    # -- overridable primitives ------------------------------------------------

    def _new_session_id(self) -> str:
        return f"{self.idp_id}-{self._session_rng.bytes(8).hex()}"

    def _sample_blinding(self) -> BlindingFactor:
        r = BlindingFactor.sample(self._rng, self.pub)
        if self.observer:
            self.observer("r", r.r)
        return r

    def _sample_exchange_blinder(self) -> ExchangeBlinder:
        k = ExchangeBlinder.sample(self._rng, self.pub)
        if self.observer:
            self.observer("k", k.k)
        return k

    def _blind(self, x: Natural, r: BlindingFactor) -> BlindedInput:
        return blind(x, r, self.pub)

    def _own_r_power(self, r: BlindingFactor) -> Natural:
        return mod_pow(r.r, self.credential.t_private, self.pub.modulus_n)

    def _call(self, dst: str, env: Envelope, expect: str) -> Envelope:
        return _expect(self.router.send(self.name, dst, env), expect)

    def hash_upi(self, upi: Upi) -> Natural:
        return fdh_hash(upi.value, self.pub)

    # -- first-time enrollment -------------------------------------------------

    def first_enroll(self, user: User, upi: Upi | bytes | str) -> Token:
        upi = Upi.of(upi)
        session = self._open_session()
        try:
            if not self.kyc.verify(upi):
                raise KycFailed()
            return self._derive_and_issue(session, user, upi, user.pk_u)
        except BaseException:
            if session.phase not in _TERMINAL:
                session.reject()
            raise

    def _open_session(self) -> EnrollmentSession:
        session = EnrollmentSession(self._new_session_id(), None, None)
        self.sessions[session.session_id] = session
        return session

    def _derive_and_issue(self, session: EnrollmentSession, user: User, upi: Upi, pk_u: PublicKey) -> Token:
        sid = session.session_id
        session.x = self.hash_upi(upi)
        session.r = self._sample_blinding()
        session.record_blinded(self._blind(session.x, session.r))
        session.record_transformed(domain_transform(session.blinded, self.credential, self.pub))
        reply = self._call(CTS_NAME, Envelope("eval_request", sid, {"x": session.transformed.value_x}), "eval_response")
        session.record_evaluation(reply.body["y"])
        session.record_pid(unblind_domain(session.evaluated, session.r, self._own_r_power(session.r), self.pub))

        request = {"pid": session.pid.value, "user_n": pk_u.modulus_n, "user_e": pk_u.public_e}
        challenge = self._call(CTS_NAME, Envelope("token_issue_request", sid, request), "challenge")
        session.record_challenge()
        try:
            answer = _expect(self.router.send(self.name, user.name, challenge), "challenge_response")
        except FedblindError:
            raise ProofOfPossessionFailed() from None
        reply = self._call(CTS_NAME, answer, "token_issue_response")
        token = token_from_body(reply.body)
        if token.pid != session.pid or token.pk_u != pk_u or not verify_token(token, self.pub):
            raise InvalidToken("CTS returned a token that does not verify")
        session.record_token(token)
        user.tokens.append(token)
        return token

    # -- subsequent registration -----------------------------------------------

    def subsequent_enroll(self, user: User, upi: Upi | bytes | str, presented: Token) -> Token:
        upi = Upi.of(upi)
        session = self._open_session()
        try:
            if not verify_token(presented, self.pub):
                raise InvalidToken()
            challenge = self.verifier.issue()
            try:
                answer = _expect(
                    self.router.send(self.name, user.name, Envelope("challenge", session.session_id, {"nonce": challenge.nonce})),
                    "challenge_response",
                )
            except FedblindError:
                raise ProofOfPossessionFailed() from None
            if not self.verifier.verify(challenge, answer.body["sig"], presented.pk_u):
                raise ProofOfPossessionFailed()
            if not self.kyc.verify(upi):
                raise KycFailed()
            return self._derive_and_issue(session, user, upi, presented.pk_u)
        except BaseException:
            if session.phase not in _TERMINAL:
                session.reject()
            raise

    # -- cooperative blind global check ----------------------------------------

    def cooperative_check(self, upi: Upi | bytes | str, peers: Iterable[str] | None = None) -> CheckSession:
        """Rebuild the candidate's pseudonym in every peer domain and match them.

        On a match the CTS records this domain's pseudonym as ``alarm``. Any
        unreachable peer aborts the check before the registry is touched.
        """
        upi = Upi.of(upi)
        peer_ids = [p for p in (self.directory.idps if peers is None else peers) if p != self.idp_id]
        sid = self._new_session_id()
        x = self.hash_upi(upi)
        r = self._sample_blinding()
        check = CheckSession(sid, r, self._blind(x, r))
        for peer in peer_ids:
            if peer not in self.directory.idps:
                raise UnknownIdp(peer)
            check.peers[peer] = PeerState(peer, self._sample_exchange_blinder())
        self.checks[sid] = check
        try:
            own_x = domain_transform(check.x_blinded, self.credential, self.pub)
            y_own = self._call(CTS_NAME, Envelope("eval_request", sid, {"x": own_x.value_x}), "eval_response").body["y"]
            check.own_pid = unblind_domain(y_own, r, self._own_r_power(r), self.pub)

            if self.fan_out > 1 and len(peer_ids) > 1:
                with ThreadPoolExecutor(max_workers=self.fan_out) as pool:
                    list(pool.map(lambda p: self._resolve_peer(check, check.peers[p]), peer_ids))
            else:
                for peer in peer_ids:
                    self._resolve_peer(check, check.peers[peer])

            pids = [check.peers[p].pid.value for p in peer_ids]
            reply = self._call(CTS_NAME, Envelope("registry_match_request", sid, {"pids": pids}), "registry_match_response")
            check.resolve(reply.body.get("matched_pid"))
            if check.matched:
                self._call(CTS_NAME, Envelope("alarm_insert", sid, {"pid": check.own_pid.value}), "ack")
        except BaseException:
            check.outcome = "aborted"
            raise
        finally:
            check.scrub()
        return check

    def _resolve_peer(self, check: CheckSession, peer: PeerState) -> None:
        sid = check.session_id
        reply = self._call(
            CTS_NAME, Envelope("transform_request", sid, {"x": check.x_blinded.value_x, "idp": peer.idp_id}), "eval_response"
        )
        peer.y = reply.body["y"]
        m = exchange_blind(check.r, peer.k, self.directory.idps[peer.idp_id], self.pub)
        reply = self._call(idp_name(peer.idp_id), Envelope("exchange_request", sid, {"m": m}), "exchange_response")
        peer.t_power = exchange_recover(reply.body["s"], peer.k, self.pub)
        peer.pid = unblind_domain(peer.y, check.r, peer.t_power, self.pub)

    # -- full registration flow ------------------------------------------------

    def register(self, user: User, upi: Upi | bytes | str, token: Token | None = None) -> Token:
        """Token holders take the subsequent path; everyone else is checked first."""
        if token is not None:
            return self.subsequent_enroll(user, upi, token)
        check = self.cooperative_check(upi)
        if check.matched:
            raise DuplicateDetected(check.matched_pid)
        return self.first_enroll(user, upi)


# -- module-level entry points -----------------------------------------------

def onboard_idp(cts: CentralService, idp_id: str) -> DomainCredential:
    return cts.onboard_idp(idp_id)


def first_enroll(user: User, idp: IdentityProvider, upi: Upi | bytes | str) -> Token:
    return idp.first_enroll(user, upi)


def subsequent_enroll(user: User, idp: IdentityProvider, upi: Upi | bytes | str, presented: Token) -> Token:
    return idp.subsequent_enroll(user, upi, presented)


def cooperative_check(idp: IdentityProvider, upi: Upi | bytes | str) -> CheckSession:
    return idp.cooperative_check(upi)


def expected_pid(upi: Upi | bytes | str, cts_key: RsaKeyPair, t_private: Natural) -> Natural:
    """Direct oracle ``H(UPI)^(d*t) mod N`` for tests and audits."""
    x = fdh_hash(Upi.of(upi).value, cts_key.public)
    return pow(x, cts_key.private_d * t_private, cts_key.modulus_n)


__all__ = [
    "CTS_NAME", "CentralService", "CheckSession", "EnrollmentSession", "FederationDirectory",
    "IdentityProvider", "KycOracle", "Phase", "ProtocolRejection", "Upi", "User",
    "cooperative_check", "expected_pid", "first_enroll", "idp_name", "onboard_idp",
    "subsequent_enroll",
]
