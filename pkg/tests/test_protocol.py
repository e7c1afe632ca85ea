import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from fedblind.credentials import UserKeyPair, issue_token
from fedblind.errors import (DuplicateDetected, DuplicateIdpId, InvalidToken,
                             KycFailed, OutOfPhase, PeerUnavailable,
                             ProofOfPossessionFailed, RegistryConflict)
from fedblind.numcore import (DeterministicRng, PublicKey, RsaKeyPair,
                              generate_keypair)
from fedblind.oprf import BlindedInput, BlindingFactor, Pid
from fedblind.protocol import (CTS_NAME, CentralService, EnrollmentSession,
                               FederationDirectory, IdentityProvider,
                               KycOracle, Phase, User, expected_pid)
from fedblind.registry import Status
from fedblind.wire import Envelope, Router

from conftest import seed


class Fed:
    def __init__(self, s=1, n_idps=3, kyc=None):
        rng = DeterministicRng(seed(s), "test-fed")
        self.key = generate_keypair(64, rng.fork("k").bytes(32))
        self.router = Router()
        self.cts = CentralService(self.key, rng.fork("cts"), self.router)
        self.router.register(CTS_NAME, self.cts)
        self.kyc = kyc or KycOracle()
        self.idps = []
        for i in range(n_idps):
            cred = self.cts.onboard_idp(str(i + 1))
            idp = IdentityProvider(cred, self.cts.directory, rng.fork(f"idp{i}"), self.router, self.kyc)
            self.router.register(idp.name, idp)
            self.idps.append(idp)
        self._rng = rng

    def user(self, name):
        u = User(name, UserKeyPair.generate(64, self._rng.fork(name).bytes(32)))
        self.router.register(name, u)
        return u

    def pid(self, upi, idp):
        return expected_pid(upi, self.key, idp.credential.t_private)


@pytest.fixture
def fed():
    return Fed()


def test_first_enroll_matches_oracle(fed):
    alice = fed.user("alice")
    a = fed.idps[0]
    tok = a.first_enroll(alice, "UPI-alice")
    assert tok.pid.value == fed.pid("UPI-alice", a)
    assert tok.pk_u == alice.pk_u
    assert fed.cts.registry.lookup(tok.pid) is Status.OK
    assert alice.tokens == [tok]


def test_repeat_enroll_conflicts(fed):
    alice = fed.user("alice")
    fed.idps[0].first_enroll(alice, "UPI-alice")
    before = fed.cts.registry.dumps()
    with pytest.raises(RegistryConflict) as err:
        fed.idps[0].first_enroll(alice, "UPI-alice")
    assert err.value.code == "already_registered"
    assert fed.cts.registry.dumps() == before


def test_wrong_secret_key_fails_possession(fed):
    impostor = User("mallory", UserKeyPair.generate(64, seed(50)),
                    signing_key=generate_keypair(64, seed(51)))
    fed.router.register("mallory", impostor)
    with pytest.raises(ProofOfPossessionFailed):
        fed.idps[0].first_enroll(impostor, "UPI-m")
    assert len(fed.cts.registry) == 0


def test_kyc_failure_writes_nothing():
    fed = Fed(kyc=KycOracle({b"UPI-bad": False}))
    with pytest.raises(KycFailed):
        fed.idps[0].first_enroll(fed.user("b"), "UPI-bad")
    assert len(fed.cts.registry) == 0
    (session,) = fed.idps[0].sessions.values()
    assert session.phase is Phase.REJECTED


def test_subsequent_enroll_with_own_token(fed):
    alice = fed.user("alice")
    tok = fed.idps[0].first_enroll(alice, "UPI-alice")
    tok2 = fed.idps[1].subsequent_enroll(alice, "UPI-alice", tok)
    assert tok2.pid.value == fed.pid("UPI-alice", fed.idps[1])
    assert tok2.pk_u == tok.pk_u


def test_stolen_token_rejected(fed):
    alice, mallory = fed.user("alice"), fed.user("mallory")
    tok = fed.idps[0].first_enroll(alice, "UPI-alice")
    before = fed.cts.registry.dumps()
    with pytest.raises(ProofOfPossessionFailed):
        fed.idps[1].subsequent_enroll(mallory, "UPI-mallory", tok)
    assert fed.cts.registry.dumps() == before


def test_forged_token_rejected(fed):
    mallory = fed.user("mallory")
    fake = issue_token(Pid(5), mallory.pk_u, generate_keypair(64, seed(77)))
    with pytest.raises(InvalidToken):
        fed.idps[1].subsequent_enroll(mallory, "UPI-m", fake)
    assert len(fed.cts.registry) == 0


def test_cooperative_check_clear_then_match(fed):
    a, b = fed.idps[0], fed.idps[1]
    check = b.cooperative_check("UPI-alice")
    assert check.outcome == "clear"
    assert check.own_pid.value == fed.pid("UPI-alice", b)
    for peer in check.peers.values():
        assert peer.pid.value == fed.pid("UPI-alice", fed.idps[int(peer.idp_id) - 1])
    assert len(fed.cts.registry) == 0

    a.first_enroll(fed.user("alice"), "UPI-alice")
    check = b.cooperative_check("UPI-alice")
    assert check.matched
    assert check.matched_pid == fed.pid("UPI-alice", a)
    assert fed.cts.registry.lookup(fed.pid("UPI-alice", b)) is Status.ALARM


def test_register_raises_duplicate(fed):
    fed.idps[0].register(fed.user("alice"), "UPI-alice")
    with pytest.raises(DuplicateDetected):
        fed.idps[2].register(fed.user("alice2"), "UPI-alice")
    with pytest.raises(RegistryConflict) as err:
        fed.idps[2].first_enroll(fed.user("alice3"), "UPI-alice")
    assert err.value.code == "alarm_locked"


def test_check_scrubs_secrets(fed):
    check = fed.idps[0].cooperative_check("UPI-x")
    assert check.r is None and check.x_blinded is None
    assert all(p.k is None and p.t_power is None for p in check.peers.values())


def test_session_scrubbed_after_token(fed):
    fed.idps[0].first_enroll(fed.user("alice"), "UPI-alice")
    (session,) = fed.idps[0].sessions.values()
    assert session.phase is Phase.TOKEN_ISSUED
    assert session.r is None and session.x is None and session.evaluated is None


def test_peer_down_fails_closed(fed):
    fed.idps[0].first_enroll(fed.user("alice"), "UPI-alice")
    fed.router.set_down(fed.idps[1].name)
    before = fed.cts.registry.dumps()
    with pytest.raises(PeerUnavailable):
        fed.idps[2].cooperative_check("UPI-alice")
    assert fed.cts.registry.dumps() == before
    assert list(fed.idps[2].checks.values())[-1].outcome == "aborted"


def test_fan_out_gives_same_pids():
    f1, f2 = Fed(s=8), Fed(s=8)
    f2.idps[0].fan_out = 4
    c1 = f1.idps[0].cooperative_check("UPI-q")
    c2 = f2.idps[0].cooperative_check("UPI-q")
    assert {k: p.pid for k, p in c1.peers.items()} == {k: p.pid for k, p in c2.peers.items()}


def test_unknown_session_challenge_response(fed):
    reply = fed.router.send("x", CTS_NAME, Envelope("challenge_response", "nope", {"sig": 5}))
    assert reply.type == "error" and reply.body["code"] == "unknown_session"


def test_onboarding_five():
    fed = Fed(s=3, n_idps=5)
    lam = fed.key.lambda_n
    es = {e % lam for e in fed.cts.directory.idps.values()}
    assert len(es) == 5 and fed.key.public_e % lam not in es
    for idp in fed.idps:
        c = idp.credential
        assert c.e_public * c.t_private % lam == 1 and c.t_private != 1
    with pytest.raises(DuplicateIdpId):
        fed.cts.onboard_idp("1")


def test_toy_onboarding():
    # lambda(35) = 12; the odd units of Z_12 other than 1 and 5 (=e) are 7 and 11
    cts = CentralService(RsaKeyPair(5, 7, 35, 5, 5, 12), DeterministicRng(seed(0), "toy"))
    cred = cts.onboard_idp("a")
    assert (cred.e_public % 12, cred.t_private) in {(7, 7), (11, 11)}


def test_directory_text_round_trip(fed):
    d = fed.cts.directory
    assert FederationDirectory.from_text(d.to_text()) == d
    with pytest.raises(ValueError):
        FederationDirectory(PublicKey(35, 5)).add("bad id", 7)


@given(st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_enroll_and_check_paths_agree(s):
    fed = Fed(s=s)
    upi = f"UPI-{s}"
    home, other = fed.idps[s % 3], fed.idps[(s + 1) % 3]
    tok = home.first_enroll(fed.user("u"), upi)
    check = other.cooperative_check(upi)
    assert tok.pid.value == fed.pid(upi, home) == check.matched_pid


class SessionMachine(RuleBasedStateMachine):
    """Drive EnrollmentSession with arbitrary step orders."""

    steps = ["blinded", "transformed", "evaluated", "pid", "challenge", "token"]

    def __init__(self):
        super().__init__()
        self.s = EnrollmentSession("s", BlindingFactor.create(3, PublicKey(35, 5)), 2)
        self.done = 0

    def _call(self, step):
        return {
            "blinded": lambda: self.s.record_blinded(BlindedInput(31)),
            "transformed": lambda: self.s.record_transformed(BlindedInput(31)),
            "evaluated": lambda: self.s.record_evaluation(26),
            "pid": lambda: self.s.record_pid(Pid(18)),
            "challenge": self.s.record_challenge,
            "token": lambda: self.s.record_token(None),
        }[step]()

    @rule(step=st.sampled_from(steps))
    def step(self, step):
        terminal = self.s.phase in (Phase.TOKEN_ISSUED, Phase.REJECTED)
        if not terminal and self.steps.index(step) == self.done:
            self._call(step)
            self.done += 1
        else:
            before = self.s.phase
            with pytest.raises(OutOfPhase):
                self._call(step)
            assert self.s.phase is before

    @precondition(lambda self: self.s.phase not in (Phase.TOKEN_ISSUED, Phase.REJECTED))
    @rule()
    def reject(self):
        self.s.reject()

    @invariant()
    def scrubbed_when_terminal(self):
        if self.s.phase in (Phase.TOKEN_ISSUED, Phase.REJECTED):
            assert self.s.r is None and self.s.x is None


TestSessionMachine = SessionMachine.TestCase
