import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from fedblind.credentials import (NONCE_LEN, TOKEN_TAG, Challenge,
                                  ChallengeVerifier, Token, UserKeyPair,
                                  blind_message, fdh_sign, fdh_verify,
                                  issue_token, make_challenge, respond,
                                  sign_blinded, token_message,
                                  unblind_signature, verify_response,
                                  verify_token)
from fedblind.errors import StaleNonce
from fedblind.numcore import (DeterministicRng, PublicKey, fdh_hash,
                              generate_keypair, mod_pow)
from fedblind.oprf import BlindingFactor, Pid

from conftest import seed

CTS = generate_keypair(64, seed(100), "cts")
USER = UserKeyPair.generate(64, seed(101))
OTHER = UserKeyPair.generate(64, seed(102))


def test_fdh_signature_is_hash_to_the_d():
    sig = fdh_sign(b"hello", CTS)
    assert sig == mod_pow(fdh_hash(b"hello", CTS.public), CTS.private_d, CTS.modulus_n)
    assert fdh_verify(b"hello", sig, CTS.public)
    assert not fdh_verify(b"hellp", sig, CTS.public)
    assert not fdh_verify(b"hello", sig, USER.pk_u)


def test_chaum_blind_signature_matches_plain():
    r = BlindingFactor.sample(DeterministicRng(seed(1), "chaum"), CTS.public)
    blinded = blind_message(b"msg", r, CTS.public)
    assert blinded != fdh_hash(b"msg", CTS.public)
    sig = unblind_signature(sign_blinded(blinded, CTS), r, CTS.public)
    assert sig == fdh_sign(b"msg", CTS)


def test_token_message_layout():
    pk = USER.pk_u
    msg = token_message(Pid(5), pk, CTS.public)
    assert len(TOKEN_TAG) == 18
    want = 18 + CTS.public.n_len + 4 + pk.n_len + 4 + (pk.public_e.bit_length() + 7) // 8
    assert len(msg) == want
    assert msg.startswith(TOKEN_TAG)


def test_token_message_n35():
    pub = PublicKey(35, 5)
    msg = token_message(Pid(18), pub, pub)
    assert msg == TOKEN_TAG + b"\x12" + b"\x00\x00\x00\x01\x23" + b"\x00\x00\x00\x01\x05"


def test_token_issue_verify_and_tamper():
    tok = issue_token(Pid(12345), USER.pk_u, CTS)
    assert verify_token(tok, CTS.public)
    assert not verify_token(dataclasses.replace(tok, pid=Pid(12346)), CTS.public)
    assert not verify_token(dataclasses.replace(tok, pk_u=OTHER.pk_u), CTS.public)
    assert not verify_token(dataclasses.replace(tok, signature=tok.signature ^ 1), CTS.public)
    assert not verify_token(tok, generate_keypair(64, seed(103)).public)


def test_token_serialisation(tmp_path):
    tok = issue_token(Pid(777), USER.pk_u, CTS)
    assert set(tok.to_dict()) == {"pid", "user_n", "user_e", "sig"}
    assert Token.from_dict(tok.to_dict()) == tok
    tok.save(tmp_path / "t.json")
    assert Token.load(tmp_path / "t.json") == tok


def test_challenge_flow():
    ch = make_challenge(DeterministicRng(seed(4), "c"))
    assert len(ch.nonce) == NONCE_LEN
    sig = respond(ch, USER)
    assert verify_response(ch, sig, USER.pk_u)
    assert not verify_response(ch, respond(ch, OTHER), USER.pk_u)
    assert not verify_response(Challenge(bytes(32)), sig, USER.pk_u)


def test_verifier_rejects_replay_and_unknown():
    v = ChallengeVerifier(DeterministicRng(seed(5), "v"))
    ch = v.issue()
    sig = respond(ch, USER)
    assert v.verify(ch, sig, USER.pk_u)
    with pytest.raises(StaleNonce):
        v.verify(ch, sig, USER.pk_u)
    with pytest.raises(StaleNonce):
        v.verify(Challenge(b"\x01" * 32), sig, USER.pk_u)


def test_verifier_consumes_on_failure():
    v = ChallengeVerifier(DeterministicRng(seed(6), "v"))
    ch = v.issue()
    assert not v.verify(ch, respond(ch, OTHER), USER.pk_u)
    with pytest.raises(StaleNonce):
        v.verify(ch, respond(ch, USER), USER.pk_u)


@given(st.integers(1, 2**63), st.binary(min_size=32, max_size=32))
@settings(max_examples=50, deadline=None)
def test_token_property(pid, nonce):
    pid = pid % (CTS.modulus_n - 1) + 1
    tok = issue_token(Pid(pid), USER.pk_u, CTS)
    assert verify_token(tok, CTS.public)
    ch = Challenge(nonce)
    assert verify_response(ch, respond(ch, USER), tok.pk_u)
    assert not verify_response(ch, respond(ch, OTHER), tok.pk_u)
