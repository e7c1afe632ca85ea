"""User keys, CTS-signed tokens and challenge-response proof of possession.

Signatures are RSA-FDH: ``sig = fdh_hash(msg)^d mod N``. Users sign with their
own RSA key, independent of the CTS modulus.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidKey, StaleNonce
from .numcore import (
    DeterministicRng,
    Natural,
    PublicKey,
    RsaKeyPair,
    Seed,
    byte_length,
    fdh_hash,
    from_hex,
    generate_keypair,
    i2osp,
    mod_pow,
    to_hex,
)
from .oprf import BlindingFactor, Pid

TOKEN_TAG = b"fedblind-token-v1\x00"
CHALLENGE_CONTEXT = "fedblind-cr-v1"
NONCE_LEN = 32


@dataclass(frozen=True)
class UserKeyPair:
    key: RsaKeyPair

    @classmethod
    def generate(cls, bits: int, seed: Seed | bytes) -> "UserKeyPair":
        return cls(generate_keypair(bits, seed, label="user-key"))

    @property
    def pk_u(self) -> PublicKey:
        return self.key.public


def fdh_sign(message: bytes, key: RsaKeyPair) -> Natural:
    return mod_pow(fdh_hash(message, key.public), key.private_d, key.modulus_n)


def fdh_verify(message: bytes, signature: Natural, pub: PublicKey) -> bool:
    if not 0 < signature < pub.modulus_n:
        return False
    return mod_pow(signature, pub.public_e, pub.modulus_n) == fdh_hash(message, pub)


# -- Chaum blind signatures --------------------------------------------------

def blind_message(message: bytes, r: BlindingFactor, signer: PublicKey) -> Natural:
    """Requester: ``m' = H(m) * r^e mod N``."""
    n = signer.modulus_n
    return fdh_hash(message, signer) * mod_pow(r.r, signer.public_e, n) % n


def sign_blinded(blinded: Natural, signer: RsaKeyPair) -> Natural:
    return mod_pow(blinded, signer.private_d, signer.modulus_n)


def unblind_signature(blinded_sig: Natural, r: BlindingFactor, signer: PublicKey) -> Natural:
    return blinded_sig * r.r_inverse % signer.modulus_n


# -- tokens ------------------------------------------------------------------

def _length_prefixed(value: Natural) -> bytes:
    raw = i2osp(value, byte_length(value))
    return len(raw).to_bytes(4, "big") + raw


def token_message(pid: Pid | Natural, pk_u: PublicKey, cts_pub: PublicKey) -> bytes:
    pid_value = pid.value if isinstance(pid, Pid) else pid
    return (
        TOKEN_TAG
        + i2osp(pid_value, cts_pub.n_len)
        + _length_prefixed(pk_u.modulus_n)
        + _length_prefixed(pk_u.public_e)
    )


@dataclass(frozen=True)
class Token:
    """CTS signature over ``(pid, pk_u)``. Carries no issuer information."""

    pid: Pid
    pk_u: PublicKey
    signature: Natural

    def to_dict(self) -> dict[str, str]:
        return {
            "pid": to_hex(self.pid.value),
            "user_n": to_hex(self.pk_u.modulus_n),
            "user_e": to_hex(self.pk_u.public_e),
            "sig": to_hex(self.signature),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Token":
        if set(data) != {"pid", "user_n", "user_e", "sig"}:
            raise InvalidKey("token must have exactly pid, user_n, user_e, sig")
        return cls(
            Pid(from_hex(data["pid"])),
            PublicKey(from_hex(data["user_n"]), from_hex(data["user_e"])),
            from_hex(data["sig"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Token":
        return cls.from_dict(json.loads(Path(path).read_text()))


def issue_token(pid: Pid, pk_u: PublicKey, cts_key: RsaKeyPair) -> Token:
    return Token(pid, pk_u, fdh_sign(token_message(pid, pk_u, cts_key.public), cts_key))


def verify_token(token: Token, cts_pub: PublicKey) -> bool:
    if not 0 < token.pid.value < cts_pub.modulus_n:
        return False
    return fdh_verify(token_message(token.pid, token.pk_u, cts_pub), token.signature, cts_pub)


# -- challenge-response ------------------------------------------------------

@dataclass(frozen=True)
class Challenge:
    nonce: bytes
    context: str = CHALLENGE_CONTEXT

    def __post_init__(self):
        if len(self.nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")


def _pk_digest(pk_u: PublicKey) -> bytes:
    return hashlib.sha256(_length_prefixed(pk_u.modulus_n) + _length_prefixed(pk_u.public_e)).digest()


def challenge_message(challenge: Challenge, pk_u: PublicKey) -> bytes:
    return challenge.context.encode() + challenge.nonce + _pk_digest(pk_u)


def make_challenge(session_rng: DeterministicRng) -> Challenge:
    return Challenge(session_rng.bytes(NONCE_LEN))


def respond(challenge: Challenge, sk_u: RsaKeyPair | UserKeyPair) -> Natural:
    key = sk_u.key if isinstance(sk_u, UserKeyPair) else sk_u
    if challenge.context != CHALLENGE_CONTEXT:
        raise ValueError("challenge context mismatch")
    return fdh_sign(challenge_message(challenge, key.public), key)


def verify_response(challenge: Challenge, response: Natural, pk_u: PublicKey) -> bool:
    if challenge.context != CHALLENGE_CONTEXT:
        return False
    return fdh_verify(challenge_message(challenge, pk_u), response, pk_u)


@dataclass
class ChallengeVerifier:
    """Issues nonces and consumes each one at most once.

    A nonce that was never issued, or has already been checked, raises
    :class:`StaleNonce`; the signature outcome is returned as a bool.
    """

    rng: DeterministicRng
    _outstanding: set[bytes] = field(default_factory=set)
    _consumed: set[bytes] = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def issue(self) -> Challenge:
        with self._lock:
            while True:
                challenge = make_challenge(self.rng)
                if challenge.nonce not in self._consumed and challenge.nonce not in self._outstanding:
                    self._outstanding.add(challenge.nonce)
                    return challenge

    def verify(self, challenge: Challenge, response: Natural, pk_u: PublicKey) -> bool:
        with self._lock:
            if challenge.nonce not in self._outstanding:
                raise StaleNonce("nonce already consumed or never issued")
            self._outstanding.discard(challenge.nonce)
            self._consumed.add(challenge.nonce)
        return verify_response(challenge, response, pk_u)


def load_user_key(path: str | Path) -> UserKeyPair:
    return UserKeyPair(RsaKeyPair.load(path))
