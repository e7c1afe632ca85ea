"""RSA-OPRF engine: blinding, evaluation, domain transforms and the exponent exchange.

All arithmetic runs modulo the single CTS modulus N. A domain credential is
an exponent pair ``(e_j, t_j)`` with ``e_j * t_j = 1 (mod lambda(N))`` issued by
the key holder, so that ``PID_j = H(UPI)^(d*t_j) mod N`` can be rebuilt by
any IdP through the exchange below.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from .errors import InputNotUnit, InvalidKey, NotInvertible, OutOfRange
from .numcore import (
    DeterministicRng,
    Natural,
    PublicKey,
    RsaKeyPair,
    from_hex,
    i2osp,
    mod_inverse,
    mod_pow,
)


@dataclass(frozen=True)
class BlindingFactor:
    r: Natural
    r_inverse: Natural

    @classmethod
    def create(cls, r: Natural, pub: PublicKey) -> "BlindingFactor":
        n = pub.modulus_n
        if not 2 <= r < n:
            raise OutOfRange("blinding factor must lie in [2, N-1]")
        if math.gcd(r, n) != 1:
            raise InputNotUnit("blinding factor must be a unit mod N")
        return cls(r, mod_inverse(r, n))

    @classmethod
    def sample(cls, rng: DeterministicRng, pub: PublicKey) -> "BlindingFactor":
        return cls.create(_sample_unit(rng, pub.modulus_n), pub)


@dataclass(frozen=True)
class ExchangeBlinder:
    k: Natural
    k_inverse: Natural

    @classmethod
    def create(cls, k: Natural, pub: PublicKey) -> "ExchangeBlinder":
        n = pub.modulus_n
        if not 2 <= k < n or math.gcd(k, n) != 1:
            raise InputNotUnit("exchange blinder must be a unit in [2, N-1]")
        return cls(k, mod_inverse(k, n))

    @classmethod
    def sample(cls, rng: DeterministicRng, pub: PublicKey) -> "ExchangeBlinder":
        return cls.create(_sample_unit(rng, pub.modulus_n), pub)


@dataclass(frozen=True)
class BlindedInput:
    value_x: Natural

    def __post_init__(self):
        if self.value_x <= 0:
            raise OutOfRange("blinded value must be positive")


@dataclass(frozen=True)
class DomainCredential:
    """An IdP's private domain exponent and its published counterpart."""

    idp_id: str
    t_private: Natural
    e_public: Natural

    def check(self, lambda_n: Natural) -> None:
        if self.t_private * self.e_public % lambda_n != 1:
            raise InvalidKey("domain exponents are not inverse mod lambda")

    @property
    def public(self) -> tuple[str, Natural]:
        return self.idp_id, self.e_public

    def to_text(self) -> str:
        return f"idp_id={self.idp_id}\nt={self.t_private:x}\ne={self.e_public:x}\n"

    @classmethod
    def from_text(cls, text: str) -> "DomainCredential":
        fields = {}
        for line in text.splitlines():
            if line.strip():
                name, sep, value = line.partition("=")
                if not sep:
                    raise InvalidKey(f"bad credential line: {line!r:.60}")
                fields[name] = value
        try:
            return cls(fields["idp_id"], from_hex(fields["t"]), from_hex(fields["e"]))
        except KeyError as exc:
            raise InvalidKey(f"credential file missing {exc}") from None


@dataclass(frozen=True)
class Pid:
    value: Natural

    def __post_init__(self):
        if self.value <= 0:
            raise OutOfRange("pid must be positive")

    def encode(self, pub: PublicKey) -> bytes:
        return i2osp(self.value, pub.n_len)


def _sample_unit(rng: DeterministicRng, n: int) -> int:
    while True:
        v = rng.randrange(2, n)
        if math.gcd(v, n) == 1:
            return v


def _check_element(value: Natural, n: Natural, what: str) -> None:
    if not 0 < value < n:
        raise OutOfRange(f"{what} must lie in (0, N)")


def blind(x: Natural, r: BlindingFactor, cts_pub: PublicKey) -> BlindedInput:
    n = cts_pub.modulus_n
    if not 0 < x < n or math.gcd(x, n) != 1:
        raise InputNotUnit("input must be a unit of Z_N")
    return BlindedInput(x * mod_pow(r.r, cts_pub.public_e, n) % n)


def evaluate(x_blinded: BlindedInput | Natural, cts_key: RsaKeyPair) -> Natural:
    """CTS side: ``X^d mod N``."""
    x = x_blinded.value_x if isinstance(x_blinded, BlindedInput) else x_blinded
    _check_element(x, cts_key.modulus_n, "evaluation input")
    return mod_pow(x, cts_key.private_d, cts_key.modulus_n)


# the name used throughout the protocol description
eval = evaluate  # noqa: A001


def unblind(y: Natural, r: BlindingFactor, cts_pub: PublicKey) -> Natural:
    n = cts_pub.modulus_n
    _check_element(y, n, "evaluation output")
    return y * r.r_inverse % n


def domain_transform(x_blinded: BlindedInput, cred: DomainCredential, cts_pub: PublicKey) -> BlindedInput:
    return BlindedInput(mod_pow(x_blinded.value_x, cred.t_private, cts_pub.modulus_n))


def unblind_domain(y: Natural, r: BlindingFactor, cred_t_power_of_r: Natural, cts_pub: PublicKey) -> Pid:
    """Strip ``r^t`` from an evaluated, domain-transformed value.

    ``r`` is kept in the signature for symmetry with :func:`unblind`; only the
    already-exponentiated ``r^t`` enters the computation.
    """
    n = cts_pub.modulus_n
    if math.gcd(cred_t_power_of_r, n) != 1:
        raise NotInvertible("r^t is not a unit mod N")
    return Pid(y * mod_inverse(cred_t_power_of_r, n) % n)


def exchange_blind(r: BlindingFactor, k: ExchangeBlinder, peer_e: Natural, cts_pub: PublicKey) -> Natural:
    n = cts_pub.modulus_n
    return mod_pow(k.k, peer_e, n) * r.r % n


def exchange_apply(m: Natural, cred: DomainCredential, cts_pub: PublicKey) -> Natural:
    """Peer side of the exchange: ``s = m^t_j = k * r^t_j``."""
    _check_element(m, cts_pub.modulus_n, "exchange value")
    return mod_pow(m, cred.t_private, cts_pub.modulus_n)


def exchange_recover(s: Natural, k: ExchangeBlinder, cts_pub: PublicKey) -> Natural:
    return s * k.k_inverse % cts_pub.modulus_n


def prf_output(y: Natural, cts_pub: PublicKey) -> bytes:
    """Finalised PRF value ``H'(y)``.

    Pseudonyms stay raw group elements so they can be unblinded and matched;
    this helper exists for callers wanting a fixed-size PRF output and is not
    used by the enrollment protocol.
    """
    return hashlib.sha256(b"fedblind-prf-v1" + i2osp(y, cts_pub.n_len)).digest()
