"""Modular arithmetic, RSA key generation, full-domain hashing and encodings.

Naturals are plain Python ``int`` values (already arbitrary precision and
exact), so there is no wrapper type; functions validate ranges where the
contract demands it.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import (
    BadHex,
    InvalidBits,
    InvalidKey,
    NotInvertible,
    ValueTooLarge,
    ZeroModulus,
)

Natural = int

SEED_LEN = 32
MR_ROUNDS = 40
DEFAULT_KEY_BITS = 512
FDH_MAX_COUNTER = 1000
_FDH_TAG = b"fedblind-fdh-v1"
_HEX_RE = re.compile(r"0|[1-9a-f][0-9a-f]*\Z")

_SMALL_PRIMES = [p for p in range(2, 1000) if all(p % q for q in range(2, math.isqrt(p) + 1))]


# -- encodings ---------------------------------------------------------------

def to_hex(value: Natural) -> str:
    if value < 0:
        raise ValueError("negative values have no hex encoding")
    return format(value, "x")


def from_hex(text: str) -> Natural:
    """Parse canonical lowercase hex: no prefix, no sign, no leading zeros."""
    if not isinstance(text, str) or not _HEX_RE.fullmatch(text):
        raise BadHex(f"not canonical lowercase hex: {text!r:.40}")
    return int(text, 16)


def byte_length(value: Natural) -> int:
    return max(1, (value.bit_length() + 7) // 8)


def i2osp(value: Natural, length: int) -> bytes:
    if value < 0 or value >= 256 ** length:
        raise ValueTooLarge(f"value does not fit in {length} bytes")
    return value.to_bytes(length, "big")


def os2ip(data: bytes) -> Natural:
    return int.from_bytes(data, "big")


# -- deterministic randomness ------------------------------------------------

@dataclass(frozen=True)
class Seed:
    data: bytes

    def __post_init__(self):
        if not isinstance(self.data, bytes) or len(self.data) != SEED_LEN:
            raise ValueError(f"seed must be exactly {SEED_LEN} bytes")

    @classmethod
    def from_hex(cls, text: str) -> "Seed":
        try:
            return cls(bytes.fromhex(text))
        except ValueError as exc:
            raise ValueError(f"seed must be {2 * SEED_LEN} hex digits") from exc

    @classmethod
    def from_int(cls, n: int) -> "Seed":
        return cls(hashlib.sha256(b"fedblind-seed" + n.to_bytes(8, "big")).digest())

    def hex(self) -> str:
        return self.data.hex()


class DeterministicRng:
    """SHA-256 counter-mode byte generator keyed by a seed and a label.

    ``fork`` derives independent child streams so that adding a consumer
    in one place does not shift the bytes seen elsewhere.
    """

    def __init__(self, seed: Seed | bytes, label: bytes | str = b""):
        raw = seed.data if isinstance(seed, Seed) else bytes(seed)
        if isinstance(label, str):
            label = label.encode()
        self._key = hashlib.sha256(b"fedblind-rng" + len(raw).to_bytes(2, "big") + raw + label).digest()
        self._counter = 0
        self._buffer = b""

    def fork(self, label: bytes | str) -> "DeterministicRng":
        return DeterministicRng(self._key, label)

    def bytes(self, n: int) -> bytes:
        while len(self._buffer) < n:
            self._buffer += hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest()
            self._counter += 1
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def randbits(self, k: int) -> int:
        if k <= 0:
            return 0
        value = os2ip(self.bytes((k + 7) // 8))
        return value >> (8 * ((k + 7) // 8) - k)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("upper bound must be positive")
        k = n.bit_length()
        while True:
            v = self.randbits(k)
            if v < n:
                return v

    def randrange(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi)``."""
        if hi <= lo:
            raise ValueError("empty range")
        return lo + self.randbelow(hi - lo)


# -- modular arithmetic ------------------------------------------------------

def mod_pow(base: Natural, exponent: Natural, modulus: Natural) -> Natural:
    if modulus < 2:
        raise ZeroModulus("modulus must be at least 2")
    if exponent < 0:
        raise ValueError("negative exponent")
    return pow(base, exponent, modulus)


def mod_inverse(a: Natural, modulus: Natural) -> Natural:
    if modulus < 2:
        raise ZeroModulus("modulus must be at least 2")
    if math.gcd(a, modulus) != 1:
        raise NotInvertible("element shares a factor with the modulus")
    return pow(a, -1, modulus)


def lcm(a: int, b: int) -> int:
    return a // math.gcd(a, b) * b


def is_probable_prime(n: int, rounds: int = MR_ROUNDS, rng: DeterministicRng | None = None) -> bool:
    """Miller-Rabin with ``rounds`` bases drawn from ``rng``.

    Trial division settles everything below 10^6 exactly. Without an
    explicit generator the bases are derived from ``n`` itself, which keeps
    validation of stored keys deterministic.
    """
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    if n < _SMALL_PRIMES[-1] ** 2:
        return True
    if rng is None:
        rng = DeterministicRng(i2osp(n, byte_length(n)), b"mr-bases")
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: DeterministicRng) -> int:
    """Prime with exactly ``bits`` bits and the top two bits set."""
    if bits < 3:
        raise InvalidBits("prime size too small")
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    while True:
        candidate = rng.randbits(bits) | top | 1
        if is_probable_prime(candidate, rng=rng):
            return candidate


# -- RSA keys ----------------------------------------------------------------

@dataclass(frozen=True)
class PublicKey:
    modulus_n: Natural
    public_e: Natural

    def __post_init__(self):
        if self.modulus_n < 4:
            raise InvalidKey("modulus must be at least 4")
        if self.public_e < 3 or self.public_e % 2 == 0:
            raise InvalidKey("public exponent must be odd and at least 3")

    @property
    def n_len(self) -> int:
        """Byte length of the modulus; fixed width for encoded group elements."""
        return byte_length(self.modulus_n)

    def to_text(self) -> str:
        return _fields_to_text([("n", self.modulus_n), ("e", self.public_e)])

    @classmethod
    def from_text(cls, text: str) -> "PublicKey":
        fields = _text_to_fields(text, ("n", "e"))
        return cls(fields["n"], fields["e"])


@dataclass(frozen=True)
class RsaKeyPair:
    p: Natural
    q: Natural
    modulus_n: Natural
    public_e: Natural
    private_d: Natural
    lambda_n: Natural

    def __post_init__(self):
        p, q = self.p, self.q
        if p == q:
            raise InvalidKey("p and q must differ")
        if not (is_probable_prime(p) and is_probable_prime(q)):
            raise InvalidKey("p and q must be prime")
        if self.modulus_n != p * q:
            raise InvalidKey("n != p*q")
        if self.lambda_n != lcm(p - 1, q - 1):
            raise InvalidKey("lambda != lcm(p-1, q-1)")
        if math.gcd(self.public_e, self.lambda_n) != 1:
            raise InvalidKey("e not coprime to lambda")
        if self.public_e * self.private_d % self.lambda_n != 1:
            raise InvalidKey("e*d != 1 mod lambda")
        PublicKey(self.modulus_n, self.public_e)

    @classmethod
    def from_primes(cls, p: int, q: int, e: int, d: int | None = None) -> "RsaKeyPair":
        lam = lcm(p - 1, q - 1)
        if d is None:
            if math.gcd(e, lam) != 1:
                raise InvalidKey("e not coprime to lambda")
            d = mod_inverse(e, lam)
        return cls(p, q, p * q, e, d, lam)

    @property
    def public(self) -> PublicKey:
        return PublicKey(self.modulus_n, self.public_e)

    def to_text(self) -> str:
        return _fields_to_text([
            ("p", self.p), ("q", self.q), ("n", self.modulus_n),
            ("e", self.public_e), ("d", self.private_d), ("lambda", self.lambda_n),
        ])

    @classmethod
    def from_text(cls, text: str) -> "RsaKeyPair":
        f = _text_to_fields(text, ("p", "q", "n", "e", "d", "lambda"))
        return cls(f["p"], f["q"], f["n"], f["e"], f["d"], f["lambda"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "RsaKeyPair":
        return cls.from_text(Path(path).read_text())


def _fields_to_text(fields: Iterable[tuple[str, int]]) -> str:
    return "".join(f"{name}={to_hex(value)}\n" for name, value in fields)


def _text_to_fields(text: str, names: tuple[str, ...]) -> dict[str, int]:
    out: dict[str, int] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, sep, value = line.partition("=")
        if not sep or name not in names or name in out:
            raise InvalidKey(f"unexpected key file line: {line!r:.60}")
        out[name] = from_hex(value)
    missing = [n for n in names if n not in out]
    if missing:
        raise InvalidKey(f"key file missing fields: {', '.join(missing)}")
    return out


def _choose_public_exponent(n: int, lam: int) -> int:
    if 65537 < n and math.gcd(65537, lam) == 1:
        return 65537
    e = 3
    while math.gcd(e, lam) != 1:
        e += 2
    return e


def generate_keypair(bits: int, seed: Seed | bytes, label: str = "keygen") -> RsaKeyPair:
    """Deterministic RSA key with a modulus of exactly ``bits`` bits."""
    if not isinstance(bits, int) or bits < 16 or bits % 2:
        raise InvalidBits("key size must be an even number of bits, at least 16")
    rng = DeterministicRng(seed, label)
    half = bits // 2
    while True:
        p = random_prime(half, rng)
        q = random_prime(half, rng)
        if p == q:
            continue
        lam = lcm(p - 1, q - 1)
        n = p * q
        e = _choose_public_exponent(n, lam)
        return RsaKeyPair(p, q, n, e, mod_inverse(e, lam), lam)


# -- full-domain hash --------------------------------------------------------

def fdh_hash(data: bytes, key: PublicKey) -> Natural:
    """Hash ``data`` onto a unit of Z_N in ``[2, N-1]``.

    SHA-256 blocks ``H(tag || outer || inner || data)`` are concatenated to
    the byte length of N and reduced mod N; the outer counter advances until
    the result is a unit in range.
    """
    n = key.modulus_n
    width = key.n_len
    for outer in range(FDH_MAX_COUNTER):
        stream = bytearray()
        inner = 0
        while len(stream) < width:
            stream += hashlib.sha256(
                _FDH_TAG + outer.to_bytes(4, "big") + inner.to_bytes(4, "big") + data
            ).digest()
            inner += 1
        h = os2ip(bytes(stream[:width])) % n
        if h >= 2 and math.gcd(h, n) == 1:
            return h
    raise InvalidKey("full-domain hash found no unit; modulus is malformed")
