import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import gmpy2

from cipherdenoise.errors import (
    DomainError,
    KeyFileError,
    KeygenError,
    KeyMismatchError,
    MalformedCiphertextError,
)

logger = logging.getLogger(__name__)

KEY_FILE_VERSION = 1
DEFAULT_KEY_BITS = 2048
MIN_KEY_BITS = 16
MILLER_RABIN_ROUNDS = 64
MAX_PRIME_ATTEMPTS = 10_000


def default_rng() -> random.Random:
    """Entropy source used when the caller does not inject a seeded one."""
    return random.SystemRandom()


def int_to_bytes(value: int, length: int | None = None) -> bytes:
    if length is None:
        length = max(1, (value.bit_length() + 7) // 8)
    return int(value).to_bytes(length, "big")


@dataclass(frozen=True)
class PaillierPublicKey:
    """Public half of a Paillier keypair: modulus ``n`` and generator ``g``.

    ``n_sq`` is cached at construction since every homomorphic operation
    reduces modulo it.
    """

    n: int
    g: int
    n_sq: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.n < 15:
            raise KeygenError(f"modulus {self.n} is below the smallest valid product 15")
        object.__setattr__(self, "n_sq", self.n * self.n)
        if not 0 < self.g < self.n_sq or gmpy2.gcd(self.g, self.n) != 1:
            raise KeygenError("generator is not an element of Z*_{n^2}")

    @property
    def fingerprint(self) -> str:
        """SHA-256 over the big-endian bytes of n followed by g, hex encoded."""
        return hashlib.sha256(int_to_bytes(self.n) + int_to_bytes(self.g)).hexdigest()

    @property
    def ciphertext_bytes(self) -> int:
        """Fixed width of one serialized ciphertext."""
        return (self.n_sq.bit_length() + 7) // 8

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    def __repr__(self) -> str:
        return f"<PaillierPublicKey {self.bits} bits {self.fingerprint[:12]}>"


@dataclass(frozen=True)
class PaillierPrivateKey:
    """Private half: ``lam`` = lcm(p-1, q-1), ``mu`` = L(g^lam mod n^2)^-1 mod n.

    The prime factors are retained for the CRT decryption fast path.
    """

    public_key: PaillierPublicKey
    lam: int
    mu: int
    p: int
    q: int

    def __post_init__(self) -> None:
        pk = self.public_key
        if self.p == self.q:
            raise KeygenError("p and q must be distinct")
        if self.p * self.q != pk.n:
            raise KeygenError("p * q does not match the public modulus")
        u = int(gmpy2.powmod(pk.g, self.lam, pk.n_sq))
        if (self.mu * _l_function(u, pk.n)) % pk.n != 1:
            raise KeygenError("mu is not the inverse of L(g^lambda mod n^2)")

    def __repr__(self) -> str:
        return f"<PaillierPrivateKey for {self.public_key.fingerprint[:12]}>"


@dataclass(frozen=True)
class Ciphertext:
    """One element of Z*_{n^2}, tagged with the fingerprint of its key."""

    value: int
    key_id: str


def _l_function(u: int, n: int) -> int:
    return (u - 1) // n


def keypair_from_primes(p: int, q: int) -> tuple[PaillierPublicKey, PaillierPrivateKey]:
    """Build a keypair from known primes with the generator g = n + 1."""
    if p == q:
        raise KeygenError("p and q must be distinct primes")
    if not (gmpy2.is_prime(p, MILLER_RABIN_ROUNDS) and gmpy2.is_prime(q, MILLER_RABIN_ROUNDS)):
        raise KeygenError("p and q must both be prime")
    n = p * q
    if gmpy2.gcd(n, (p - 1) * (q - 1)) != 1:
        raise KeygenError("gcd(pq, (p-1)(q-1)) != 1")
    public_key = PaillierPublicKey(n=n, g=n + 1)
    lam = int(gmpy2.lcm(p - 1, q - 1))
    # with g = n + 1, L(g^lam mod n^2) = lam mod n
    mu = int(gmpy2.invert(lam, n))
    private_key = PaillierPrivateKey(public_key=public_key, lam=lam, mu=mu, p=p, q=q)
    return public_key, private_key


def _generate_prime(bits: int, rng: random.Random) -> int:
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    for _ in range(MAX_PRIME_ATTEMPTS):
        candidate = rng.getrandbits(bits) | top | 1
        if gmpy2.is_prime(candidate, MILLER_RABIN_ROUNDS):
            return candidate
    raise KeygenError(f"no {bits}-bit prime found after {MAX_PRIME_ATTEMPTS} candidates")


def keygen(
    bit_length: int = DEFAULT_KEY_BITS,
    rng: random.Random | None = None,
) -> tuple[PaillierPublicKey, PaillierPrivateKey]:
    """Generate a keypair whose modulus has exactly ``bit_length`` bits.

    Deterministic when ``rng`` is a seeded :class:`random.Random`.
    """
    if bit_length < MIN_KEY_BITS:
        raise KeygenError(f"key size {bit_length} is below the minimum of {MIN_KEY_BITS} bits")
    rng = rng or default_rng()
    half = bit_length // 2
    for _ in range(MAX_PRIME_ATTEMPTS):
        p = _generate_prime(half, rng)
        q = _generate_prime(bit_length - half, rng)
        if p == q or (p * q).bit_length() != bit_length:
            continue
        try:
            keys = keypair_from_primes(p, q)
        except KeygenError:
            continue
        logger.info(
            "[cipherdenoise] Generated %d-bit keypair %s", bit_length, keys[0].fingerprint[:12]
        )
        return keys
    raise KeygenError(f"could not generate a {bit_length}-bit keypair")


def random_unit(pk: PaillierPublicKey, rng: random.Random) -> int:
    """Draw r uniformly from Z*_n."""
    while True:
        r = rng.randrange(1, pk.n)
        if gmpy2.gcd(r, pk.n) == 1:
            return r


def obfuscator(
    pk: PaillierPublicKey, rng: random.Random | None = None, r: int | None = None
) -> int:
    """r^n mod n^2, the randomizing factor of an encryption of zero."""
    if r is None:
        r = random_unit(pk, rng or default_rng())
    return int(gmpy2.powmod(r, pk.n, pk.n_sq))


def encrypt(
    pk: PaillierPublicKey,
    m: int,
    rng: random.Random | None = None,
    r: int | None = None,
) -> Ciphertext:
    """c = g^m * r^n mod n^2 for a fresh r (or an injected one for tests)."""
    if not 0 <= m < pk.n:
        raise DomainError(f"plaintext must lie in [0, n), got {m}")
    if r is not None and (not 0 < r < pk.n or gmpy2.gcd(r, pk.n) != 1):
        raise DomainError("r must be a unit of Z_n")
    # (n + 1)^m = 1 + m*n mod n^2
    nude = (1 + m * pk.n) % pk.n_sq
    value = nude * obfuscator(pk, rng, r) % pk.n_sq
    return Ciphertext(value=value, key_id=pk.fingerprint)


def check_ciphertext(pk: PaillierPublicKey, c: Ciphertext) -> None:
    if c.key_id != pk.fingerprint:
        raise KeyMismatchError("ciphertext was produced under a different public key")
    if not 0 < c.value < pk.n_sq or gmpy2.gcd(c.value, pk.n) != 1:
        raise MalformedCiphertextError("ciphertext is not an element of Z*_{n^2}")


def decrypt(pk: PaillierPublicKey, sk: PaillierPrivateKey, c: Ciphertext) -> int:
    """m = L(c^lambda mod n^2) * mu mod n."""
    check_ciphertext(pk, c)
    u = int(gmpy2.powmod(c.value, sk.lam, pk.n_sq))
    return _l_function(u, pk.n) * sk.mu % pk.n


def decrypt_crt(pk: PaillierPublicKey, sk: PaillierPrivateKey, c: Ciphertext) -> int:
    """Decryption split over p^2 and q^2, recombined with the CRT."""
    check_ciphertext(pk, c)
    p, q = sk.p, sk.q
    mp = _crt_half(c.value, p, pk.g)
    mq = _crt_half(c.value, q, pk.g)
    p_inv = int(gmpy2.invert(p, q))
    return mp + ((mq - mp) * p_inv % q) * p


def _crt_half(value: int, prime: int, g: int) -> int:
    prime_sq = prime * prime
    h = int(gmpy2.invert(_l_function(int(gmpy2.powmod(g, prime - 1, prime_sq)), prime), prime))
    u = int(gmpy2.powmod(value, prime - 1, prime_sq))
    return _l_function(u, prime) * h % prime


def add_cipher(pk: PaillierPublicKey, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Homomorphic addition: Dec(a * b mod n^2) = Dec(a) + Dec(b) mod n."""
    if a.key_id != pk.fingerprint or b.key_id != pk.fingerprint:
        raise KeyMismatchError("operands were encrypted under different keys")
    return Ciphertext(value=a.value * b.value % pk.n_sq, key_id=pk.fingerprint)


def scalar_mul(pk: PaillierPublicKey, c: Ciphertext, a: int) -> Ciphertext:
    """Plaintext-scalar multiplication: Dec(c^a mod n^2) = a * Dec(c) mod n.

    Negative exponents go through the modular inverse of ``c``.
    """
    if c.key_id != pk.fingerprint:
        raise KeyMismatchError("ciphertext was produced under a different public key")
    return Ciphertext(value=power(pk, c.value, a), key_id=pk.fingerprint)


def power(pk: PaillierPublicKey, value: int, exponent: int) -> int:
    """Raw ``value^exponent mod n^2`` used by the tensor kernels."""
    if exponent < 0:
        try:
            value = int(gmpy2.invert(value, pk.n_sq))
        except ZeroDivisionError as exc:
            raise MalformedCiphertextError("ciphertext is not invertible mod n^2") from exc
        exponent = -exponent
    return int(gmpy2.powmod(value, exponent, pk.n_sq))


def rerandomize(
    pk: PaillierPublicKey, c: Ciphertext, rng: random.Random | None = None
) -> Ciphertext:
    """Multiply by a fresh r'^n; the plaintext is unchanged."""
    if c.key_id != pk.fingerprint:
        raise KeyMismatchError("ciphertext was produced under a different public key")
    return Ciphertext(value=c.value * obfuscator(pk, rng) % pk.n_sq, key_id=pk.fingerprint)


# Key files


def _to_hex(value: int) -> str:
    return format(value, "x")


def _from_hex(document: dict[str, Any], name: str) -> int:
    try:
        return int(document[name], 16)
    except (KeyError, TypeError, ValueError) as exc:
        raise KeyFileError(f"key file field {name!r} is missing or not hexadecimal") from exc


def _write_document(path: Path, document: dict[str, Any]) -> None:
    try:
        path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise KeyFileError(f"cannot write key file {path}: {exc}") from exc


def _read_document(path: Path) -> dict[str, Any]:
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise KeyFileError(f"cannot read key file {path}: {exc}") from exc
    if document.get("version") != KEY_FILE_VERSION:
        raise KeyFileError(f"unsupported key file version {document.get('version')!r}")
    return document


def save_public_key(pk: PaillierPublicKey, path: str | Path) -> None:
    _write_document(
        Path(path), {"version": KEY_FILE_VERSION, "n": _to_hex(pk.n), "g": _to_hex(pk.g)}
    )


def save_private_key(sk: PaillierPrivateKey, path: str | Path) -> None:
    pk = sk.public_key
    _write_document(
        Path(path),
        {
            "version": KEY_FILE_VERSION,
            "n": _to_hex(pk.n),
            "g": _to_hex(pk.g),
            "lambda": _to_hex(sk.lam),
            "mu": _to_hex(sk.mu),
            "p": _to_hex(sk.p),
            "q": _to_hex(sk.q),
        },
    )


def load_public_key(path: str | Path) -> PaillierPublicKey:
    document = _read_document(Path(path))
    return PaillierPublicKey(n=_from_hex(document, "n"), g=_from_hex(document, "g"))


def load_private_key(path: str | Path) -> PaillierPrivateKey:
    document = _read_document(Path(path))
    pk = PaillierPublicKey(n=_from_hex(document, "n"), g=_from_hex(document, "g"))
    return PaillierPrivateKey(
        public_key=pk,
        lam=_from_hex(document, "lambda"),
        mu=_from_hex(document, "mu"),
        p=_from_hex(document, "p"),
        q=_from_hex(document, "q"),
    )
