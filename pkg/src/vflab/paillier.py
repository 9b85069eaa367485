"""Additively homomorphic encryption of fixed-point reals (Paillier, g = n+1).

Plaintexts are reals scaled by 2**scale_bits and reduced mod n; values in the
upper half of Z_n decode as negatives.  The product of two ciphertexts mod n^2
decrypts to the sum of the plaintexts, which is all the tree protocol needs.
Key sizes: 512 bits for tests, 2048 by default at runtime.
"""
from __future__ import annotations

import secrets
from dataclasses import dataclass

import gmpy2

SUPPORTED_BITS = (512, 1024, 2048)
DEFAULT_BITS = 2048
DEFAULT_SCALE_BITS = 40


class PaillierError(ValueError):
    """Key, range, or scale misuse."""


class PlaintextOverflowError(PaillierError):
    """Plaintext too large for the fixed-point range of the key."""


class PaillierPublicKey:
    """Public half of a key pair: modulus n and generator g = n + 1."""

    __slots__ = ("n", "g", "nsquare", "bit_length", "_half_n")

    def __init__(self, n: int, bit_length: int):
        self.n = gmpy2.mpz(n)
        self.g = self.n + 1
        self.nsquare = self.n * self.n
        self.bit_length = bit_length
        self._half_n = self.n // 2

    def __eq__(self, other):
        return isinstance(other, PaillierPublicKey) and self.n == other.n

    def __hash__(self):
        return hash(int(self.n) & 0xFFFFFFFF)

    def max_plaintext(self, scale_bits: int = DEFAULT_SCALE_BITS) -> float:
        """Largest |m| that encrypt() accepts at the given scale."""
        return float(self.n >> (scale_bits + 1))

    def encode(self, value: float, scale_bits: int = DEFAULT_SCALE_BITS) -> int:
        scaled = gmpy2.mpz(round(value * (1 << scale_bits)))
        if abs(scaled) >= self._half_n:
            raise PlaintextOverflowError(
                f"plaintext {value} overflows fixed-point range at scale 2^{scale_bits}"
            )
        return int(scaled % self.n)

    def decode(self, plaintext: int, scale_bits: int = DEFAULT_SCALE_BITS) -> float:
        v = gmpy2.mpz(plaintext)
        if v >= self._half_n:
            v -= self.n
        return float(v) / (1 << scale_bits)

    def raw_encrypt(self, plaintext: int, randomize: bool = True) -> int:
        # g = n+1 makes g^m = 1 + m*n (mod n^2), so no exponentiation needed
        # for the message part; the cost is the obfuscator r^n.
        c = (1 + gmpy2.mpz(plaintext) * self.n) % self.nsquare
        if randomize:
            r = gmpy2.mpz(secrets.randbelow(int(self.n) - 1) + 1)
            c = (c * gmpy2.powmod(r, self.n, self.nsquare)) % self.nsquare
        return int(c)

    def encrypt(self, value: float, scale_bits: int = DEFAULT_SCALE_BITS) -> "Ciphertext":
        return Ciphertext(self.raw_encrypt(self.encode(value, scale_bits)), scale_bits, self)

    def encrypt_zero(self, scale_bits: int = DEFAULT_SCALE_BITS) -> "Ciphertext":
        """Multiplicative identity: an (unrandomized) encryption of zero."""
        return Ciphertext(1, scale_bits, self)


class PaillierPrivateKey:
    """Private half: the prime factors, with CRT decryption."""

    __slots__ = ("public", "p", "q", "_p2", "_q2", "_hp", "_hq", "_q_inv_p")

    def __init__(self, public: PaillierPublicKey, p: int, q: int):
        self.public = public
        self.p = gmpy2.mpz(p)
        self.q = gmpy2.mpz(q)
        if self.p * self.q != public.n:
            raise PaillierError("private factors do not match the public modulus")
        self._p2 = self.p * self.p
        self._q2 = self.q * self.q
        # h_p = L_p(g^(p-1) mod p^2)^-1 mod p, with L_p(x) = (x-1)/p.
        self._hp = gmpy2.invert(
            self._l_func(gmpy2.powmod(public.g, self.p - 1, self._p2), self.p), self.p
        )
        self._hq = gmpy2.invert(
            self._l_func(gmpy2.powmod(public.g, self.q - 1, self._q2), self.q), self.q
        )
        self._q_inv_p = gmpy2.invert(self.q, self.p)

    @staticmethod
    def _l_func(x, n):
        return (x - 1) // n

    def raw_decrypt(self, ciphertext: int) -> int:
        c = gmpy2.mpz(ciphertext)
        mp = (
            self._l_func(gmpy2.powmod(c, self.p - 1, self._p2), self.p) * self._hp
        ) % self.p
        mq = (
            self._l_func(gmpy2.powmod(c, self.q - 1, self._q2), self.q) * self._hq
        ) % self.q
        # CRT recombination
        u = ((mp - mq) * self._q_inv_p) % self.p
        return int(mq + u * self.q)

    def decrypt(self, ct: "Ciphertext") -> float:
        if ct.public != self.public:
            raise PaillierError("ciphertext was produced under a different key pair")
        return self.public.decode(self.raw_decrypt(ct.value), ct.scale_bits)


@dataclass(frozen=True)
class PaillierKeys:
    public: PaillierPublicKey
    private: PaillierPrivateKey
    bit_length: int


class Ciphertext:
    """An encrypted fixed-point number tagged with its scale."""

    __slots__ = ("value", "scale_bits", "public")

    def __init__(self, value: int, scale_bits: int, public: PaillierPublicKey):
        self.value = int(value)
        self.scale_bits = scale_bits
        self.public = public

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        return add(self, other)

    def __mul__(self, scalar: int) -> "Ciphertext":
        return mul_plain(self, scalar)

    def to_bytes(self) -> bytes:
        """Big-endian ciphertext value prefixed by a one-byte scale tag."""
        width = (2 * self.public.bit_length + 7) // 8
        return bytes([self.scale_bits]) + self.value.to_bytes(width, "big")

    @classmethod
    def from_bytes(cls, data: bytes, public: PaillierPublicKey) -> "Ciphertext":
        return cls(int.from_bytes(data[1:], "big"), data[0], public)


def _prime_near(rng, bits: int):
    candidate = gmpy2.mpz(rng()) | (1 << (bits - 1)) | 1
    return gmpy2.next_prime(candidate)


def keygen(bit_length: int = DEFAULT_BITS, seed: int | None = None) -> PaillierKeys:
    """Generate a key pair; deterministic when a seed is given (test mode)."""
    if bit_length not in SUPPORTED_BITS:
        raise PaillierError(
            f"unsupported key size {bit_length}; expected one of {SUPPORTED_BITS}"
        )
    if seed is None:
        rng = lambda: secrets.randbits(bit_length // 2)
    else:
        state = gmpy2.random_state(seed)
        rng = lambda: gmpy2.mpz_urandomb(state, bit_length // 2)
    while True:
        p = _prime_near(rng, bit_length // 2)
        q = _prime_near(rng, bit_length // 2)
        n = p * q
        if p != q and n.bit_length() == bit_length:
            break
    public = PaillierPublicKey(int(n), bit_length)
    return PaillierKeys(public, PaillierPrivateKey(public, int(p), int(q)), bit_length)


def add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Homomorphic addition: decrypts to the sum of the two plaintexts."""
    if c1.public != c2.public:
        raise PaillierError("cannot combine ciphertexts from different keys")
    if c1.scale_bits != c2.scale_bits:
        raise PaillierError(
            f"scale mismatch: 2^{c1.scale_bits} vs 2^{c2.scale_bits}"
        )
    return Ciphertext(
        int(gmpy2.mpz(c1.value) * c2.value % c1.public.nsquare), c1.scale_bits, c1.public
    )


def mul_plain(ct: Ciphertext, scalar: int) -> Ciphertext:
    """Multiply the plaintext by an integer scalar (ciphertext exponentiation)."""
    if not isinstance(scalar, (int,)) or isinstance(scalar, bool):
        raise PaillierError("scalar multiplication requires a plain integer")
    exponent = gmpy2.mpz(scalar) % ct.public.n
    return Ciphertext(
        int(gmpy2.powmod(ct.value, exponent, ct.public.nsquare)), ct.scale_bits, ct.public
    )


def sum_encrypted(cts, public: PaillierPublicKey, scale_bits: int = DEFAULT_SCALE_BITS) -> Ciphertext:
    """Sum a sequence of ciphertexts; an empty sequence yields E(0)."""
    acc = gmpy2.mpz(1)
    nsquare = public.nsquare
    scale = None
    for ct in cts:
        if ct.public != public:
            raise PaillierError("cannot combine ciphertexts from different keys")
        if scale is None:
            scale = ct.scale_bits
        elif ct.scale_bits != scale:
            raise PaillierError(f"scale mismatch: 2^{scale} vs 2^{ct.scale_bits}")
        acc = acc * ct.value % nsquare
    return Ciphertext(int(acc), scale if scale is not None else scale_bits, public)
