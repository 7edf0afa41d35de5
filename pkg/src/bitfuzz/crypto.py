"""Surrogate bitstream cryptography.

Stand-ins for the vendor primitives that keep the properties the attacks rely
on: an XOR-malleable counter-mode keystream, a keyed GF(2^32) checksum over
every 7 payload words, and textbook RSA over a 256-bit digest. None of this is
meant to be secure or compatible with real AES/GCM/SHA-3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

GF_POLY_LOW = 0x8D  # x^32 + x^7 + x^3 + x^2 + 1

H_COUNTER = 0xFFFFFFFE
BLOCK_MASK_BIT = 0x80000000
BLOCK_PAYLOAD = 7
BLOCK_WORDS = 8

KEY_BYTES = 32
IV_WORDS = 4


class ConfigurationError(ValueError):
    pass


def _fnv1a(h: int, data: bytes) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def _splitmix_upper(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK64
    z ^= z >> 31
    return z >> 32


def iv_bytes(iv) -> bytes:
    """IVs are given as four words or as 16 raw bytes."""
    if isinstance(iv, (bytes, bytearray)):
        if len(iv) != 16:
            raise ValueError("IV must be 16 bytes")
        return bytes(iv)
    iv = tuple(iv)
    if len(iv) != IV_WORDS:
        raise ValueError("IV must be exactly 4 words")
    return struct.pack(">4I", *iv)


def _check_key(key: bytes) -> bytes:
    if len(key) != KEY_BYTES:
        raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(key)}")
    return bytes(key)


@lru_cache(maxsize=64)
def _prefix_state(key: bytes, iv: bytes) -> int:
    return _fnv1a(FNV_OFFSET, key + iv)


def keystream_word(key: bytes, iv, counter: int) -> int:
    seed = _fnv1a(_prefix_state(_check_key(key), iv_bytes(iv)), counter.to_bytes(8, "big"))
    return _splitmix_upper(seed)


def encrypt_ctr(key: bytes, iv, words, start: int = 0) -> list[int]:
    ks = keystream(key, iv)
    return [w ^ ks.word(start + i) for i, w in enumerate(words)]


decrypt_ctr = encrypt_ctr


class Keystream:
    """Memoised keystream words for one (key, IV) pair."""

    def __init__(self, key: bytes, iv):
        self.key = _check_key(key)
        self.iv = iv_bytes(iv)
        self._prefix = _prefix_state(self.key, self.iv)
        self._words: list[int] = []
        self._masks: dict[int, int] = {}

    @cached_property
    def h(self) -> int:
        return self._at(H_COUNTER) | 1

    @cached_property
    def mul_h(self):
        # table build is costly; plain keystream users never need it
        return gf_multiplier(self.h)

    def _at(self, counter: int) -> int:
        return _splitmix_upper(_fnv1a(self._prefix, counter.to_bytes(8, "big")))

    def word(self, i: int) -> int:
        words = self._words
        if i >= len(words):
            words.extend(self._at(c) for c in range(len(words), i + 1))
        return words[i]

    def block_mask(self, block_index: int) -> int:
        m = self._masks.get(block_index)
        if m is None:
            m = self._masks[block_index] = self._at(BLOCK_MASK_BIT | block_index)
        return m

    def checksum(self, block_index: int, payload7) -> int:
        mul = self.mul_h
        acc = 0
        for w in payload7:
            acc = mul(acc ^ w)
        return acc ^ self.block_mask(block_index)


def keystream(key: bytes, iv) -> Keystream:
    return _keystream(bytes(key), iv_bytes(iv))


@lru_cache(maxsize=32)
def _keystream(key: bytes, iv: bytes) -> Keystream:
    return Keystream(key, iv)


def derive_h(key: bytes, iv) -> int:
    return keystream_word(key, iv, H_COUNTER) | 1


# --- GF(2^32) --------------------------------------------------------------------


def gf_mul(a: int, b: int) -> int:
    """Carry-less product of a and b reduced mod x^32 + x^7 + x^3 + x^2 + 1."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a >> 32:
            a = (a ^ GF_POLY_LOW) & MASK32
    return r


@lru_cache(maxsize=64)
def gf_multiplier(h: int):
    """Byte-table multiplier x -> gf_mul(x, h) for a fixed h."""
    tables = [[gf_mul(b << (8 * k), h) for b in range(256)] for k in range(4)]
    t0, t1, t2, t3 = tables

    def mul(x: int) -> int:
        return t0[x & 0xFF] ^ t1[(x >> 8) & 0xFF] ^ t2[(x >> 16) & 0xFF] ^ t3[x >> 24]

    return mul


def block_checksum(h: int, key: bytes, iv, block_index: int, payload7) -> int:
    payload7 = list(payload7)
    if len(payload7) != BLOCK_PAYLOAD:
        raise ValueError(f"a checksum block carries exactly {BLOCK_PAYLOAD} words")
    acc = 0
    for w in payload7:
        acc = gf_mul(acc ^ w, h)
    return acc ^ keystream_word(key, iv, BLOCK_MASK_BIT | block_index)


def seal_blocks(key: bytes, iv, payload) -> list[int]:
    """Pad payload to 7-word groups, append a checksum to each, encrypt all."""
    from .bitstream import NOP_WORD

    payload = list(payload)
    if len(payload) % BLOCK_PAYLOAD:
        payload.extend([NOP_WORD] * (BLOCK_PAYLOAD - len(payload) % BLOCK_PAYLOAD))
    ks = keystream(key, iv)
    plain: list[int] = []
    for b in range(len(payload) // BLOCK_PAYLOAD):
        chunk = payload[b * BLOCK_PAYLOAD : (b + 1) * BLOCK_PAYLOAD]
        plain.extend(chunk)
        plain.append(ks.checksum(b, chunk))
    return [w ^ ks.word(i) for i, w in enumerate(plain)]


def open_blocks(key: bytes, iv, ciphertext) -> tuple[list[int], int | None]:
    """Decrypt and verify. Returns (payload words, index of first bad block or None)."""
    ks = keystream(key, iv)
    payload: list[int] = []
    bad = None
    for b in range(len(ciphertext) // BLOCK_WORDS):
        words = [ciphertext[b * 8 + j] ^ ks.word(b * 8 + j) for j in range(BLOCK_WORDS)]
        if bad is None and ks.checksum(b, words[:7]) != words[7]:
            bad = b
        payload.extend(words[:7])
    return payload, bad


# --- digest ----------------------------------------------------------------------


def digest256(words) -> int:
    """Four FNV-1a-64 lanes over the big-endian bytes of every word."""
    data = struct.pack(f">{len(words)}I", *words) if len(words) else b""
    out = 0
    for lane in range(4):
        out = (out << 64) | _fnv1a(FNV_OFFSET ^ lane, data)
    return out


# --- RSA --------------------------------------------------------------------------

MIN_MODULUS = 1 << 255


@dataclass(frozen=True)
class RsaKeypair:
    n: int
    e: int = 65537
    d: int | None = None

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    def public(self) -> "RsaKeypair":
        return RsaKeypair(self.n, self.e)


def _check_modulus(n: int) -> None:
    if n < MIN_MODULUS:
        raise ConfigurationError("RSA modulus must be at least 2^255 so a digest survives reduction")


def rsa_sign(keypair: RsaKeypair, digest: int) -> int:
    _check_modulus(keypair.n)
    if keypair.d is None:
        raise ConfigurationError("signing requires a private exponent")
    return pow(digest % keypair.n, keypair.d, keypair.n)


def rsa_verify(e: int, n: int, signature: int, digest: int) -> bool:
    _check_modulus(n)
    if not 0 <= signature < n:
        return False
    return pow(signature, e, n) == digest % n


def pubkey_words(e: int, n: int, modulus_bits: int) -> list[int]:
    """e as one word followed by n as big-endian words."""
    if e >> 32:
        raise ConfigurationError("public exponent must fit in one word")
    return [e, *int_to_words(n, modulus_bits // 32)]


def pubkey_digest(e: int, n: int, modulus_bits: int | None = None) -> int:
    bits = modulus_bits or ((n.bit_length() + 31) // 32) * 32
    return digest256(pubkey_words(e, n, bits))


def int_to_words(value: int, count: int) -> list[int]:
    if value >> (32 * count):
        raise ConfigurationError(f"value does not fit in {count} words")
    return [(value >> (32 * (count - 1 - i))) & MASK32 for i in range(count)]


def words_to_int(words) -> int:
    v = 0
    for w in words:
        v = (v << 32) | w
    return v


# --- key fixture files --------------------------------------------------------------


def read_key_file(path) -> dict[str, int]:
    """Plain ``name=hex`` lines; ``#`` starts a comment."""
    fields: dict[str, int] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {raw!r}")
        fields[name.strip().lower()] = int(value.strip(), 16)
    return fields


def write_key_file(path, **fields: int) -> None:
    lines = [f"{name}={value:x}" for name, value in fields.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_aes_key(path) -> bytes:
    fields = read_key_file(path)
    if "key" not in fields:
        raise ValueError(f"{path}: no key= field")
    return fields["key"].to_bytes(KEY_BYTES, "big")


def load_rsa_key(path) -> RsaKeypair:
    fields = read_key_file(path)
    try:
        return RsaKeypair(n=fields["n"], e=fields.get("e", 65537), d=fields.get("d"))
    except KeyError:
        raise ValueError(f"{path}: RSA key file needs n=") from None
