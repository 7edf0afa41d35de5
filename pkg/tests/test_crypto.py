import random

import pytest
from hypothesis import assume, given, settings, strategies as st

from bitfuzz import crypto
from bitfuzz.device import fixtures_dir
from oracles import checksum_ref, digest_ref, gf_mul_ref, ks_word, seal_ref

KEY = bytes(range(32))
IV = (0x0BADC0DE, 0x12345678, 0x9ABCDEF0, 0x0F1E2D3C)
word = st.integers(0, 0xFFFFFFFF)

# oracle outputs, frozen
FROZEN_KS = [0x67ADE5BB, 0xB900BA49, 0x1545CE54, 0x6E9244FB]
FROZEN_H = 0xB98A7BEF
FROZEN_GF = 0x717B52D0  # 0x12345678 * 0x9abcdef0
FROZEN_DIGEST_123 = 0xA79F98278DD69ED50BEC45EC517BF1A4C4E2281238B0B2F7C3B7C48311DAC046


def test_keystream_golden():
    assert [ks_word(KEY, IV, i) for i in range(4)] == FROZEN_KS
    ks = crypto.keystream(KEY, IV)
    assert [ks.word(i) for i in range(4)] == FROZEN_KS
    assert [crypto.keystream_word(KEY, IV, i) for i in range(4)] == FROZEN_KS
    assert ks.h == crypto.derive_h(KEY, IV) == FROZEN_H


def test_keystream_matches_oracle_far_counters():
    ks = crypto.keystream(KEY, IV)
    for c in (100, 1000, 5000):
        assert ks.word(c) == ks_word(KEY, IV, c)
    assert ks.block_mask(3) == ks_word(KEY, IV, 0x80000003)


def test_keystream_depends_on_key_and_iv():
    a = crypto.keystream_word(KEY, IV, 0)
    assert crypto.keystream_word(bytes(32), IV, 0) != a
    assert crypto.keystream_word(KEY, (0, 0, 0, 1), 0) != a


def test_key_and_iv_validation():
    with pytest.raises(ValueError):
        crypto.keystream(b"short", IV)
    with pytest.raises(ValueError):
        crypto.iv_bytes((1, 2, 3))


# --- GF(2^32) --------------------------------------------------------------------------------


def test_gf_golden():
    assert gf_mul_ref(0x12345678, 0x9ABCDEF0) == FROZEN_GF
    assert crypto.gf_mul(0x12345678, 0x9ABCDEF0) == FROZEN_GF
    # x^31 * x = x^32 = x^7 + x^3 + x^2 + 1
    assert crypto.gf_mul(1 << 31, 2) == 0x8D


@settings(max_examples=10_000)
@given(word, word)
def test_gf_commutative(a, b):
    assert crypto.gf_mul(a, b) == crypto.gf_mul(b, a)


@settings(max_examples=10_000)
@given(word, word, word)
def test_gf_associative(a, b, c):
    m = crypto.gf_mul
    assert m(m(a, b), c) == m(a, m(b, c))


@settings(max_examples=10_000)
@given(word, word, word)
def test_gf_distributive(a, b, c):
    m = crypto.gf_mul
    assert m(a, b ^ c) == m(a, b) ^ m(a, c)


@settings(max_examples=10_000)
@given(word)
def test_gf_identity_and_zero(a):
    assert crypto.gf_mul(a, 1) == a
    assert crypto.gf_mul(a, 0) == 0


@settings(max_examples=3000)
@given(word, word)
def test_gf_matches_long_division(a, b):
    assert crypto.gf_mul(a, b) == gf_mul_ref(a, b)


@settings(max_examples=1000)
@given(word, word)
def test_gf_table_multiplier(h, x):
    assert crypto.gf_multiplier(h)(x) == crypto.gf_mul(x, h)


# --- sealing and checksum ----------------------------------------------------------------------


def test_checksum_matches_oracle():
    ks = crypto.keystream(KEY, IV)
    payload = [0x30004117, 1, 2, 3, 4, 5, 6]
    assert ks.checksum(0, payload) == checksum_ref(KEY, IV, 0, payload)
    assert crypto.block_checksum(ks.h, KEY, IV, 0, payload) == checksum_ref(KEY, IV, 0, payload)
    with pytest.raises(ValueError):
        crypto.block_checksum(ks.h, KEY, IV, 0, payload[:6])


def test_seal_matches_oracle_and_opens():
    rng = random.Random(5)
    payload = [rng.getrandbits(32) for _ in range(21)]
    sealed = crypto.seal_blocks(KEY, IV, payload)
    assert sealed == seal_ref(KEY, IV, payload)
    assert len(sealed) == 24
    plain, bad = crypto.open_blocks(KEY, IV, sealed)
    assert plain == payload and bad is None


def test_seal_pads_with_nops():
    sealed = crypto.seal_blocks(KEY, IV, [1, 2, 3])
    plain, bad = crypto.open_blocks(KEY, IV, sealed)
    assert plain == [1, 2, 3] + [0x20000000] * 4 and bad is None


@pytest.mark.parametrize("bit", range(32))
def test_ctr_bitflip_locality(bit):
    """Flipping ciphertext bit i of word j flips exactly plaintext bit i of word j."""
    plain = [0xDEADC0DE] * 16
    ct = crypto.encrypt_ctr(KEY, IV, plain)
    for j in (0, 5, 15):
        mod = list(ct)
        mod[j] ^= 1 << bit
        out = crypto.decrypt_ctr(KEY, IV, mod)
        diff = [a ^ b for a, b in zip(out, plain)]
        assert diff == [(1 << bit) if k == j else 0 for k in range(16)]


def test_every_single_word_change_detected_at_its_block():
    rng = random.Random(11)
    payload = [rng.getrandbits(32) for _ in range(35)]
    sealed = crypto.seal_blocks(KEY, IV, payload)
    for pos in range(len(sealed)):
        mod = list(sealed)
        mod[pos] ^= 1 << rng.randrange(32)
        plain, bad = crypto.open_blocks(KEY, IV, mod)
        assert bad == pos // 8
        # earlier blocks still verify and decrypt
        assert plain[: 7 * (pos // 8)] == payload[: 7 * (pos // 8)]


# --- digest and RSA ---------------------------------------------------------------------------------


def test_digest_golden():
    assert digest_ref([1, 2, 3]) == FROZEN_DIGEST_123
    assert crypto.digest256([1, 2, 3]) == FROZEN_DIGEST_123
    assert crypto.digest256([]) == digest_ref([])


@settings(max_examples=300)
@given(st.lists(word, max_size=20))
def test_digest_matches_oracle(words):
    assert crypto.digest256(words) == digest_ref(words)


@pytest.fixture(scope="module")
def keys():
    d = fixtures_dir() / "keys"
    return crypto.load_rsa_key(d / "rsa_right.key"), crypto.load_rsa_key(d / "rsa_wrong.key")


def test_rsa_fixture_keys(keys):
    right, wrong = keys
    assert right.bits == wrong.bits == 512
    assert right.n != wrong.n and right.d and wrong.d
    assert pow(pow(12345, right.d, right.n), right.e, right.n) == 12345


@settings(max_examples=200, deadline=None)
@given(st.integers(0, (1 << 256) - 1))
def test_rsa_sign_verify(keys, digest):
    right, wrong = keys
    assume(digest > 1)  # 0 and 1 are fixed points of every exponent
    sig = crypto.rsa_sign(right, digest)
    assert crypto.rsa_verify(right.e, right.n, sig, digest)
    assert not crypto.rsa_verify(right.e, right.n, sig, digest ^ 1)
    assert not crypto.rsa_verify(wrong.e, wrong.n, sig % wrong.n, digest)


def test_rsa_edge_cases(keys):
    right, _ = keys
    assert not crypto.rsa_verify(right.e, right.n, right.n, 5)
    with pytest.raises(crypto.ConfigurationError):
        crypto.rsa_sign(right.public(), 5)
    with pytest.raises(crypto.ConfigurationError):
        crypto.rsa_verify(3, (1 << 200) + 1, 1, 1)


def test_word_int_conversion(keys):
    right, _ = keys
    words = crypto.int_to_words(right.n, 16)
    assert len(words) == 16 and crypto.words_to_int(words) == right.n
    with pytest.raises(crypto.ConfigurationError):
        crypto.int_to_words(1 << 64, 2)
    pw = crypto.pubkey_words(right.e, right.n, 512)
    assert pw[0] == 65537 and len(pw) == 17
    assert crypto.pubkey_digest(right.e, right.n, 512) == digest_ref(pw)


def test_key_files(tmp_path):
    p = tmp_path / "k.key"
    crypto.write_key_file(p, key=int.from_bytes(KEY, "big"))
    assert crypto.load_aes_key(p) == KEY
    (tmp_path / "bad.key").write_text("# nothing\nfoo\n")
    with pytest.raises(ValueError):
        crypto.read_key_file(tmp_path / "bad.key")
    (tmp_path / "e.key").write_text("e=3\n")
    with pytest.raises(ValueError):
        crypto.load_rsa_key(tmp_path / "e.key")
    with pytest.raises(ValueError):
        crypto.load_aes_key(tmp_path / "e.key")
