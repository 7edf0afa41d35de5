import pytest
from hypothesis import given, settings, strategies as st

from bitfuzz.bitstream import (
    NOP_WORD,
    SYNC_WORD,
    TYPE1_RESERVED_MASK,
    Command,
    Opcode,
    PacketHeader,
    Reg,
    TruncatedPacket,
    UnknownHeaderKind,
    bytes_to_words,
    command_packet,
    crc_feed,
    crc_feed_words,
    decode_header,
    disassemble,
    encode_type1_header,
    encode_type2_header,
    hex_to_words,
    parse,
    parse_reg,
    read_bitstream,
    serialize,
    words_to_bytes,
    words_to_hex,
    write_bitstream,
    write_packet,
)
from oracles import config_crc, crc32c_bitwise, crc_pair_bytes, split_bits, type1_bits, type2_bits

word = st.integers(0, 0xFFFFFFFF)


def test_header_constants_match_bit_layout():
    assert encode_type1_header(Opcode.WRITE, Reg.CMD, 1) == type1_bits(2, 4, 1) == 0x30008001
    assert encode_type2_header(Opcode.WRITE, 12345) == type2_bits(2, 12345)
    assert type1_bits(0, 0, 0) == NOP_WORD
    assert TYPE1_RESERVED_MASK == type1_bits(0, 0, 0, 0x1FF, 0x3) ^ NOP_WORD


def test_listing_rdw_go_packet():
    # CMD write of RDW_GO, as it appears in a raw dump
    assert command_packet(Command.RDW_GO) == [0x30008001, 0x00000016]
    assert words_to_bytes([0x16]) == b"\x00\x00\x00\x16"


@settings(max_examples=10_000)
@given(st.integers(0, 3), st.integers(0, 31), st.integers(0, 0x7FF))
def test_type1_roundtrip(opcode, reg, count):
    w = encode_type1_header(opcode, reg, count)
    assert w == type1_bits(opcode, reg, count)
    h = decode_header(w)
    assert (h.kind, h.opcode, h.reg_addr, h.word_count, h.reserved_bits) == (1, opcode, reg, count, 0)
    assert h.encode() == w


@settings(max_examples=10_000)
@given(st.integers(0, 3), st.integers(0, 0x7FFFFFF))
def test_type2_roundtrip(opcode, count):
    w = encode_type2_header(opcode, count)
    assert w == type2_bits(opcode, count)
    h = decode_header(w)
    assert (h.kind, h.opcode, h.word_count) == (2, opcode, count)
    assert h.encode() == w


@settings(max_examples=2000)
@given(word)
def test_decode_any_type1_word_preserves_bits(w):
    w = (w & 0x1FFFFFFF) | (1 << 29)
    h = decode_header(w)
    ref = split_bits(w)
    assert h.reg_addr == ref["reg"] and h.word_count == ref["count1"] and h.opcode == ref["opcode"]
    assert h.encode() == w


@pytest.mark.parametrize("kind", [0, 3, 4, 5, 6, 7])
def test_unknown_kind(kind):
    with pytest.raises(UnknownHeaderKind) as exc:
        decode_header(kind << 29)
    assert exc.value.kind == kind


@pytest.mark.parametrize("args", [(4, 0, 0), (0, 32, 0), (0, 0, 0x800), (-1, 0, 0)])
def test_type1_range_checks(args):
    with pytest.raises(ValueError):
        encode_type1_header(*args)


def test_type2_range_check():
    with pytest.raises(ValueError):
        encode_type2_header(2, 1 << 27)


def test_parse_reg_names():
    assert parse_reg("wbstar") == 16
    assert parse_reg("R25") == 25
    assert parse_reg(7) == 7
    with pytest.raises(ValueError):
        parse_reg(32)


# --- parsing -------------------------------------------------------------------------------------


def _image():
    return [0xFFFFFFFF] * 4 + [SYNC_WORD, NOP_WORD, *write_packet(Reg.FAR, 0), *command_packet(Command.WCFG),
                               encode_type1_header(Opcode.WRITE, Reg.FDRI, 0), encode_type2_header(Opcode.WRITE, 3),
                               1, 2, 3, encode_type1_header(Opcode.READ, Reg.STAT, 1), 0xC0000000]


def test_parse_and_serialize():
    img = _image()
    p = parse(img)
    assert p.synced and p.blob == [0xFFFFFFFF] * 4
    assert [pk.index for pk in p.packets] == [5, 6, 8, 10, 11, 15, 16]
    assert p.packets[4].payload == (1, 2, 3)
    assert p.packets[-1].header is None
    assert serialize(p) == img


def test_parse_without_sync_is_blob():
    p = parse([1, 2, 3])
    assert not p.synced and p.blob == [1, 2, 3] and not p.packets
    assert disassemble([1, 2, 3]) == ["@0 BLOB 3 words : 0000 0001 0000 0002 0000 0003"]


def test_truncated_packet():
    with pytest.raises(TruncatedPacket) as exc:
        parse([SYNC_WORD, *write_packet(Reg.CMD, 1)[:1]])
    assert exc.value.index == 1
    lines = disassemble([SYNC_WORD, encode_type1_header(2, 4, 2), 5])
    assert lines[-1].startswith("@1 TRUNCATED 2 words")


@settings(max_examples=500)
@given(st.lists(word, max_size=40))
def test_parse_roundtrip_random(tail):
    img = [SYNC_WORD] + tail
    try:
        p = parse(img)
    except TruncatedPacket:
        return
    assert serialize(p) == img


def test_disassembly_format():
    lines = disassemble(_image())
    assert lines[0].startswith("@0 BLOB 4 words")
    assert lines[1] == "@4 SYNC aa99 5566"
    assert lines[2] == "@5 TYPE1 NOP"
    assert lines[3] == "@6 TYPE1 WRITE reg=FAR count=1 : 0000 0000"
    assert lines[4] == "@8 TYPE1 WRITE reg=CMD count=1 : 0000 0001"
    assert lines[6] == "@11 TYPE2 WRITE count=3 : 0000 0001 0000 0002 0000 0003"
    assert lines[7] == "@15 TYPE1 READ reg=STAT count=1"
    assert lines[8] == "@16 UNKNOWN kind=110 : c000 0000"


def test_reserved_bits_shown():
    w = encode_type1_header(2, 4, 0) | (1 << 20)
    assert "reserved=00100000" in disassemble([SYNC_WORD, w])[1]


# --- byte order and files ---------------------------------------------------------------------


def test_big_endian_io(tmp_path):
    words = [0x00000016, 0xAA995566, 0xDEADC0DE]
    assert words_to_bytes(words) == bytes.fromhex("00000016aa995566deadc0de")
    assert hex_to_words(words_to_hex(words)) == words
    p = tmp_path / "x.bin"
    write_bitstream(p, words)
    assert read_bitstream(p) == words
    with pytest.raises(ValueError):
        bytes_to_words(b"\x00\x01\x02")


# --- CRC -------------------------------------------------------------------------------------------


def test_crc32c_check_value():
    import crc32c

    assert crc32c_bitwise(b"123456789") == 0xE3069283
    assert crc32c.crc32c(b"123456789") == 0xE3069283


def test_pair_packing():
    assert crc_pair_bytes(4, 0x16) == bytes.fromhex("20000000b0")
    assert crc_feed(0, 4, 0x16) == crc32c_bitwise(bytes.fromhex("20000000b0"))


FROZEN_CRC = 0xFBC7AB1D  # oracle output for the pairs below


def test_crc_golden():
    pairs = [(4, 0x16), (5, 0x501), (2, 0xDEADC0DE)]
    assert config_crc(pairs) == FROZEN_CRC
    acc = 0
    for r, w in pairs:
        acc = crc_feed(acc, r, w)
    assert acc == FROZEN_CRC


@settings(max_examples=300)
@given(st.integers(0, 31), st.lists(word, max_size=30), st.integers(0, 0xFFFFFFFF))
def test_crc_batch_equals_single(reg, words, seed):
    acc = seed
    for w in words:
        acc = crc_feed(acc, reg, w)
    assert crc_feed_words(seed, reg, words) == acc


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 31), word), max_size=20))
def test_crc_matches_bitwise_oracle(pairs):
    acc = 0
    for r, w in pairs:
        acc = crc_feed(acc, r, w)
    assert acc == config_crc(pairs)


def test_crc_covers_address():
    assert crc_feed(0, 4, 1) != crc_feed(0, 5, 1)


def test_packet_header_encode_type2():
    assert PacketHeader(kind=2, opcode=2, word_count=7).encode() == type2_bits(2, 7)
