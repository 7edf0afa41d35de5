"""Configuration words, packet headers, stream parsing and the running CRC.

Bitstreams are plain sequences of 32-bit words. On disk and on the wire they
are stored big-endian with no container.
"""

from __future__ import annotations

import sys
from array import array
from dataclasses import dataclass, field
from enum import IntEnum

import crc32c
import numpy as np

SYNC_WORD = 0xAA995566
DUMMY_WORD = 0xFFFFFFFF
NOP_WORD = 0x20000000
WORD_MASK = 0xFFFFFFFF

TYPE1 = 0b001
TYPE2 = 0b010

# Type 1: kind[31:29] opcode[28:27] address[26:13] reserved[12:11] count[10:0]
# Only address bits [17:13] select a register; [26:18] are reserved.
TYPE1_RESERVED_MASK = 0x07FC1800
TYPE1_MAX_COUNT = 0x7FF
TYPE2_MAX_COUNT = 0x7FFFFFF


class Opcode(IntEnum):
    NOP = 0
    READ = 1
    WRITE = 2
    RESERVED = 3


class Reg(IntEnum):
    CRC = 0
    FAR = 1
    FDRI = 2
    FDRO = 3
    CMD = 4
    CTL0 = 5
    MASK = 6
    STAT = 7
    LOUT = 8
    COR0 = 9
    MFWR = 10
    GCM_IV = 11
    IDCODE = 12
    AXSS = 13
    COR1 = 14
    WBSTAR = 16
    TIMER = 17
    UNKNOWN_20 = 20
    BOOTSTS = 22
    UNKNOWN_23 = 23
    CTL1 = 24
    RSA_DATA_IN = 26
    UNKNOWN_29 = 29
    BSPI = 31


class Command(IntEnum):
    NULL = 0x00
    WCFG = 0x01
    DGHIGH = 0x03
    START = 0x05
    GRESTORE = 0x0A
    DESYNC = 0x0D
    RDW_GO = 0x16


def reg_name(addr: int) -> str:
    try:
        return Reg(addr).name
    except ValueError:
        return f"R{addr}"


def parse_reg(value: int | str) -> int:
    """Accept a register number or a name such as ``"WBSTAR"`` / ``"R25"``."""
    if isinstance(value, int):
        addr = value
    elif value.upper() in Reg.__members__:
        addr = Reg[value.upper()]
    elif value.upper().startswith("R") and value[1:].isdigit():
        addr = int(value[1:])
    else:
        addr = int(value, 0)
    if not 0 <= addr <= 31:
        raise ValueError(f"register address out of range: {value!r}")
    return int(addr)


class UnknownHeaderKind(ValueError):
    def __init__(self, kind: int, word: int):
        super().__init__(f"unknown header kind {kind:03b} in word {word:08x}")
        self.kind = kind
        self.word = word


class TruncatedPacket(ValueError):
    def __init__(self, index: int, partial: "ParsedBitstream | None" = None):
        super().__init__(f"packet at word {index} is missing payload words")
        self.index = index
        self.partial = partial


@dataclass(frozen=True)
class PacketHeader:
    kind: int
    opcode: int
    word_count: int
    reg_addr: int | None = None
    reserved_bits: int = 0

    def encode(self) -> int:
        if self.kind == TYPE1:
            return (
                (TYPE1 << 29)
                | (self.opcode << 27)
                | (self.reg_addr << 13)
                | self.reserved_bits
                | self.word_count
            )
        if self.kind == TYPE2:
            return (TYPE2 << 29) | (self.opcode << 27) | self.word_count
        raise UnknownHeaderKind(self.kind, 0)


def _check(name: str, value: int, hi: int) -> None:
    if not isinstance(value, int) or not 0 <= value <= hi:
        raise ValueError(f"{name}={value!r} outside 0..{hi}")


def encode_type1_header(opcode: int, reg_addr: int, word_count: int) -> int:
    _check("opcode", opcode, 3)
    _check("reg_addr", reg_addr, 31)
    _check("word_count", word_count, TYPE1_MAX_COUNT)
    return (TYPE1 << 29) | (opcode << 27) | (reg_addr << 13) | word_count


def encode_type2_header(opcode: int, word_count: int) -> int:
    _check("opcode", opcode, 3)
    _check("word_count", word_count, TYPE2_MAX_COUNT)
    return (TYPE2 << 29) | (opcode << 27) | word_count


def decode_header(word: int) -> PacketHeader:
    kind = word >> 29
    opcode = (word >> 27) & 3
    if kind == TYPE1:
        return PacketHeader(
            kind=TYPE1,
            opcode=opcode,
            reg_addr=(word >> 13) & 0x1F,
            word_count=word & TYPE1_MAX_COUNT,
            reserved_bits=word & TYPE1_RESERVED_MASK,
        )
    if kind == TYPE2:
        return PacketHeader(kind=TYPE2, opcode=opcode, word_count=word & TYPE2_MAX_COUNT)
    raise UnknownHeaderKind(kind, word)


def write_packet(reg: int, *values: int) -> list[int]:
    return [encode_type1_header(Opcode.WRITE, reg, len(values)), *values]


def command_packet(cmd: int) -> list[int]:
    return write_packet(Reg.CMD, cmd)


# --- parsing ---------------------------------------------------------------


@dataclass(frozen=True)
class Packet:
    index: int
    header: PacketHeader | None  # None: word whose kind is neither Type 1 nor Type 2
    payload: tuple[int, ...] = ()
    raw: int = 0

    @property
    def words(self) -> list[int]:
        return [self.raw, *self.payload]


@dataclass
class ParsedBitstream:
    blob: list[int] = field(default_factory=list)
    synced: bool = False
    packets: list[Packet] = field(default_factory=list)

    def serialize(self) -> list[int]:
        out = list(self.blob)
        if self.synced:
            out.append(SYNC_WORD)
        for p in self.packets:
            out.extend(p.words)
        return out


def parse(words: list[int]) -> ParsedBitstream:
    """Split an image into the pre-sync blob and the packet stream.

    Only WRITE packets carry payload words in the input stream; READ and NOP
    headers stand alone.
    """
    try:
        sync = words.index(SYNC_WORD)
    except ValueError:
        return ParsedBitstream(blob=list(words))
    result = ParsedBitstream(blob=list(words[:sync]), synced=True)
    i = sync + 1
    n = len(words)
    while i < n:
        w = words[i]
        try:
            hdr = decode_header(w)
        except UnknownHeaderKind:
            result.packets.append(Packet(i, None, (), w))
            i += 1
            continue
        count = hdr.word_count if hdr.opcode == Opcode.WRITE else 0
        if i + 1 + count > n:
            raise TruncatedPacket(i, result)
        result.packets.append(Packet(i, hdr, tuple(words[i + 1 : i + 1 + count]), w))
        i += 1 + count
    return result


def serialize(parsed: ParsedBitstream) -> list[int]:
    return parsed.serialize()


# --- disassembly -------------------------------------------------------------


def _hexword(w: int) -> str:
    return f"{w >> 16:04x} {w & 0xFFFF:04x}"


def _payload_text(payload: tuple[int, ...] | list[int], limit: int = 8) -> str:
    shown = " ".join(_hexword(w) for w in payload[:limit])
    if len(payload) > limit:
        shown += f" ... (+{len(payload) - limit} words)"
    return shown


def format_packet(p: Packet) -> str:
    if p.header is None:
        return f"@{p.index} UNKNOWN kind={p.raw >> 29:03b} : {_hexword(p.raw)}"
    h = p.header
    op = Opcode(h.opcode).name
    if h.kind == TYPE1 and h.opcode == Opcode.NOP and not (h.reg_addr or h.word_count or h.reserved_bits):
        line = f"@{p.index} TYPE1 NOP"
    elif h.kind == TYPE1:
        line = f"@{p.index} TYPE1 {op} reg={reg_name(h.reg_addr)} count={h.word_count}"
        if h.reserved_bits:
            line += f" reserved={h.reserved_bits:08x}"
    else:
        line = f"@{p.index} TYPE2 {op} count={h.word_count}"
    if p.payload:
        line += " : " + _payload_text(p.payload)
    return line


def disassemble(words: list[int]) -> list[str]:
    """Text listing, one packet per line."""
    lines: list[str] = []
    try:
        parsed = parse(words)
        tail_at = None
    except TruncatedPacket as exc:
        parsed = exc.partial
        tail_at = exc.index
    if parsed.blob:
        lines.append(f"@0 BLOB {len(parsed.blob)} words : {_payload_text(parsed.blob)}")
    if parsed.synced:
        lines.append(f"@{len(parsed.blob)} SYNC {_hexword(SYNC_WORD)}")
    lines.extend(format_packet(p) for p in parsed.packets)
    if tail_at is not None:
        rest = words[tail_at:]
        lines.append(f"@{tail_at} TRUNCATED {len(rest)} words : {_payload_text(rest)}")
    return lines


# --- file I/O ------------------------------------------------------------------


def words_to_bytes(words) -> bytes:
    a = array("I", words)
    if sys.byteorder == "little":
        a.byteswap()
    return a.tobytes()


def bytes_to_words(data: bytes) -> list[int]:
    if len(data) % 4:
        raise ValueError(f"bitstream length {len(data)} is not a multiple of 4 bytes")
    a = array("I")
    a.frombytes(data)
    if sys.byteorder == "little":
        a.byteswap()
    return a.tolist()


def words_to_hex(words) -> str:
    return words_to_bytes(words).hex()


def hex_to_words(text: str) -> list[int]:
    return bytes_to_words(bytes.fromhex("".join(text.split())))


def read_bitstream(path) -> list[int]:
    with open(path, "rb") as f:
        return bytes_to_words(f.read())


def write_bitstream(path, words) -> None:
    with open(path, "wb") as f:
        f.write(words_to_bytes(words))


# --- running CRC -----------------------------------------------------------------
# Each (register, data word) pair is the 37-bit value addr<<32 | word, placed in
# 5 bytes big-endian with the 3 padding bits at the low end, then fed to CRC-32C.


def _pair_bytes(reg_addr: int, word: int) -> bytes:
    return ((((reg_addr & 0x1F) << 32) | word) << 3).to_bytes(5, "big")


def crc_feed(acc: int, reg_addr: int, word: int) -> int:
    return crc32c.crc32c(_pair_bytes(reg_addr, word), acc)


def crc_feed_words(acc: int, reg_addr: int, words) -> int:
    if len(words) < 8:
        for w in words:
            acc = crc32c.crc32c(_pair_bytes(reg_addr, w), acc)
        return acc
    v = (np.asarray(words, dtype=np.uint64) << np.uint64(3)) | np.uint64((reg_addr & 0x1F) << 35)
    raw = v.astype(">u8").view(np.uint8).reshape(-1, 8)[:, 3:]
    return crc32c.crc32c(raw.tobytes(), acc)


def crc_value(acc: int) -> int:
    return acc & WORD_MASK


CRC_INITIAL = 0
