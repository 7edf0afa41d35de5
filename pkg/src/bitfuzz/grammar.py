"""Declarative bitstream templates and exhaustive mask enumeration.

A FuzzRequest is an ordered tree of nodes. Every BitstreamWord and every
FuzzedFileOverlay is a slot with a fixed number of values; the case space is
the mixed-radix product of all slots in depth-first order, last slot fastest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from . import crypto
from .bitstream import (
    NOP_WORD,
    SYNC_WORD,
    TYPE1,
    TYPE2,
    Command,
    Opcode,
    Reg,
    bytes_to_words,
    command_packet,
    encode_type1_header,
    encode_type2_header,
    parse_reg,
    read_bitstream,
    reg_name,
    write_packet,
)
from .device import DeviceModel, resolve_ref

MAX_CASES = 1 << 63

CTL0_DEC = 1 << 6


class TemplateError(ValueError):
    """Malformed template file; ``path`` names the offending node."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class LayoutError(ValueError):
    pass


class CapacityError(OverflowError):
    pass


# --- nodes ------------------------------------------------------------------------


@dataclass
class Static:
    value: bytes
    name: str = ""


@dataclass
class NOP:
    count: int = 1
    name: str = ""


@dataclass
class Type1WritePacket:
    register: int
    count: int = 1
    name: str = ""


@dataclass
class Type1ReadPacket:
    register: int
    count: int = 1
    name: str = ""


@dataclass
class BitstreamWord:
    static_bits: int = 0
    fuzzing_mask: int = 0
    name: str = ""


@dataclass
class SyncWord:
    name: str = ""


@dataclass
class AutoCrcPacket:
    name: str = ""


@dataclass
class FabricData:
    """Frames of a repeated fill word. frames=None means the device default
    (test-mode frame count inside a test-mode RSA block, all frames elsewhere).
    With write=True an FDRI write header is emitted first."""

    fill: int = 0xDEADC0DE
    frames: int | None = None
    write: bool = False
    name: str = ""


@dataclass
class EncryptedGcmBlock:
    children: list = field(default_factory=list)
    key_ref: str = ""
    iv: tuple = (0, 0, 0, 0)
    name: str = ""


@dataclass
class PlaintextRSABlock:
    children: list = field(default_factory=list)
    rsa_key_ref: str = ""
    signing_key_ref: str | None = None
    test_mode: bool = False
    rdw_go: bool = True
    children_contain_header_and_footer: bool = False
    iv: tuple = (0, 0, 0, 0)
    name: str = ""


@dataclass(frozen=True)
class FuzzPosition:
    index_start: int
    word_count: int


@dataclass
class FuzzedFileOverlay:
    base_words: tuple
    fuzzing_mask: int
    position: FuzzPosition
    file: str | None = None
    name: str = ""


Node = Union[
    Static, NOP, Type1WritePacket, Type1ReadPacket, BitstreamWord, SyncWord, AutoCrcPacket,
    FabricData, EncryptedGcmBlock, PlaintextRSABlock, FuzzedFileOverlay,
]
CONTAINERS = (EncryptedGcmBlock, PlaintextRSABlock)


@dataclass
class FuzzRequest:
    name: str
    children: list
    base_dir: Path | None = field(default=None, compare=False)


def check_node(node, path: str = "") -> None:
    """Validate the static invariants of one node (and its subtree)."""
    if isinstance(node, BitstreamWord):
        if not 0 <= node.static_bits <= 0xFFFFFFFF or not 0 <= node.fuzzing_mask <= 0xFFFFFFFF:
            raise TemplateError("word fields must fit in 32 bits", path)
        if node.static_bits & node.fuzzing_mask:
            raise TemplateError(
                f"static_bits {node.static_bits:08x} overlap fuzzing_mask {node.fuzzing_mask:08x}", path
            )
    elif isinstance(node, Static):
        if len(node.value) % 4:
            raise TemplateError(f"Static value of {len(node.value)} bytes is not word aligned", path)
    elif isinstance(node, NOP):
        if node.count < 0:
            raise TemplateError("NOP count must be non-negative", path)
    elif isinstance(node, (Type1WritePacket, Type1ReadPacket)):
        if not 0 <= node.register <= 31 or not 0 <= node.count <= 0x7FF:
            raise TemplateError("register or count out of range", path)
    elif isinstance(node, FuzzedFileOverlay):
        pos = node.position
        if pos.index_start < 0 or pos.word_count <= 0:
            raise TemplateError("overlay position must be non-empty", path)
        if pos.index_start + pos.word_count > len(node.base_words):
            raise TemplateError(
                f"overlay window {pos.index_start}+{pos.word_count} exceeds {len(node.base_words)} base words",
                path,
            )
    elif isinstance(node, EncryptedGcmBlock):
        if len(node.iv) != 4:
            raise TemplateError("IV must be exactly 4 words", path)
    elif isinstance(node, PlaintextRSABlock):
        if len(node.iv) != 4:
            raise TemplateError("IV must be exactly 4 words", path)
    if isinstance(node, CONTAINERS):
        for i, child in enumerate(node.children):
            check_node(child, f"{path}/{i}")


# --- mask injection ------------------------------------------------------------------


def mask_bits(mask: int) -> list[int]:
    return [b for b in range(32) if mask >> b & 1]


def inject(counter: int, mask: int) -> int:
    """Deposit the counter bits into the set bits of mask, lowest first."""
    bits = mask_bits(mask)
    if not 0 <= counter < (1 << len(bits)):
        raise ValueError(f"counter {counter} out of range for mask {mask:08x}")
    out = 0
    for i, b in enumerate(bits):
        if counter >> i & 1:
            out |= 1 << b
    return out


class _Injector:
    """Table-driven inject() for one fixed mask."""

    def __init__(self, mask: int):
        bits = mask_bits(mask)
        self.mask = mask
        self.width = len(bits)
        self.tables = []
        for lo in range(0, len(bits), 8):
            chunk = bits[lo : lo + 8]
            table = []
            for v in range(1 << len(chunk)):
                w = 0
                for i, b in enumerate(chunk):
                    if v >> i & 1:
                        w |= 1 << b
                table.append(w)
            self.tables.append(table)

    def __call__(self, counter: int) -> int:
        out = 0
        for t in self.tables:
            out |= t[counter & 0xFF]
            counter >>= 8
        return out


# --- enumeration ---------------------------------------------------------------------


def _slot_radix(node) -> int:
    if isinstance(node, BitstreamWord):
        return 1 << bin(node.fuzzing_mask).count("1")
    return node.position.word_count << bin(node.fuzzing_mask).count("1")


def iter_slots(nodes):
    for node in nodes:
        if isinstance(node, (BitstreamWord, FuzzedFileOverlay)):
            yield node
        elif isinstance(node, CONTAINERS):
            yield from iter_slots(node.children)


def case_count(request: FuzzRequest) -> int:
    total = 1
    for node in iter_slots(request.children):
        total *= _slot_radix(node)
        if total > MAX_CASES:
            raise CapacityError(f"request {request.name!r} exceeds 2^63 cases")
    return total


def _has(nodes, kind) -> bool:
    for node in nodes:
        if isinstance(node, kind):
            return True
        if isinstance(node, CONTAINERS) and _has(node.children, kind):
            return True
    return False


# --- rendering ---------------------------------------------------------------------


class _CrcMark:
    """Placeholder for the value word of an AutoCrcPacket."""

    __slots__ = ()


CRC_MARK = _CrcMark()


@dataclass(eq=False)
class _EncSegment:
    key: bytes
    iv: tuple
    inner: list
    sealed: list | None = None


def encryption_prefix(iv) -> list[int]:
    return [
        *write_packet(Reg.MASK, CTL0_DEC),
        *write_packet(Reg.CTL0, CTL0_DEC),
        *write_packet(Reg.GCM_IV, *iv),
    ]


def default_rsa_header() -> list[int]:
    return [*write_packet(Reg.FAR, 0), *command_packet(Command.WCFG)]


def default_rsa_footer() -> list[int]:
    return [
        *command_packet(Command.GRESTORE),
        *command_packet(Command.DGHIGH),
        *command_packet(Command.START),
        *command_packet(Command.DESYNC),
    ]


def rsa_prefix_words(model: DeviceModel) -> int:
    """Words before the signed payload: e, n, padding, signature, IV, DLC."""
    k = model.rsa_key_words
    return 1 + k + 8 + k + 4 + 1


RSA_PADDING_WORDS = 8
DLC_TEST_MODE = 1 << 31


def fill_crc_marks(tokens: list) -> list:
    """Resolve AutoCrc placeholders by replaying the write stream the engine will see."""
    from .bitstream import crc_feed

    out = list(tokens)
    acc = 0
    synced = False
    reg = 0
    remaining = 0
    last_t1 = None  # register of the previous Type 1 header if its count was zero
    for i, t in enumerate(out):
        if t is CRC_MARK:
            if reg != Reg.CRC or not remaining:
                raise LayoutError("AutoCrcPacket value is not inside a CRC write")
            out[i] = acc
            acc = 0
            remaining -= 1
            continue
        if not synced:
            synced = t == SYNC_WORD
            continue
        if remaining:
            acc = 0 if reg == Reg.CRC else crc_feed(acc, reg, t)
            remaining -= 1
            continue
        kind = t >> 29
        opcode = (t >> 27) & 3
        if kind == TYPE1:
            count = t & 0x7FF
            if opcode == Opcode.WRITE:
                reg = (t >> 13) & 0x1F
                remaining = count
            last_t1 = (t >> 13) & 0x1F if count == 0 else None
        elif kind == TYPE2 and last_t1 is not None:
            if opcode == Opcode.WRITE:
                reg = last_t1
                remaining = t & 0x7FFFFFF
            last_t1 = None
        else:
            last_t1 = None
    return out


class Renderer:
    """Renders concrete cases of one request for one device model."""

    def __init__(self, request: FuzzRequest, device: DeviceModel | None = None):
        for i, child in enumerate(request.children):
            check_node(child, f"{request.name}/{i}")
        self.request = request
        self.device = device or DeviceModel()
        self.slots = list(iter_slots(request.children))
        self.radix = [_slot_radix(s) for s in self.slots]
        self.count = case_count(request)
        self._slot_of = {id(s): i for i, s in enumerate(self.slots)}
        self._injectors = {id(s): _Injector(s.fuzzing_mask) for s in self.slots}
        self._const: dict[int, list] = {}
        self._slot_free: dict[int, bool] = {}
        self._keys: dict[str, object] = {}
        self.has_crc = _has(request.children, AutoCrcPacket)
        self.has_enc = _has(request.children, EncryptedGcmBlock)

    # -- helpers --

    def digits(self, index: int) -> list[int]:
        if not 0 <= index < self.count:
            raise IndexError(f"case {index} outside 0..{self.count - 1}")
        out = [0] * len(self.radix)
        for s in range(len(self.radix) - 1, -1, -1):
            index, out[s] = divmod(index, self.radix[s])
        return out

    def _key(self, ref: str, loader):
        if ref not in self._keys:
            if not ref:
                raise crypto.ConfigurationError("missing key reference")
            self._keys[ref] = loader(resolve_ref(ref, self.request.base_dir))
        return self._keys[ref]

    def _is_slot_free(self, node) -> bool:
        nid = id(node)
        if nid not in self._slot_free:
            self._slot_free[nid] = not isinstance(node, (BitstreamWord, FuzzedFileOverlay)) and not (
                isinstance(node, CONTAINERS) and any(True for _ in iter_slots(node.children))
            )
        return self._slot_free[nid]

    # -- rendering --

    def render(self, index: int) -> list[int]:
        digits = self.digits(index)
        tokens: list = []
        for child in self.request.children:
            self._emit(child, digits, tokens)
        if self.has_crc:
            tokens = self._expand_enc_inline(tokens)
        if self.has_enc:
            tokens = self._seal(tokens)
        return tokens

    def _expand_enc_inline(self, tokens: list) -> list:
        # CRC tracking runs over the plaintext, so walk into segments in order, fill, rebuild
        flat: list = []

        def walk(items):
            for t in items:
                if isinstance(t, _EncSegment):
                    walk(t.inner)
                else:
                    flat.append(t)

        walk(tokens)
        filled = iter(fill_crc_marks(flat))

        def rebuild(items):
            out = []
            for t in items:
                if isinstance(t, _EncSegment):
                    out.append(_EncSegment(t.key, t.iv, rebuild(t.inner)))
                else:
                    out.append(next(filled))
            return out

        return rebuild(tokens)

    def _seal(self, tokens: list) -> list[int]:
        out: list[int] = []
        for t in tokens:
            if isinstance(t, _EncSegment):
                if t.sealed is None:
                    inner = self._seal(t.inner)
                    t.sealed = crypto.seal_blocks(t.key, t.iv, inner)
                out.extend(t.sealed)
            else:
                out.append(t)
        return out

    def _emit(self, node, digits, out: list) -> None:
        nid = id(node)
        cached = self._const.get(nid)
        if cached is not None:
            out.extend(cached)
            return
        if self._is_slot_free(node) and not isinstance(node, (Static, NOP, SyncWord, Type1WritePacket)):
            tmp: list = []
            self._emit_uncached(node, digits, tmp)
            self._const[nid] = tmp
            out.extend(tmp)
            return
        self._emit_uncached(node, digits, out)

    def _emit_uncached(self, node, digits, out: list) -> None:
        if isinstance(node, Static):
            out.extend(bytes_to_words(node.value))
        elif isinstance(node, NOP):
            out.extend([NOP_WORD] * node.count)
        elif isinstance(node, SyncWord):
            out.append(SYNC_WORD)
        elif isinstance(node, Type1WritePacket):
            out.append(encode_type1_header(Opcode.WRITE, node.register, node.count))
        elif isinstance(node, Type1ReadPacket):
            out.append(encode_type1_header(Opcode.READ, node.register, node.count))
        elif isinstance(node, BitstreamWord):
            out.append(node.static_bits | self._injectors[id(node)](digits[self._slot_of[id(node)]]))
        elif isinstance(node, AutoCrcPacket):
            out.append(encode_type1_header(Opcode.WRITE, Reg.CRC, 1))
            out.append(CRC_MARK)
        elif isinstance(node, FabricData):
            self._emit_fabric(node, None, out)
        elif isinstance(node, FuzzedFileOverlay):
            d = digits[self._slot_of[id(node)]]
            inj = self._injectors[id(node)]
            pos, counter = divmod(d, 1 << inj.width)
            words = list(node.base_words)
            p = node.position.index_start + pos
            words[p] = (words[p] & ~node.fuzzing_mask & 0xFFFFFFFF) | inj(counter)
            out.extend(words)
        elif isinstance(node, EncryptedGcmBlock):
            key = self._key(node.key_ref, crypto.load_aes_key)
            inner: list = []
            for child in node.children:
                self._emit(child, digits, inner)
            out.extend(encryption_prefix(node.iv))
            out.append(_EncSegment(key, tuple(node.iv), inner))
        elif isinstance(node, PlaintextRSABlock):
            self._emit_rsa(node, digits, out)
        else:
            raise TemplateError(f"unknown node type {type(node).__name__}")

    def _emit_fabric(self, node: FabricData, test_mode: bool | None, out: list) -> None:
        dev = self.device
        if node.frames is not None:
            frames = node.frames
        elif test_mode:
            frames = dev.test_mode_frames + 1
        else:
            frames = dev.frames
        n = frames * dev.frame_length
        if node.write:
            if n <= 0x7FF:
                out.append(encode_type1_header(Opcode.WRITE, Reg.FDRI, n))
            else:
                out.append(encode_type1_header(Opcode.WRITE, Reg.FDRI, 0))
                out.append(encode_type2_header(Opcode.WRITE, n))
        out.extend([node.fill] * n)

    def _plain(self, nodes, digits, what: str, test_mode: bool) -> list[int]:
        out: list = []
        for child in nodes:
            if isinstance(child, FabricData):
                self._emit_fabric(child, test_mode, out)
            else:
                self._emit(child, digits, out)
        if any(not isinstance(t, int) for t in out):
            raise LayoutError(f"{what} of an RSA block must be plain words (no CRC or encrypted nodes)")
        return out

    def _emit_rsa(self, node: PlaintextRSABlock, digits, out: list) -> None:
        dev = self.device
        if node.children_contain_header_and_footer:
            idx = [i for i, c in enumerate(node.children) if isinstance(c, FabricData)]
            if len(idx) != 1:
                raise LayoutError("an RSA block with header and footer needs exactly one FabricData child")
            i = idx[0]
            header = self._plain(node.children[:i], digits, "header", node.test_mode)
            fabric = self._plain(node.children[i : i + 1], digits, "fabric", node.test_mode)
            footer = self._plain(node.children[i + 1 :], digits, "footer", node.test_mode)
        else:
            header, footer = default_rsa_header(), default_rsa_footer()
            children = node.children or [FabricData()]
            fabric = self._plain(children, digits, "fabric", node.test_mode)
        hw, tw = dev.rsa_header_words, dev.rsa_footer_words
        if len(header) > hw:
            raise LayoutError(f"RSA header is {len(header)} words, fixed length is {hw}")
        if len(footer) > tw:
            raise LayoutError(f"RSA footer is {len(footer)} words, fixed length is {tw}")
        header = header + [NOP_WORD] * (hw - len(header))
        footer = footer + [NOP_WORD] * (tw - len(footer))
        if node.test_mode:
            if len(fabric) != dev.test_mode_fabric_words:
                raise LayoutError(
                    f"test mode expects {dev.test_mode_fabric_words} fabric words, got {len(fabric)}"
                )
        elif not fabric or len(fabric) % dev.frame_length or len(fabric) > dev.fabric_words:
            raise LayoutError(f"fabric payload of {len(fabric)} words is not a whole number of frames")

        if not node.signing_key_ref:
            raise crypto.ConfigurationError("PlaintextRSABlock has no signing key")
        pub = self._key(node.rsa_key_ref, crypto.load_rsa_key)
        signer = self._key(node.signing_key_ref, crypto.load_rsa_key)
        if signer.d is None:
            raise crypto.ConfigurationError(f"{node.signing_key_ref} holds no private exponent")
        dlc = (DLC_TEST_MODE if node.test_mode else 0) | (hw + len(fabric) + tw)
        signed = [*node.iv, dlc, *header, *fabric, *footer]
        signature = crypto.rsa_sign(signer, crypto.digest256(signed))
        k = dev.rsa_key_words
        block = [
            *crypto.pubkey_words(pub.e, pub.n, dev.rsa_modulus_bits),
            *[0] * RSA_PADDING_WORDS,
            *crypto.int_to_words(signature, k),
            *signed,
        ]
        out.append(encode_type1_header(Opcode.WRITE, Reg.RSA_DATA_IN, 0))
        out.append(encode_type2_header(Opcode.WRITE, len(block)))
        out.extend(block)
        if node.rdw_go:
            out.extend(command_packet(Command.RDW_GO))


def render(request: FuzzRequest, case_index: int, device: DeviceModel | None = None) -> list[int]:
    return Renderer(request, device).render(case_index)


# --- template files --------------------------------------------------------------------


def _hexword(w: int) -> str:
    return f"{w:08x}"


def _parse_word(value, path: str) -> int:
    if isinstance(value, bool):
        raise TemplateError(f"expected a hex word, got {value!r}", path)
    if isinstance(value, int):
        w = value
    else:
        try:
            s = str(value).replace(" ", "").lower()
            w = int(s, 16)
        except ValueError:
            raise TemplateError(f"bad hex word {value!r}", path) from None
    if not 0 <= w <= 0xFFFFFFFF:
        raise TemplateError(f"word {value!r} does not fit in 32 bits", path)
    return w


def _parse_reg_field(value, path: str) -> int:
    try:
        return parse_reg(value)
    except (ValueError, TypeError):
        raise TemplateError(f"bad register {value!r}", path) from None


_KINDS = {
    "Static", "NOP", "Type1WritePacket", "Type1ReadPacket", "BitstreamWord", "SyncWord",
    "AutoCrcPacket", "FabricData", "EncryptedGcmBlock", "PlaintextRSABlock", "FuzzedFileOverlay",
}
_ALIASES = {"PlaintextRSABlockUltraScale": "PlaintextRSABlock", "FuzzedBitstream": "FuzzedFileOverlay"}

_FIELDS = {
    "Static": {"value"},
    "NOP": {"count"},
    "Type1WritePacket": {"register", "count"},
    "Type1ReadPacket": {"register", "count"},
    "BitstreamWord": {"static_bits", "fuzzing_mask"},
    "SyncWord": set(),
    "AutoCrcPacket": set(),
    "FabricData": {"fill", "frames", "write"},
    "EncryptedGcmBlock": {"children", "key", "iv"},
    "PlaintextRSABlock": {"children", "rsa_key", "signing_key", "test_mode", "rdw_go",
                          "children_contain_header_and_footer", "iv"},
    "FuzzedFileOverlay": {"file", "base_words", "fuzzing_mask", "position"},
}


def node_from_dict(d: dict, path: str, base_dir: Path | None):
    if not isinstance(d, dict) or "kind" not in d:
        raise TemplateError("node must be an object with a 'kind'", path)
    kind = _ALIASES.get(d["kind"], d["kind"])
    if kind not in _KINDS:
        raise TemplateError(f"unknown node kind {d['kind']!r}", path)
    extra = set(d) - _FIELDS[kind] - {"kind", "name"}
    if extra:
        raise TemplateError(f"unknown fields for {kind}: {sorted(extra)}", path)
    name = d.get("name", "")
    path = f"{path}({name})" if name else path

    def children():
        kids = d.get("children", [])
        if not isinstance(kids, list):
            raise TemplateError("children must be a list", path)
        return [node_from_dict(c, f"{path}/{i}", base_dir) for i, c in enumerate(kids)]

    def iv():
        raw = d.get("iv", ["0"] * 4)
        if not isinstance(raw, list) or len(raw) != 4:
            raise TemplateError("iv must be a list of 4 hex words", path)
        return tuple(_parse_word(w, path) for w in raw)

    try:
        if kind == "Static":
            try:
                value = bytes.fromhex(str(d["value"]).replace(" ", ""))
            except ValueError:
                raise TemplateError(f"bad hex value {d['value']!r}", path) from None
            node = Static(value, name)
        elif kind == "NOP":
            node = NOP(int(d.get("count", 1)), name)
        elif kind == "Type1WritePacket":
            node = Type1WritePacket(_parse_reg_field(d["register"], path), int(d.get("count", 1)), name)
        elif kind == "Type1ReadPacket":
            node = Type1ReadPacket(_parse_reg_field(d["register"], path), int(d.get("count", 1)), name)
        elif kind == "BitstreamWord":
            node = BitstreamWord(
                _parse_word(d.get("static_bits", 0), path), _parse_word(d.get("fuzzing_mask", 0), path), name
            )
        elif kind == "SyncWord":
            node = SyncWord(name)
        elif kind == "AutoCrcPacket":
            node = AutoCrcPacket(name)
        elif kind == "FabricData":
            frames = d.get("frames")
            node = FabricData(
                _parse_word(d.get("fill", "deadc0de"), path),
                None if frames is None else int(frames),
                bool(d.get("write", False)),
                name,
            )
        elif kind == "EncryptedGcmBlock":
            node = EncryptedGcmBlock(children(), str(d.get("key", "")), iv(), name)
        elif kind == "PlaintextRSABlock":
            node = PlaintextRSABlock(
                children(),
                str(d.get("rsa_key", "")),
                d.get("signing_key"),
                bool(d.get("test_mode", False)),
                bool(d.get("rdw_go", True)),
                bool(d.get("children_contain_header_and_footer", False)),
                iv(),
                name,
            )
        else:
            pos = d.get("position")
            if not isinstance(pos, dict):
                raise TemplateError("overlay needs a position object", path)
            file_ref = d.get("file")
            if file_ref:
                try:
                    base = tuple(read_bitstream(resolve_ref(file_ref, base_dir)))
                except OSError as exc:
                    raise TemplateError(f"cannot read overlay file: {exc}", path) from None
            else:
                base = tuple(_parse_word(w, path) for w in d.get("base_words", []))
            node = FuzzedFileOverlay(
                base,
                _parse_word(d["fuzzing_mask"], path),
                FuzzPosition(int(pos["index_start"]), int(pos["word_count"])),
                file_ref,
                name,
            )
    except KeyError as exc:
        raise TemplateError(f"missing field {exc.args[0]!r}", path) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, TemplateError):
            raise
        raise TemplateError(str(exc), path) from None
    check_node(node, path)
    return node


def node_to_dict(node) -> dict:
    d: dict = {"kind": type(node).__name__}
    if node.name:
        d["name"] = node.name
    if isinstance(node, Static):
        d["value"] = node.value.hex()
    elif isinstance(node, NOP):
        d["count"] = node.count
    elif isinstance(node, (Type1WritePacket, Type1ReadPacket)):
        d["register"] = reg_name(node.register)
        d["count"] = node.count
    elif isinstance(node, BitstreamWord):
        d["static_bits"] = _hexword(node.static_bits)
        d["fuzzing_mask"] = _hexword(node.fuzzing_mask)
    elif isinstance(node, FabricData):
        d["fill"] = _hexword(node.fill)
        d["frames"] = node.frames
        d["write"] = node.write
    elif isinstance(node, EncryptedGcmBlock):
        d["key"] = node.key_ref
        d["iv"] = [_hexword(w) for w in node.iv]
        d["children"] = [node_to_dict(c) for c in node.children]
    elif isinstance(node, PlaintextRSABlock):
        d["rsa_key"] = node.rsa_key_ref
        d["signing_key"] = node.signing_key_ref
        d["test_mode"] = node.test_mode
        d["rdw_go"] = node.rdw_go
        d["children_contain_header_and_footer"] = node.children_contain_header_and_footer
        d["iv"] = [_hexword(w) for w in node.iv]
        d["children"] = [node_to_dict(c) for c in node.children]
    elif isinstance(node, FuzzedFileOverlay):
        if node.file:
            d["file"] = node.file
        else:
            d["base_words"] = [_hexword(w) for w in node.base_words]
        d["fuzzing_mask"] = _hexword(node.fuzzing_mask)
        d["position"] = {"index_start": node.position.index_start, "word_count": node.position.word_count}
    return d


def request_from_dict(d: dict, base_dir: Path | None = None) -> FuzzRequest:
    if not isinstance(d, dict) or "children" not in d:
        raise TemplateError("template must be an object with 'children'")
    name = str(d.get("name", "request"))
    kids = d["children"]
    if not isinstance(kids, list):
        raise TemplateError("children must be a list", name)
    children = [node_from_dict(c, f"{name}/{i}", base_dir) for i, c in enumerate(kids)]
    return FuzzRequest(name, children, base_dir)


def request_to_dict(request: FuzzRequest) -> dict:
    return {"name": request.name, "children": [node_to_dict(c) for c in request.children]}


def load_template(path) -> FuzzRequest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TemplateError(f"{path}: {exc}") from None
    return request_from_dict(data, base_dir=path.parent)


def save_template(request: FuzzRequest, path) -> None:
    Path(path).write_text(json.dumps(request_to_dict(request), indent=2) + "\n")
