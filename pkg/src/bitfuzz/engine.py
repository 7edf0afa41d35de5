"""Register-level model of the configuration engine.

The engine consumes images word by word. Register writes take effect as soon
as their payload word arrives; there is no look-ahead. This matters for the
encrypted flow, where every decrypted word runs before its block checksum is
checked.
"""

from __future__ import annotations

import copy
from array import array
from enum import Enum
from functools import cached_property

from . import crypto
from .bitstream import (
    SYNC_WORD,
    Command,
    Reg,
    crc_feed_words,
)
from .device import DeviceConfig, KeyStore
from .grammar import DLC_TEST_MODE, RSA_PADDING_WORDS, rsa_prefix_words


class Lifecycle(Enum):
    AWAIT_SYNC = "await_sync"
    SYNCED = "synced"
    SOFT_CRASHED = "soft_crashed"
    HARD_CRASHED = "hard_crashed"


class Unresponsive(RuntimeError):
    """The device stopped answering (hard crash)."""


STICKY = frozenset({Reg.WBSTAR, Reg.TIMER, Reg.UNKNOWN_20, Reg.BSPI})
READ_ONLY = frozenset({Reg.STAT, Reg.BOOTSTS, Reg.FDRO, Reg.UNKNOWN_29})
KNOWN_COMMANDS = frozenset(int(c) for c in Command)

STAT_CRC_ERROR = 1 << 0
STAT_DONE_INTERNAL = 1 << 13
STAT_DONE_PIN = 1 << 14
STAT_SECURITY_ERROR = 1 << 16

BOOTSTS_VALID = 1 << 0
BOOTSTS_CRC_ERROR = 1 << 5
BOOTSTS_SECURITY_ERROR = 1 << 7

CTL0_DEC = 1 << 6
CTL0_FALLBACK_DISABLE = 1 << 10
CTL0_EFUSE_KEY = 1 << 31

REG23_PAD_PATTERN = 1 << 16
REG23_SYNC_IN_PIPELINE = 1 << 17
REG23_DUMP_A = 1 << 23
REG23_SOFT_CRASH = 1 << 24
REG23_DUMP_B = 1 << 25

DUMP_WORDS = 39
DUMP_FORCED_ONE = (1 << 31) | 1
DUMP_FORCED_ZERO = 1 << 21

# names shown next to register dumps
BIT_NAMES = {
    Reg.STAT: {
        0: "CRC_ERROR",
        13: "BIT13_DONE_INTERNAL_SIGNAL_STATUS",
        14: "BIT14_DONE_PIN",
        16: "SECURITY_ERROR",
    },
    Reg.BOOTSTS: {0: "BIT00_STATUS_VALID_0", 5: "CRC_ERROR_0", 7: "SECURITY_ERROR_0"},
    Reg.CTL0: {6: "DEC", 10: "CONFIG_FALLBACK_DISABLE", 31: "EFUSE_KEY"},
}


class RsaBlock:
    """One buffered RSA_DATA_IN block, split into its fields."""

    def __init__(self, words, key_words: int, header_words: int, footer_words: int):
        k = key_words
        self.words = tuple(words)
        w = self.words
        self.e = w[0]
        self.key_words = tuple(w[: 1 + k])
        self.n = crypto.words_to_int(w[1 : 1 + k])
        sig_at = 1 + k + RSA_PADDING_WORDS
        self.signature = crypto.words_to_int(w[sig_at : sig_at + k])
        signed_at = sig_at + k
        self.signed = w[signed_at:]
        self.iv = self.signed[:4]
        self.dlc = self.signed[4]
        body = self.signed[5:]
        self.header = body[:header_words]
        self.footer = body[len(body) - footer_words :]
        self.fabric = body[header_words : len(body) - footer_words]
        self.test_mode = bool(self.dlc & DLC_TEST_MODE)

    @cached_property
    def key_digest(self) -> int:
        return crypto.digest256(list(self.key_words))

    @cached_property
    def signature_ok(self) -> bool:
        try:
            return crypto.rsa_verify(self.e, self.n, self.signature, crypto.digest256(list(self.signed)))
        except crypto.ConfigurationError:
            return False

    def verify(self, fused_digest: int | None) -> bool:
        if fused_digest is not None and self.key_digest != fused_digest:
            return False
        return self.signature_ok


def _pad_bytes(value: int, width: int, size: int) -> bytes:
    return value.to_bytes(width, "big").ljust(size, b"\0")


class ConfigEngine:
    def __init__(self, config: DeviceConfig | None = None):
        self.config = config or DeviceConfig()
        self.model = self.config.model
        self.fuses = self.config.fuses
        self._initial_keys = self.config.keys.copy()
        self.keys: KeyStore = self._initial_keys.copy()
        self.regs = [0] * 32
        self.output: list[int] = []
        self._clear(keep_sticky=False)

    # --- state management --------------------------------------------------------

    def _clear(self, keep_sticky: bool) -> None:
        old = self.regs
        self.regs = [0] * 32
        if keep_sticky:
            for r in STICKY:
                self.regs[r] = old[r]
        self.fabric = array("I", bytes(4 * self.model.fabric_words))
        self._fabric_owned = True
        self.fabric_written = False
        self.lifecycle = Lifecycle.AWAIT_SYNC
        self.done = False
        self.dghigh_seen = False
        self.start_seen = False
        self.dirty_cmd = False
        self.crc_error = False
        self.security_error = False
        self.encrypted_session = False
        self.iv: list[int] = []
        self._fdri_ptr = 0
        self._crc_acc = 0
        self._crc_pending: list = []
        self.rsa: RsaBlock | None = None
        self._rsa_buf: list[int] = []
        self._rsa_total: int | None = None
        self._authenticated = False
        self._reset_packets()

    def _reset_packets(self) -> None:
        self._reg = 0
        self._remaining = 0
        self._last_t1: int | None = None
        self._enc = False
        self._enc_desync = False
        self._ks = None
        self._ctr = 0
        self._block: list[int] = []
        self._rsa_skip = 0

    def clone(self) -> "ConfigEngine":
        c = copy.copy(self)
        c.regs = self.regs[:]
        c.iv = self.iv[:]
        c.output = self.output[:]
        c._crc_pending = self._crc_pending[:]
        c._block = self._block[:]
        c._rsa_buf = self._rsa_buf[:]
        k = self.keys
        c.keys = KeyStore(k.bbram_key, k.efuse_key, k.bbram_delete_flag)
        # fabric is shared until either side writes to it
        self._fabric_owned = False
        c._fabric_owned = False
        return c

    def restore(self) -> None:
        """Back to the freshly powered, freshly provisioned device."""
        self.keys = self._initial_keys.copy()
        self.output = []
        self._clear(keep_sticky=False)

    def reset_jprogram(self) -> None:
        if self.lifecycle is Lifecycle.HARD_CRASHED:
            raise Unresponsive("device does not respond to JPROGRAM")
        self.output = []
        self._clear(keep_sticky=True)

    def power_cycle(self) -> None:
        if self.keys.bbram_delete_flag:
            self.keys.bbram_key = None
            self.keys.bbram_delete_flag = False
        self.output = []
        self._clear(keep_sticky=False)

    # --- reads ----------------------------------------------------------------------

    def read_register(self, addr: int) -> int:
        lc = self.lifecycle
        if lc is Lifecycle.HARD_CRASHED:
            raise Unresponsive("register read timed out")
        if lc is Lifecycle.SOFT_CRASHED:
            return 0
        if addr == Reg.FDRO:
            return self._fdro_word()
        if addr == Reg.UNKNOWN_29:
            return self.fuses.fuse_cntl
        return self.regs[addr]

    def read_all(self) -> list[int]:
        lc = self.lifecycle
        if lc is Lifecycle.HARD_CRASHED:
            raise Unresponsive("register read timed out")
        if lc is Lifecycle.SOFT_CRASHED:
            return [0] * 32
        out = self.regs[:]
        out[Reg.FDRO] = self._fdro_word()
        out[Reg.UNKNOWN_29] = self.fuses.fuse_cntl
        return out

    @property
    def soft_crashed(self) -> bool:
        return self.lifecycle is Lifecycle.SOFT_CRASHED

    @property
    def dec_enabled(self) -> bool:
        return bool(self.regs[Reg.CTL0] & CTL0_DEC)

    def _fdro_word(self) -> int:
        if self.encrypted_session:
            return 0
        return self.fabric[(self.regs[Reg.FAR] % self.model.frames) * self.model.frame_length]

    def readback_fdro(self, count: int) -> list[int]:
        """Requested fabric words, then the pipeline words, then one pad frame."""
        fl = self.model.frame_length
        total = count + self.model.pipeline_words + fl
        if self.encrypted_session:
            return [0] * total
        start = (self.regs[Reg.FAR] % self.model.frames) * fl
        data = self.fabric[start : start + count].tolist()
        data.extend([0] * (count - len(data)))
        pipe = [0] * self.model.pipeline_words
        r23 = self.regs[Reg.UNKNOWN_23]
        if r23 & REG23_SYNC_IN_PIPELINE:
            pipe[0] = SYNC_WORD
        if r23 & REG23_PAD_PATTERN:
            pad = [1 << (i % 32) for i in range(fl)]
        else:
            pad = [0] * fl
        return data + pipe + pad

    def hard_crash_dump(self, trigger_word: int) -> list[int]:
        key = _pad_bytes(self.model.device_seed, 8, crypto.KEY_BYTES)
        iv = _pad_bytes(trigger_word, 4, 16)
        ks = crypto.keystream(key, iv)
        return [(ks.word(i) | DUMP_FORCED_ONE) & ~DUMP_FORCED_ZERO for i in range(DUMP_WORDS)]

    # --- stream processing --------------------------------------------------------------

    def program(self, image, start: int = 0, stop: int | None = None) -> None:
        """Feed image[start:stop]. Output words (reads, dumps) collect in self.output."""
        if self.lifecycle is Lifecycle.HARD_CRASHED:
            raise Unresponsive("program timed out")
        if not isinstance(image, list):
            image = list(image)
        stop = len(image) if stop is None else stop
        i = start
        SYNCED, AWAIT = Lifecycle.SYNCED, Lifecycle.AWAIT_SYNC
        while i < stop:
            lc = self.lifecycle
            if lc is SYNCED:
                if self._enc:
                    i = self._feed_encrypted(image, i, stop)
                elif self._remaining:
                    i = self._feed_payload(image, i, stop)
                else:
                    self._header(image[i])
                    i += 1
            elif lc is AWAIT:
                try:
                    i = image.index(SYNC_WORD, i, stop) + 1
                except ValueError:
                    return
                self.lifecycle = SYNCED
            else:
                return

    def _step(self, w: int) -> None:
        if self._remaining:
            self._remaining -= 1
            self._write(self._reg, w)
        else:
            self._header(w)

    def _header(self, w: int) -> None:
        kind = w >> 29
        if kind == 1:
            opcode = (w >> 27) & 3
            if opcode == 3:
                self.lifecycle = Lifecycle.SOFT_CRASHED
                return
            reg = (w >> 13) & 0x1F
            count = w & 0x7FF
            self._last_t1 = reg if count == 0 else None
            if opcode == 2:
                self._reg = reg
                self._remaining = count
            elif opcode == 1:
                self._read(reg, count)
        elif kind == 2:
            reg = self._last_t1
            opcode = (w >> 27) & 3
            if reg is None or opcode == 3:
                self.lifecycle = Lifecycle.SOFT_CRASHED
                return
            self._last_t1 = None
            count = w & 0x7FFFFFF
            if opcode == 2:
                self._reg = reg
                self._remaining = count
            elif opcode == 1:
                self._read(reg, count)
        else:
            self._last_t1 = None

    def _read(self, reg: int, count: int) -> None:
        if reg == Reg.FDRO:
            self.output.extend(self.readback_fdro(count))
        else:
            self.output.extend([self.read_register(reg)] * count)

    def _feed_payload(self, image: list, i: int, stop: int) -> int:
        reg = self._reg
        n = min(self._remaining, stop - i)
        if reg == Reg.FDRI:
            if not self._fdri_allowed():
                self._remaining = 0
                self._failure(security=True)
                return i + 1
            self._remaining -= n
            words = image[i : i + n]
            self._crc_pending.append((reg, words))
            self._fdri_store(words)
            return i + n
        if reg == Reg.RSA_DATA_IN:
            return i + self._rsa_data(image, i, n)
        SYNCED = Lifecycle.SYNCED
        for j in range(i, i + n):
            self._remaining -= 1
            self._write(reg, image[j])
            if self.lifecycle is not SYNCED or self._enc:
                return j + 1
        return i + n

    def _feed_encrypted(self, image: list, i: int, stop: int) -> int:
        ks = self._ks
        SYNCED = Lifecycle.SYNCED
        while i < stop:
            j = self._ctr
            p = image[i] ^ ks.word(j)
            i += 1
            self._ctr = j + 1
            if j & 7 == 7:
                block = self._block
                self._block = []
                if ks.checksum(j >> 3, block) != p:
                    self._failure(security=True)
                    return i
                if self._enc_desync:
                    self._reset_packets()
                    self.lifecycle = Lifecycle.AWAIT_SYNC
                    return i
                continue
            self._block.append(p)
            if self._enc_desync:
                continue
            self._step(p)
            if self.lifecycle is not SYNCED or not self._enc:
                return i
        return i

    # --- register writes ----------------------------------------------------------------

    def _write(self, reg: int, w: int) -> None:
        if reg == Reg.CRC:
            self._check_crc(w)
            return
        self._crc_pending.append((reg, (w,)))
        if reg == Reg.CMD:
            self.regs[Reg.CMD] = w
            self._command(w)
        elif reg == Reg.CTL0:
            old = self.regs[Reg.CTL0]
            mask = self.regs[Reg.MASK]
            new = (old & ~mask) | (w & mask)
            if self.fabric_written:
                new = (new & ~CTL0_DEC) | (old & CTL0_DEC)
            self.regs[Reg.CTL0] = new & 0xFFFFFFFF
        elif reg == Reg.GCM_IV:
            self.regs[Reg.GCM_IV] = w
            self.iv.append(w)
            if len(self.iv) > 4:
                del self.iv[0]
            if len(self.iv) == 4 and self.dec_enabled and not self._enc:
                self._start_decryption()
        elif reg == Reg.FDRI:
            if not self._fdri_allowed():
                self._failure(security=True)
                return
            self._fdri_store((w,))
        elif reg == Reg.RSA_DATA_IN:
            self._remaining += 1
            consumed = self._rsa_data([w], 0, 1)
            assert consumed == 1
        elif reg == Reg.FAR:
            self.regs[Reg.FAR] = w
            self._fdri_ptr = (w % self.model.frames) * self.model.frame_length
        elif reg == Reg.UNKNOWN_23:
            self._write_reg23(w)
        elif reg in READ_ONLY:
            pass
        else:
            self.regs[reg] = w

    def _command(self, code: int) -> None:
        if code == Command.DGHIGH:
            self.dghigh_seen = True
        elif code == Command.START:
            self.start_seen = True
        elif code == Command.DESYNC:
            if self._enc:
                self._enc_desync = True
            else:
                self._reset_packets()
                self.lifecycle = Lifecycle.AWAIT_SYNC
        elif code == Command.RDW_GO:
            self._rdw_go()
        elif code not in KNOWN_COMMANDS:
            self.dirty_cmd = True
        self._update_done()

    def _update_done(self) -> None:
        if (
            not self.done
            and self.fabric_written
            and self.dghigh_seen
            and self.start_seen
            and not self.dirty_cmd
            and not self.crc_error
            and not self.security_error
        ):
            self.done = True
            self.regs[Reg.STAT] |= STAT_DONE_INTERNAL | STAT_DONE_PIN
            self.regs[Reg.BOOTSTS] |= BOOTSTS_VALID

    def _check_crc(self, w: int) -> None:
        acc = self._crc_acc
        for reg, words in self._crc_pending:
            acc = crc_feed_words(acc, reg, words)
        self._crc_pending = []
        self._crc_acc = 0
        if acc != w:
            self._failure(security=False)

    def _write_reg23(self, w: int) -> None:
        self.regs[Reg.UNKNOWN_23] = w
        if w & REG23_DUMP_A and w & REG23_DUMP_B:
            if self.keys.bbram_key is None:
                self.output.extend(self.hard_crash_dump(w))
                self.lifecycle = Lifecycle.HARD_CRASHED
                return
            self.keys.bbram_delete_flag = True
        if w & REG23_SOFT_CRASH:
            self.lifecycle = Lifecycle.SOFT_CRASHED

    # --- fabric, encryption, authentication ----------------------------------------------

    def _fdri_allowed(self) -> bool:
        if self._authenticated:
            return True
        if self.fuses.rsa_only:
            return False
        return self._enc or not self.fuses.aes_only

    def _fdri_store(self, words) -> None:
        if not self._fabric_owned:
            self.fabric = array("I", self.fabric)
            self._fabric_owned = True
        ptr = self._fdri_ptr
        room = len(self.fabric) - ptr
        if room > 0:
            chunk = words if len(words) <= room else words[:room]
            self.fabric[ptr : ptr + len(chunk)] = array("I", chunk)
        self._fdri_ptr = ptr + len(words)
        self.fabric_written = True

    def _start_decryption(self) -> None:
        key = self.keys.efuse_key if self.regs[Reg.CTL0] & CTL0_EFUSE_KEY else self.keys.bbram_key
        if key is None:
            self._failure(security=True)
            return
        self._ks = crypto.keystream(key, self.iv)
        self._enc = True
        self._enc_desync = False
        self._ctr = 0
        self._block = []
        self._remaining = 0
        self._last_t1 = None
        self.encrypted_session = True

    def _rsa_data(self, image, i: int, n: int) -> int:
        """Buffer RSA_DATA_IN words. Returns how many of the n words were consumed."""
        if not self._authenticated and self.fuses.aes_only and not self.dec_enabled:
            self._remaining = 0
            self._failure(security=True)
            return 1
        if self._rsa_skip:
            # words past the fixed block length are swallowed with the packet
            s = min(n, self._rsa_skip)
            self._rsa_skip -= s
            self._remaining -= s
            self._crc_pending.append((Reg.RSA_DATA_IN, image[i : i + s]))
            return s
        model = self.model
        prefix = rsa_prefix_words(model)
        buf = self._rsa_buf
        if self._rsa_total is None:
            need = prefix - len(buf)
        else:
            need = self._rsa_total - len(buf)
        take = min(n, need)
        chunk = image[i : i + take]
        buf.extend(chunk)
        self._crc_pending.append((Reg.RSA_DATA_IN, chunk))
        self._remaining -= take
        if take < need:
            return take
        if self._rsa_total is None:
            dlc = buf[-1]
            body = dlc & ~DLC_TEST_MODE
            fabric = body - model.rsa_header_words - model.rsa_footer_words
            if dlc & DLC_TEST_MODE:
                ok = fabric == model.test_mode_fabric_words
            else:
                ok = 0 < fabric <= model.fabric_words and fabric % model.frame_length == 0
            if not ok:
                self._rsa_buf = []
                self._remaining = 0
                self._failure(security=True)
                return take
            self._rsa_total = prefix + body
            if take < n:
                return take + self._rsa_data(image, i + take, n - take)
            return take
        # block complete: fabric goes into the fabric as buffer storage
        block = RsaBlock(buf, model.rsa_key_words, model.rsa_header_words, model.rsa_footer_words)
        self._rsa_buf = []
        self._rsa_total = None
        self.rsa = block
        saved = self._fdri_ptr
        self._fdri_ptr = 0
        self._fdri_store(block.fabric)
        self._fdri_ptr = saved
        self._rsa_skip = self._remaining
        if take < n:
            return take + self._rsa_data(image, i + take, n - take)
        return take

    def _rdw_go(self) -> None:
        block = self.rsa
        if block is None:
            return
        self.rsa = None
        if not block.verify(self.fuses.pubkey_digest):
            self._failure(security=True)
            return
        saved = (self._reg, self._remaining, self._last_t1)
        self._authenticated = True
        try:
            self._run_buffer(block.header)
            if self.dec_enabled and self.lifecycle is Lifecycle.SYNCED:
                key = self.keys.efuse_key if self.regs[Reg.CTL0] & CTL0_EFUSE_KEY else self.keys.bbram_key
                if key is None:
                    self._failure(security=True)
                    return
                plain = crypto.decrypt_ctr(key, block.iv, block.fabric)
                saved_ptr = self._fdri_ptr
                self._fdri_ptr = 0
                self._fdri_store(plain)
                self._fdri_ptr = saved_ptr
            self._run_buffer(block.footer)
        finally:
            self._authenticated = False
        if self.lifecycle is Lifecycle.SYNCED:
            self._reg, self._remaining, self._last_t1 = saved

    def _run_buffer(self, words) -> None:
        self._reg, self._remaining, self._last_t1 = 0, 0, None
        SYNCED = Lifecycle.SYNCED
        for w in words:
            if self.lifecycle is not SYNCED:
                return
            self._step(w)

    def _failure(self, security: bool) -> None:
        """Integrity or policy failure: abort, or fall back with a security reset."""
        if self.regs[Reg.CTL0] & CTL0_FALLBACK_DISABLE:
            if security:
                self.security_error = True
                self.regs[Reg.STAT] |= STAT_SECURITY_ERROR
                self.regs[Reg.BOOTSTS] |= BOOTSTS_VALID | BOOTSTS_SECURITY_ERROR
            else:
                self.crc_error = True
                self.regs[Reg.STAT] |= STAT_CRC_ERROR
                self.regs[Reg.BOOTSTS] |= BOOTSTS_VALID | BOOTSTS_CRC_ERROR
            self._rsa_buf = []
            self._rsa_total = None
            self._reset_packets()
            self.lifecycle = Lifecycle.AWAIT_SYNC
        else:
            self._clear(keep_sticky=True)
