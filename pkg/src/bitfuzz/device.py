"""Device descriptions: geometry, fuses, key storage and config-file loading."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .crypto import ConfigurationError, RsaKeypair, load_aes_key, load_rsa_key, pubkey_digest

PIPELINE_WORDS = {"UltraScale": 10, "UltraScalePlus": 25}

BUILTIN_PREFIX = "builtin:"


def fixtures_dir() -> Path:
    return Path(str(resources.files("bitfuzz") / "fixtures"))


def resolve_ref(ref: str, base_dir: Path | None = None) -> Path:
    """``builtin:keys/x.key`` names a packaged fixture; other paths are relative to base_dir."""
    if ref.startswith(BUILTIN_PREFIX):
        return fixtures_dir() / ref[len(BUILTIN_PREFIX) :]
    p = Path(ref)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return p


@dataclass(frozen=True)
class DeviceModel:
    family: str = "UltraScalePlus"
    frame_length: int = 93
    frames: int = 32
    device_seed: int = 0x5EED_C0FF_EE15_F00D
    test_mode_frames: int = 24
    rsa_modulus_bits: int = 512
    rsa_header_words: int = 64
    rsa_footer_words: int = 256

    def __post_init__(self):
        if self.family not in PIPELINE_WORDS:
            raise ConfigurationError(f"unknown device family {self.family!r}")
        if self.frame_length <= 0 or self.frames <= 0:
            raise ConfigurationError("frame geometry must be positive")
        if self.rsa_modulus_bits % 32 or self.rsa_modulus_bits < 256:
            raise ConfigurationError("rsa_modulus_bits must be a multiple of 32 and at least 256")

    @property
    def pipeline_words(self) -> int:
        return PIPELINE_WORDS[self.family]

    @property
    def fabric_words(self) -> int:
        return self.frames * self.frame_length

    @property
    def rsa_key_words(self) -> int:
        return self.rsa_modulus_bits // 32

    @property
    def test_mode_fabric_words(self) -> int:
        # the requested frame count plus one trailing pad frame
        return (self.test_mode_frames + 1) * self.frame_length


@dataclass(frozen=True)
class Fuses:
    aes_only: bool = False
    rsa_only: bool = False
    pubkey_digest: int | None = None
    fuse_cntl: int = 0


@dataclass
class KeyStore:
    bbram_key: bytes | None = None
    efuse_key: bytes | None = None
    bbram_delete_flag: bool = False

    def copy(self) -> "KeyStore":
        return replace(self)


@dataclass
class DeviceConfig:
    model: DeviceModel = field(default_factory=DeviceModel)
    fuses: Fuses = field(default_factory=Fuses)
    keys: KeyStore = field(default_factory=KeyStore)
    name: str = "default"
    source: str | None = None


def _int(value, default=None):
    if value is None:
        return default
    if isinstance(value, bool):
        raise ConfigurationError(f"expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    return int(str(value).replace(" ", ""), 16 if not str(value).startswith("0x") else 0)


def _digest_from(fuse_cfg: dict, base_dir: Path | None, bits: int) -> int | None:
    if "pubkey_digest" in fuse_cfg and fuse_cfg["pubkey_digest"] is not None:
        return _int(fuse_cfg["pubkey_digest"])
    ref = fuse_cfg.get("pubkey")
    if not ref:
        return None
    key: RsaKeypair = load_rsa_key(resolve_ref(ref, base_dir))
    return pubkey_digest(key.e, key.n, bits)


def device_from_dict(cfg: dict, base_dir: Path | None = None, name: str = "custom") -> DeviceConfig:
    known = {"name", "family", "frame_length", "frames", "device_seed", "test_mode_frames",
             "rsa_modulus_bits", "rsa_header_words", "rsa_footer_words", "fuses", "keys"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown device config fields: {sorted(unknown)}")
    defaults = DeviceModel()
    model = DeviceModel(
        family=cfg.get("family", defaults.family),
        frame_length=int(cfg.get("frame_length", defaults.frame_length)),
        frames=int(cfg.get("frames", defaults.frames)),
        device_seed=_int(cfg.get("device_seed"), defaults.device_seed),
        test_mode_frames=int(cfg.get("test_mode_frames", defaults.test_mode_frames)),
        rsa_modulus_bits=int(cfg.get("rsa_modulus_bits", defaults.rsa_modulus_bits)),
        rsa_header_words=int(cfg.get("rsa_header_words", defaults.rsa_header_words)),
        rsa_footer_words=int(cfg.get("rsa_footer_words", defaults.rsa_footer_words)),
    )
    fc = cfg.get("fuses", {})
    fuses = Fuses(
        aes_only=bool(fc.get("aes_only", False)),
        rsa_only=bool(fc.get("rsa_only", False)),
        pubkey_digest=_digest_from(fc, base_dir, model.rsa_modulus_bits),
        fuse_cntl=_int(fc.get("fuse_cntl"), 0),
    )
    kc = cfg.get("keys", {})
    keys = KeyStore(
        bbram_key=load_aes_key(resolve_ref(kc["bbram"], base_dir)) if kc.get("bbram") else None,
        efuse_key=load_aes_key(resolve_ref(kc["efuse"], base_dir)) if kc.get("efuse") else None,
    )
    return DeviceConfig(model=model, fuses=fuses, keys=keys, name=cfg.get("name", name))


def load_device(ref: str | Path) -> DeviceConfig:
    """Load a device JSON file. Bare names such as ``default`` pick a packaged config."""
    ref = str(ref)
    if ref.startswith(BUILTIN_PREFIX):
        path = resolve_ref(ref)
    elif not ref.endswith(".json") and not Path(ref).exists():
        path = fixtures_dir() / "devices" / f"{ref}.json"
    else:
        path = Path(ref)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"device config not found: {ref}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    dev = device_from_dict(cfg, base_dir=path.parent, name=path.stem)
    dev.source = str(path)
    return dev
