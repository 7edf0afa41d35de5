"""Structure-aware fuzzing of FPGA configuration bitstreams against a simulated config engine."""

from .bitstream import disassemble, parse, read_bitstream, write_bitstream
from .device import DeviceConfig, load_device
from .engine import ConfigEngine, Unresponsive
from .grammar import FuzzRequest, Renderer, load_template, render
from .harness import CrashSettings, SimTarget, load_spec, make_target, replay, run_campaign

__version__ = "0.1.0"

__all__ = [
    "ConfigEngine",
    "CrashSettings",
    "DeviceConfig",
    "FuzzRequest",
    "Renderer",
    "SimTarget",
    "Unresponsive",
    "disassemble",
    "load_device",
    "load_spec",
    "load_template",
    "make_target",
    "parse",
    "read_bitstream",
    "render",
    "replay",
    "run_campaign",
    "write_bitstream",
]
