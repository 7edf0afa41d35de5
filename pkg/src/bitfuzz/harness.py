"""Crash evaluation, targets and campaign execution."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .bitstream import hex_to_words, parse_reg, reg_name, words_to_hex
from .device import DeviceConfig, DeviceModel, load_device, resolve_ref
from .engine import ConfigEngine, Unresponsive
from .grammar import FuzzRequest, Renderer, load_template, request_from_dict

log = logging.getLogger(__name__)

DEFAULT_MAX_CRASHES = 128
DEFAULT_CHECKPOINT_EVERY = 1024

OUTCOME_NORMAL = "normal"
OUTCOME_SOFT = "soft_crash"
OUTCOME_UNRESPONSIVE = "unresponsive"


class TransportError(ConnectionError):
    """The target could not be reached; retriable, unlike Unresponsive."""


class SpecError(ValueError):
    pass


# --- crash settings --------------------------------------------------------------


def _flag(value) -> bool:
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in ("yes", "true", "1", "on"):
        return True
    if s in ("no", "false", "0", "off", ""):
        return False
    raise SpecError(f"expected yes/no, got {value!r}")


def _hex(value) -> int:
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    s = str(value).replace(" ", "").lower()
    if s.startswith("0x"):
        s = s[2:]
    try:
        w = int(s, 16)
    except ValueError:
        raise SpecError(f"bad hex word {value!r}") from None
    if not 0 <= w <= 0xFFFFFFFF:
        raise SpecError(f"word {value!r} does not fit in 32 bits")
    return w


def _word_list(value) -> tuple[int, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        items = value
    else:
        items = [v for v in str(value).split(",")]
    return tuple(_hex(v) for v in items if str(v).strip())


_FIELDS = {
    "probe", "crash_if_differs_from_default", "crash_if_equal_to",
    "crash_if_not_equal_to", "crash_if_some_bits_in_mask_set",
}


@dataclass(frozen=True)
class RegisterSetting:
    probe: bool = True
    crash_if_differs_from_default: bool = True
    crash_if_equal_to: tuple = ()
    crash_if_not_equal_to: tuple = ()
    crash_if_some_bits_in_mask_set: int | None = None

    def merged(self, entry: dict, where: str) -> "RegisterSetting":
        extra = set(entry) - _FIELDS
        if extra:
            raise SpecError(f"{where}: unknown crash setting fields {sorted(extra)}")
        kw = {}
        if "probe" in entry:
            kw["probe"] = _flag(entry["probe"])
        if "crash_if_differs_from_default" in entry:
            kw["crash_if_differs_from_default"] = _flag(entry["crash_if_differs_from_default"])
        if "crash_if_equal_to" in entry:
            kw["crash_if_equal_to"] = _word_list(entry["crash_if_equal_to"])
        if "crash_if_not_equal_to" in entry:
            kw["crash_if_not_equal_to"] = _word_list(entry["crash_if_not_equal_to"])
        if "crash_if_some_bits_in_mask_set" in entry:
            raw = entry["crash_if_some_bits_in_mask_set"]
            kw["crash_if_some_bits_in_mask_set"] = None if raw in (None, "") else _hex(raw)
        return RegisterSetting(**{**self.__dict__, **kw})


def _register_key(key: str) -> int:
    k = key.strip()
    if k.lower().startswith("register") and k[8:].isdigit():
        return parse_reg(int(k[8:]))
    if k.isdigit():
        return parse_reg(int(k))
    return parse_reg(k)


class CrashSettings:
    """Per-register predicates. Register entries override DEFAULT field by field,
    and DEFAULT overrides the built-in base (probe everything, flag any change)."""

    def __init__(self, raw: dict | None = None):
        raw = dict(raw or {})
        self.raw = raw
        self.crash_on_soft_crash = _flag(raw.get("crash_on_soft_crash", True))
        entries = {k: v for k, v in raw.items() if k != "crash_on_soft_crash"}
        base = RegisterSetting()
        if "DEFAULT" in entries:
            base = base.merged(entries.pop("DEFAULT"), "DEFAULT")
        regs = [base] * 32
        for key, entry in entries.items():
            try:
                addr = _register_key(key)
            except ValueError:
                raise SpecError(f"unknown register key {key!r}") from None
            if not isinstance(entry, dict):
                raise SpecError(f"{key}: settings entry must be an object")
            regs[addr] = regs[addr].merged(entry, key)
        self.registers = tuple(regs)
        checks = []
        for addr, s in enumerate(regs):
            if not s.probe:
                continue
            if not (s.crash_if_differs_from_default or s.crash_if_equal_to or s.crash_if_not_equal_to
                    or s.crash_if_some_bits_in_mask_set):
                continue
            checks.append((
                addr,
                s.crash_if_differs_from_default,
                frozenset(s.crash_if_equal_to),
                frozenset(s.crash_if_not_equal_to),
                s.crash_if_some_bits_in_mask_set or 0,
            ))
        self._checks = tuple(checks)

    def to_dict(self) -> dict:
        return dict(self.raw)


def evaluate(dump, defaults, settings: CrashSettings) -> list[tuple[str, str, int]]:
    """Triggered predicates as (register, predicate, observed value)."""
    fired = []
    for addr, differs, eq, neq, mask in settings._checks:
        v = dump[addr]
        if differs and v != defaults[addr]:
            fired.append((reg_name(addr), "crash_if_differs_from_default", v))
        if eq and v in eq:
            fired.append((reg_name(addr), "crash_if_equal_to", v))
        if neq and v not in neq:
            fired.append((reg_name(addr), "crash_if_not_equal_to", v))
        if mask and v & mask:
            fired.append((reg_name(addr), "crash_if_some_bits_in_mask_set", v))
    return fired


# --- targets ------------------------------------------------------------------------


def common_prefix(a: list, b: list) -> int:
    n = min(len(a), len(b))
    lo, step = 0, 64
    while lo < n:
        hi = min(n, lo + step)
        if a[lo:hi] != b[lo:hi]:
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if a[lo:mid] == b[lo:mid]:
                    lo = mid
                else:
                    hi = mid
            return lo
        lo = hi
        step *= 2
    return n


class SimTarget:
    """In-process simulator target.

    After restore(), programming reuses engine snapshots taken where earlier
    images diverged, so only the changed suffix of each case is executed.
    """

    def __init__(self, device: DeviceConfig | None = None, checkpoints: bool = True, max_checkpoints: int = 64):
        self.device = device or DeviceConfig()
        self.engine = ConfigEngine(self.device)
        self._pristine = ConfigEngine(self.device)
        self._use_checkpoints = checkpoints
        self._max_checkpoints = max_checkpoints
        self._cps: dict[int, ConfigEngine] = {}
        self._last: list | None = None
        self._restored = False

    @property
    def model(self) -> DeviceModel:
        return self.device.model

    def restore(self) -> None:
        self._restored = True

    def _materialize(self) -> None:
        if self._restored:
            self.engine = self._pristine.clone()
            self._restored = False

    def program(self, words) -> list[int]:
        words = words if isinstance(words, list) else list(words)
        if self._restored and self._use_checkpoints:
            self._restored = False
            self.engine = self._program_from_checkpoint(words)
        else:
            self._materialize()
            self._last = None
            self._cps.clear()
            self.engine.program(words)
        out = self.engine.output
        self.engine.output = []
        return out

    def _program_from_checkpoint(self, words: list) -> ConfigEngine:
        last = self._last
        d = common_prefix(last, words) if last is not None else 0
        cps = self._cps
        for idx in [i for i in cps if i > d]:
            del cps[idx]
        if d and d not in cps:
            base_at = max((i for i in cps if i <= d), default=0)
            eng = cps[base_at].clone() if base_at else self._pristine.clone()
            try:
                eng.program(words, base_at, d)
            except Unresponsive:
                pass
            if len(cps) >= self._max_checkpoints:
                del cps[min(cps)]
            cps[d] = eng
        eng = cps[d].clone() if d else self._pristine.clone()
        self._last = words
        try:
            eng.program(words, d)
        except Unresponsive:
            pass
        return eng

    def read_regs(self) -> tuple[list[int], bool]:
        self._materialize()
        return self.engine.read_all(), self.engine.soft_crashed

    def reset(self) -> None:
        self._materialize()
        self.engine.reset_jprogram()

    def power_cycle(self) -> None:
        self._materialize()
        self.engine.power_cycle()

    def done(self) -> bool:
        self._materialize()
        if self.engine.lifecycle.value == "hard_crashed":
            raise Unresponsive("done pin unreadable")
        return self.engine.done

    def close(self) -> None:
        pass


def make_target(uri: str, timeout: float = 5.0):
    """``sim:<device config>`` or ``tcp:<host>:<port>``."""
    kind, _, rest = uri.partition(":")
    if kind == "sim":
        return SimTarget(load_device(rest or "default"))
    if kind == "tcp":
        from .transport import TcpTarget

        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp target {uri!r}, expected tcp:<host>:<port>")
        return TcpTarget(host, int(port), timeout=timeout)
    raise ValueError(f"unknown target scheme in {uri!r}")


# --- single cases ------------------------------------------------------------------------


@dataclass
class CaseResult:
    outcome: str
    dump: list[int] | None
    triggered: list
    output: list[int]

    @property
    def crashed(self) -> bool:
        return bool(self.triggered)


def snapshot_defaults(target) -> list[int]:
    target.restore()
    dump, _ = target.read_regs()
    return dump


def run_case(target, words, defaults, settings: CrashSettings) -> CaseResult:
    target.restore()
    output: list[int] = []
    try:
        output = target.program(words)
        dump, soft = target.read_regs()
    except Unresponsive:
        target.power_cycle()
        return CaseResult(OUTCOME_UNRESPONSIVE, None, [("*", "unresponsive", 0)], output)
    if soft is None:
        # target cannot tell; an all-zero dump over all-zero defaults is the tell-tale
        soft = not any(dump) and not any(defaults)
    triggered = evaluate(dump, defaults, settings)
    if soft:
        if settings.crash_on_soft_crash:
            triggered.insert(0, ("*", "soft_crash", 0))
        return CaseResult(OUTCOME_SOFT, dump, triggered, output)
    return CaseResult(OUTCOME_NORMAL, dump, triggered, output)


# --- records -------------------------------------------------------------------------------


@dataclass
class CrashRecord:
    case_index: int
    request: str
    outcome: str
    triggered: list
    registers: list[int] | None
    output: list[int]
    bitstream: list[int]

    def to_json(self) -> dict:
        return {
            "case_index": self.case_index,
            "request": self.request,
            "outcome": self.outcome,
            "triggered": [[r, p, f"{v:08x}"] for r, p, v in self.triggered],
            "registers": None if self.registers is None else [f"{v:08x}" for v in self.registers],
            "output": words_to_hex(self.output),
            "bitstream": words_to_hex(self.bitstream),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CrashRecord":
        regs = d.get("registers")
        return cls(
            case_index=int(d["case_index"]),
            request=d.get("request", ""),
            outcome=d["outcome"],
            triggered=[(r, p, int(v, 16)) for r, p, v in d.get("triggered", [])],
            registers=None if regs is None else [int(v, 16) for v in regs],
            output=hex_to_words(d.get("output", "")),
            bitstream=hex_to_words(d["bitstream"]),
        )


def load_records(path) -> list[CrashRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "crashes.jsonl"
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            out.append(CrashRecord.from_json(json.loads(line)))
    return out


@dataclass
class ReplayResult:
    match: bool
    outcome: str
    registers: list[int] | None
    output: list[int]
    differences: list[str] = field(default_factory=list)


def replay(record: CrashRecord, target) -> ReplayResult:
    target.restore()
    outcome = OUTCOME_NORMAL
    dump = None
    output: list[int] = []
    try:
        output = target.program(record.bitstream)
        dump, soft = target.read_regs()
        if soft:
            outcome = OUTCOME_SOFT
    except Unresponsive:
        outcome = OUTCOME_UNRESPONSIVE
        target.power_cycle()
    diffs = []
    if outcome != record.outcome:
        diffs.append(f"outcome {record.outcome} -> {outcome}")
    if dump is not None and record.registers is not None:
        for addr, (a, b) in enumerate(zip(record.registers, dump)):
            if a != b:
                diffs.append(f"{reg_name(addr)}: {a:08x} -> {b:08x}")
    elif (dump is None) != (record.registers is None):
        diffs.append("register dump presence differs")
    if list(output) != list(record.output):
        diffs.append(f"output differs ({len(record.output)} -> {len(output)} words)")
    return ReplayResult(not diffs, outcome, dump, list(output), diffs)


# --- fuzzer specs ---------------------------------------------------------------------------


@dataclass
class FuzzerSpec:
    name: str
    requests: list[FuzzRequest]
    settings: CrashSettings
    device_ref: str | None = None
    max_crashes: int = DEFAULT_MAX_CRASHES
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY
    path: str | None = None


def load_spec(path) -> FuzzerSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise SpecError(f"fuzzer spec not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: {exc}") from None
    return spec_from_dict(data, path)


def spec_from_dict(data: dict, path: Path | None = None) -> FuzzerSpec:
    known = {"name", "requests", "request", "settings", "device", "campaign"}
    extra = set(data) - known
    if extra:
        raise SpecError(f"unknown fuzzer spec fields {sorted(extra)}")
    base = path.parent if path else None
    raw = data.get("requests")
    if raw is None:
        raw = [data["request"]] if "request" in data else []
    if not raw:
        raise SpecError("fuzzer spec lists no requests")
    requests = []
    for item in raw:
        if isinstance(item, str):
            requests.append(load_template(resolve_ref(item, base)))
        else:
            requests.append(request_from_dict(item, base))
    camp = data.get("campaign", {})
    spec = FuzzerSpec(
        name=data.get("name", path.stem if path else "campaign"),
        requests=requests,
        settings=CrashSettings(data.get("settings", {})),
        device_ref=data.get("device"),
        max_crashes=int(camp.get("max_crashes", DEFAULT_MAX_CRASHES)),
        checkpoint_every=int(camp.get("checkpoint_every", DEFAULT_CHECKPOINT_EVERY)),
        path=str(path) if path else None,
    )
    return spec


def spec_device(spec: FuzzerSpec) -> DeviceConfig:
    ref = spec.device_ref
    if not ref:
        return DeviceConfig()
    if spec.path and not ref.startswith("builtin:"):
        local = Path(spec.path).parent / ref
        if local.exists():
            ref = str(local)
    return load_device(ref)


class CaseSpace:
    """Concatenated case spaces of several requests."""

    def __init__(self, requests: list[FuzzRequest], model: DeviceModel):
        self.renderers = [Renderer(r, model) for r in requests]
        self.offsets = []
        total = 0
        for r in self.renderers:
            self.offsets.append(total)
            total += r.count
        self.total = total

    def locate(self, index: int) -> tuple[Renderer, int]:
        if not 0 <= index < self.total:
            raise IndexError(f"case {index} outside 0..{self.total - 1}")
        for r, off in zip(reversed(self.renderers), reversed(self.offsets)):
            if index >= off:
                return r, index - off
        raise AssertionError("unreachable")

    def render(self, index: int) -> list[int]:
        r, local = self.locate(index)
        return r.render(local)

    def request_name(self, index: int) -> str:
        return self.locate(index)[0].request.name


def shard_range(total: int, index: int, count: int) -> tuple[int, int]:
    if not 0 <= index < count:
        raise ValueError(f"shard {index}/{count} out of range")
    return total * index // count, total * (index + 1) // count


def split_range(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    n = hi - lo
    return [(lo + n * i // parts, lo + n * (i + 1) // parts) for i in range(parts)]


# --- campaigns ---------------------------------------------------------------------------------


@dataclass
class CampaignResult:
    records: list[CrashRecord]
    cases_run: int
    elapsed: float
    stop_reason: str
    out_dir: Path | None
    total_cases: int

    @property
    def rate(self) -> float:
        return self.cases_run / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def crash_indices(self) -> list[int]:
        return [r.case_index for r in self.records]


class _Sink:
    def __init__(self, path: Path | None, records: list[CrashRecord], max_crashes: int, stop: threading.Event):
        self.path = path
        self.records = list(records)
        self.max_crashes = max_crashes
        self.stop = stop
        self.lock = threading.Lock()
        self._fh = open(path, "a") if path else None

    def add(self, rec: CrashRecord) -> None:
        with self.lock:
            self.records.append(rec)
            if self._fh:
                self._fh.write(json.dumps(rec.to_json()) + "\n")
                self._fh.flush()
            if len(self.records) >= self.max_crashes:
                self.stop.set()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _write_json(path: Path, data: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=2) + "\n")
    tmp.replace(path)


def run_campaign(
    spec: FuzzerSpec,
    targets: list,
    out_dir=None,
    shard: tuple[int, int] = (0, 1),
    max_crashes: int | None = None,
    resume: bool = False,
    budget: int | None = None,
    checkpoint_every: int | None = None,
    case_range: tuple[int, int] | None = None,
    model: DeviceModel | None = None,
) -> CampaignResult:
    """Run (or resume) a campaign over one or more targets, one thread per target."""
    if not targets:
        raise ValueError("run_campaign needs at least one target")
    model = model or getattr(targets[0], "model", None) or spec_device(spec).model
    space = CaseSpace(spec.requests, model)
    max_crashes = spec.max_crashes if max_crashes is None else max_crashes
    every = checkpoint_every or spec.checkpoint_every
    lo, hi = shard_range(space.total, *shard)
    if case_range is not None:
        lo, hi = max(lo, case_range[0]), min(hi, case_range[1])
    ranges = split_range(lo, hi, len(targets))
    out = Path(out_dir) if out_dir else None
    manifest_path = out / "manifest.json" if out else None
    crash_path = out / "crashes.jsonl" if out else None

    nexts = [a for a, _ in ranges]
    records: list[CrashRecord] = []
    defaults = None
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        if not manifest_path or not manifest_path.exists():
            raise SpecError("nothing to resume: no manifest in campaign directory")
        man = json.loads(manifest_path.read_text())
        if [tuple(r) for r in man["ranges"]] != ranges:
            raise SpecError("campaign layout changed (targets, shard or range); cannot resume")
        nexts = list(man["next"])
        defaults = [int(v, 16) for v in man["defaults"]]
        started = man.get("started", started)
        for rec in load_records(crash_path):
            owner = next(k for k, (a, b) in enumerate(ranges) if a <= rec.case_index < b)
            if rec.case_index < nexts[owner]:
                records.append(rec)
        records = _dedupe(records)
        _rewrite(crash_path, records)
    elif crash_path:
        crash_path.write_text("")

    if defaults is None:
        defaults = snapshot_defaults(targets[0])

    stop = threading.Event()
    sink = _Sink(crash_path, records, max_crashes, stop)
    if len(sink.records) >= max_crashes:
        stop.set()
    lock = threading.Lock()
    counters = {"run": 0, "claimed": 0}
    stop_reason = ["complete"]

    def manifest(complete: bool) -> dict:
        return {
            "spec": spec.name,
            "spec_path": spec.path,
            "total_cases": space.total,
            "shard": list(shard),
            "ranges": [list(r) for r in ranges],
            "next": nexts,
            "crashes": len(sink.records),
            "max_crashes": max_crashes,
            "complete": complete,
            "stop_reason": stop_reason[0] if complete else None,
            "defaults": [f"{v:08x}" for v in defaults],
            "settings": spec.settings.to_dict(),
            "started": started,
        }

    def save_manifest(complete: bool = False) -> None:
        if manifest_path:
            with lock:
                _write_json(manifest_path, manifest(complete))

    save_manifest()
    errors: list[BaseException] = []

    def worker(k: int, target) -> None:
        a, b = nexts[k], ranges[k][1]
        settings = spec.settings
        run = 0
        try:
            for idx in range(a, b):
                if stop.is_set():
                    break
                if budget is not None:
                    # claim before running so concurrent workers never overshoot
                    with lock:
                        if counters["claimed"] >= budget:
                            stop_reason[0] = "budget"
                            stop.set()
                            break
                        counters["claimed"] += 1
                words = space.render(idx)
                res = run_case(target, words, defaults, settings)
                if res.triggered:
                    sink.add(CrashRecord(idx, space.request_name(idx), res.outcome, res.triggered,
                                         res.dump, list(res.output), words))
                nexts[k] = idx + 1
                run += 1
                if run % every == 0:
                    save_manifest()
        except BaseException as exc:  # surfaced to the caller after join
            errors.append(exc)
            stop.set()
        finally:
            with lock:
                counters["run"] += run

    t0 = time.perf_counter()
    if len(targets) == 1:
        worker(0, targets[0])
    else:
        threads = [threading.Thread(target=worker, args=(k, t), daemon=True) for k, t in enumerate(targets)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    elapsed = time.perf_counter() - t0
    sink.close()
    if len(sink.records) >= max_crashes:
        stop_reason[0] = "max_crashes"
    elif errors:
        stop_reason[0] = "error"
    elif any(n < b for n, (_, b) in zip(nexts, ranges)) and stop_reason[0] == "complete":
        stop_reason[0] = "stopped"
    final = sorted(_dedupe(sink.records), key=lambda r: r.case_index)
    if crash_path:
        _rewrite(crash_path, final)
    save_manifest(complete=True)
    if errors:
        raise errors[0]
    return CampaignResult(final, counters["run"], elapsed, stop_reason[0], out, space.total)


def _dedupe(records: list[CrashRecord]) -> list[CrashRecord]:
    seen = {}
    for r in records:
        seen.setdefault(r.case_index, r)
    return list(seen.values())


def _rewrite(path: Path | None, records: list[CrashRecord]) -> None:
    if path is None:
        return
    records = sorted(records, key=lambda r: r.case_index)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")
    tmp.replace(path)
