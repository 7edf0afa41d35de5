"""Command line driver: asm, disasm, fuzz, crashes, serve, replay, attack."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bitstream import Command, Reg, disassemble, read_bitstream, reg_name, write_bitstream
from .crypto import ConfigurationError
from .device import fixtures_dir, load_device
from .engine import BIT_NAMES, Unresponsive
from .grammar import CapacityError, LayoutError, Renderer, TemplateError, load_template
from .harness import (
    CrashRecord,
    SimTarget,
    SpecError,
    TransportError,
    load_records,
    load_spec,
    make_target,
    replay,
    run_campaign,
    spec_device,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CRASHES = 2
EXIT_TARGET = 3

log = logging.getLogger("bitfuzz")

USER_ERRORS = (TemplateError, LayoutError, CapacityError, ConfigurationError, SpecError, ValueError, OSError)


class UsageError(Exception):
    pass


def _parse_shard(text: str) -> tuple[int, int]:
    idx, sep, total = text.partition("/")
    if not sep or not idx.isdigit() or not total.isdigit() or not 0 <= int(idx) < int(total):
        raise argparse.ArgumentTypeError(f"expected i/k with 0 <= i < k, got {text!r}")
    return int(idx), int(total)


# --- asm / disasm ---------------------------------------------------------------------------


def cmd_asm(args) -> int:
    request = load_template(args.template)
    model = load_device(args.device).model
    renderer = Renderer(request, model)
    if not 0 <= args.case < renderer.count:
        raise UsageError(f"case {args.case} outside 0..{renderer.count - 1}")
    words = renderer.render(args.case)
    write_bitstream(args.out, words)
    print(f"{args.out}: case {args.case} of {renderer.count}, {len(words)} words")
    return EXIT_OK


def cmd_disasm(args) -> int:
    words = read_bitstream(args.file)
    for line in disassemble(words):
        print(line)
    return EXIT_OK


# --- fuzz ----------------------------------------------------------------------------------


def _targets(args, spec) -> list:
    uris = args.target or []
    if not uris:
        dev = spec_device(spec)
        return [SimTarget(dev) for _ in range(args.workers)]
    out = []
    for uri in uris:
        out.extend(make_target(uri, timeout=args.timeout) for _ in range(args.workers))
    return out


def cmd_fuzz(args) -> int:
    spec = load_spec(args.spec)
    out_dir = Path(args.out) if args.out else Path("campaigns") / spec.name
    targets = _targets(args, spec)
    try:
        result = run_campaign(
            spec,
            targets,
            out_dir=out_dir,
            shard=args.shard,
            max_crashes=args.max_crashes,
            resume=args.resume,
            budget=args.budget,
            checkpoint_every=args.checkpoint_every,
            model=spec_device(spec).model,
        )
    finally:
        for t in targets:
            t.close()
    print(f"campaign {spec.name}: {result.cases_run} cases in {result.elapsed:.1f}s "
          f"({result.rate:.0f}/s), {len(result.records)} crashes, stop={result.stop_reason}")
    print(f"crash database: {out_dir / 'crashes.jsonl'}")
    return EXIT_CRASHES if result.records else EXIT_OK


# --- crashes -------------------------------------------------------------------------------


def _fmt_triggered(triggered) -> str:
    parts = []
    for reg, pred, val in triggered:
        name = reg if isinstance(reg, str) else reg_name(reg)
        parts.append(pred if name == "*" else f"{name}.{pred}={val:08x}")
    return ", ".join(parts)


def format_dump(registers) -> list[str]:
    lines = []
    for addr, value in enumerate(registers):
        line = f"  {addr:2d} {reg_name(addr):<12} {value:08x}"
        names = BIT_NAMES.get(addr)
        if names:
            line += "  " + " ".join(f"{n}={(value >> b) & 1}" for b, n in sorted(names.items()))
        lines.append(line)
    return lines


def format_record(rec: CrashRecord, with_listing: bool = False) -> str:
    lines = [f"case {rec.case_index} ({rec.request}) outcome={rec.outcome}",
             f"triggered: {_fmt_triggered(rec.triggered)}",
             f"bitstream: {len(rec.bitstream)} words"]
    if rec.output:
        lines.append(f"output: {len(rec.output)} words ({len(rec.output) * 4} bytes)")
    if rec.registers is None:
        lines.append("registers: none (target unresponsive)")
    else:
        lines.append("registers:")
        lines += format_dump(rec.registers)
    if with_listing:
        lines.append("listing:")
        lines += ["  " + s for s in disassemble(rec.bitstream)]
    return "\n".join(lines)


def cmd_crashes(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise UsageError(f"no campaign directory {d}")
    records = load_records(d)
    if args.action == "list":
        print(f"{'case':>10}  {'outcome':<12}  predicates")
        for r in records:
            print(f"{r.case_index:>10}  {r.outcome:<12}  {_fmt_triggered(r.triggered)}")
        print(f"{len(records)} crashes")
    elif args.action == "show":
        if args.case is None:
            raise UsageError("crashes show needs a case index")
        match = [r for r in records if r.case_index == args.case]
        if not match:
            raise UsageError(f"no crash recorded for case {args.case}")
        print(format_record(match[0], with_listing=args.listing))
    else:
        if args.format == "json":
            text = json.dumps([r.to_json() for r in records], indent=1)
        else:
            text = "\n\n".join(format_record(r) for r in records)
        if args.output:
            Path(args.output).write_text(text + "\n")
        else:
            print(text)
    return EXIT_OK


# --- serve / replay ----------------------------------------------------------------------------


def cmd_serve(args) -> int:
    from .transport import TargetServer

    device = load_device(args.device)
    try:
        server = TargetServer(device, args.host, args.port)
    except OSError as exc:
        print(f"error: cannot listen on {args.host}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_TARGET
    print(f"serving {device.name} on {args.host}:{server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def read_record_source(path: Path) -> list[CrashRecord]:
    """A campaign directory, a crashes.jsonl file, or an exported JSON record/array."""
    if path.is_dir():
        return load_records(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return [CrashRecord.from_json(json.loads(s)) for s in text.splitlines() if s.strip()]
    if isinstance(data, dict):
        data = [data]
    return [CrashRecord.from_json(d) for d in data]


def cmd_replay(args) -> int:
    records = read_record_source(Path(args.record))
    if args.case is not None:
        records = [r for r in records if r.case_index == args.case]
    if not records:
        raise UsageError("no records to replay")
    target = make_target(args.target, timeout=args.timeout)
    diverged = 0
    try:
        for rec in records:
            res = replay(rec, target)
            if res.match:
                print(f"case {rec.case_index}: match ({res.outcome})")
            else:
                diverged += 1
                print(f"case {rec.case_index}: DIVERGED")
                for d in res.differences:
                    print(f"  {d}")
    finally:
        target.close()
    print(f"{len(records) - diverged}/{len(records)} records reproduced")
    return EXIT_OK


# --- attack demos ------------------------------------------------------------------------------

STARBLEED_FIRST_CIPHER = 19
STARBLEED_PLANTED = 0xDEADC0DE


def attack_juststart(device) -> bool:
    """Swap the trailing RDW_GO for DGHIGH, START and let the board boot unauthenticated."""
    from .engine import BOOTSTS_VALID, STAT_DONE_PIN

    request = load_template(fixtures_dir() / "templates" / "juststart.json")
    renderer = Renderer(request, device.model)
    slots = (Command.DGHIGH, Command.START, Command.NULL)
    case = (slots[0] << 10) | (slots[1] << 5) | slots[2]
    words = renderer.render(case)
    target = SimTarget(device)
    target.restore()
    target.program(words)
    dump, _ = target.read_regs()
    stat, boot = dump[Reg.STAT], dump[Reg.BOOTSTS]
    booted = bool(stat & STAT_DONE_PIN) and bool(boot & BOOTSTS_VALID)
    print(f"case {case}: {len(words)} words, signature made with the wrong key")
    print(f"STAT={stat:08x} BOOTSTS={boot:08x} done={target.done()}")
    return booted


def attack_starbleed(device, words: int = 6) -> bool:
    """Flip the first encrypted header into a WBSTAR write and read fabric words back."""
    from .bitstream import encode_type1_header, Opcode

    image = read_bitstream(fixtures_dir() / "bitstreams" / "starbleed_fixture.bin")
    # known plaintext: an FDRI write covering the 3-frame payload
    known = encode_type1_header(Opcode.WRITE, Reg.FDRI, 3 * device.model.frame_length)
    target = SimTarget(device)
    recovered = []
    for k in range(1, words + 1):
        forged = encode_type1_header(Opcode.WRITE, Reg.WBSTAR, k)
        img = list(image)
        img[STARBLEED_FIRST_CIPHER] ^= known ^ forged
        target.restore()
        target.program(img)
        target.reset()
        dump, _ = target.read_regs()
        recovered.append(dump[Reg.WBSTAR])
    print("recovered fabric words: " + " ".join(f"{w:08x}" for w in recovered))
    return bool(recovered) and all(w == STARBLEED_PLANTED for w in recovered)


def cmd_attack(args) -> int:
    if args.name == "juststart":
        device = load_device(args.device or "default")
        ok = attack_juststart(device)
        if ok:
            print("PASS: device booted a bitstream with an invalid signature")
        elif device.fuses.aes_only:
            print("FAIL (expected): aes_only fuse rejects unencrypted configuration")
        else:
            print("FAIL: device did not boot")
    else:
        device = load_device(args.device or "open")
        ok = attack_starbleed(device, args.words)
        print(f"PASS: planted word {STARBLEED_PLANTED:08x} recovered through WBSTAR" if ok
              else "FAIL: planted word not recovered")
    return EXIT_OK if ok else EXIT_USAGE


# --- entry point -------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage, which here means "crashes found"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bitfuzz", description="Configuration bitstream fuzzer and simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("asm", help="render one case of a template to a raw bitstream")
    a.add_argument("template")
    a.add_argument("case", type=int)
    a.add_argument("out")
    a.add_argument("--device", default="default", help="device config (sets frame geometry)")
    a.set_defaults(func=cmd_asm)

    d = sub.add_parser("disasm", help="print the packet listing of a bitstream file")
    d.add_argument("file")
    d.set_defaults(func=cmd_disasm)

    f = sub.add_parser("fuzz", help="run or resume a campaign")
    f.add_argument("spec")
    f.add_argument("--target", action="append",
                   help="sim:<device> or tcp:<host>:<port>; repeat for several targets")
    f.add_argument("--workers", type=int, default=1, help="connections per target")
    f.add_argument("--max-crashes", type=int)
    f.add_argument("--shard", type=_parse_shard, default=(0, 1), metavar="I/K")
    f.add_argument("--out", help="campaign directory (default campaigns/<spec name>)")
    f.add_argument("--resume", action="store_true")
    f.add_argument("--budget", type=int, help="stop after this many cases")
    f.add_argument("--checkpoint-every", type=int)
    f.add_argument("--timeout", type=float, default=5.0)
    f.set_defaults(func=cmd_fuzz)

    c = sub.add_parser("crashes", help="inspect a crash database")
    c.add_argument("dir")
    c.add_argument("action", choices=("list", "show", "export"))
    c.add_argument("case", nargs="?", type=int, help="case index for show")
    c.add_argument("--format", choices=("json", "text"), default="json")
    c.add_argument("--output", help="write export to this file")
    c.add_argument("--listing", action="store_true", help="include a packet listing in show")
    c.set_defaults(func=cmd_crashes)

    s = sub.add_parser("serve", help="serve a simulated board over TCP")
    s.add_argument("--device", default="default")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7777)
    s.set_defaults(func=cmd_serve)

    r = sub.add_parser("replay", help="re-run recorded crashes on a target")
    r.add_argument("record", help="campaign dir, crashes.jsonl or exported JSON")
    r.add_argument("--target", default="sim:default")
    r.add_argument("--case", type=int)
    r.add_argument("--timeout", type=float, default=5.0)
    r.set_defaults(func=cmd_replay)

    k = sub.add_parser("attack", help="run an end-to-end attack demo")
    k.add_argument("name", choices=("juststart", "starbleed"))
    k.add_argument("--device")
    k.add_argument("--words", type=int, default=6, help="fabric words to recover (starbleed)")
    k.set_defaults(func=cmd_attack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TransportError, Unresponsive) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TARGET
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
