import json
import socket
import subprocess
import sys

import pytest

from bitfuzz.bitstream import SYNC_WORD, read_bitstream, write_bitstream
from bitfuzz.cli import EXIT_CRASHES, EXIT_OK, EXIT_TARGET, EXIT_USAGE, main
from conftest import spec_path, template_path


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def test_asm_matches_golden(capsys, tmp_path, fix):
    out = tmp_path / "case0.bin"
    rc, text, _ = run(capsys, "asm", template_path("juststart"), 0, out)
    assert rc == EXIT_OK and "of 32768" in text
    assert out.read_bytes() == (fix / "bitstreams" / "juststart_case0.bin").read_bytes()


def test_asm_case_out_of_range(capsys, tmp_path):
    rc, _, err = run(capsys, "asm", template_path("juststart"), 32768, tmp_path / "x.bin")
    assert rc == EXIT_USAGE and "outside" in err


def test_asm_bad_template(capsys, tmp_path):
    bad = tmp_path / "t.json"
    bad.write_text(json.dumps({"name": "t", "children": [{"type": "Wobble"}]}))
    rc, _, err = run(capsys, "asm", bad, 0, tmp_path / "x.bin")
    assert rc == EXIT_USAGE and err.startswith("error:")
    rc, _, _ = run(capsys, "asm", tmp_path / "missing.json", 0, tmp_path / "x.bin")
    assert rc == EXIT_USAGE


def test_disasm_golden(capsys, fix):
    rc, text, _ = run(capsys, "disasm", fix / "bitstreams" / "juststart_case0.bin")
    assert rc == EXIT_OK
    rdw = [line for line in text.splitlines() if line.endswith(": 0000 0016")]
    assert rdw and "WRITE reg=CMD" in rdw[-1]


def test_disasm_syncless(capsys, tmp_path):
    p = tmp_path / "blob.bin"
    write_bitstream(p, [1, 2, 3, 4])
    rc, text, _ = run(capsys, "disasm", p)
    lines = text.splitlines()
    assert rc == EXIT_OK and len(lines) == 1 and " BLOB 4 words" in lines[0]


def test_argparse_errors_are_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fuzz"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["fuzz", "x", "--shard", "4/4"])
    assert exc.value.code == EXIT_USAGE


# --- fuzz / crashes / replay --------------------------------------------------------------------


@pytest.fixture(scope="module")
def juststart_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("camp") / "js"
    assert main(["fuzz", str(spec_path("juststart")), "--out", str(d)]) == EXIT_CRASHES
    return d


def test_fuzz_summary_and_db(juststart_dir):
    man = json.loads((juststart_dir / "manifest.json").read_text())
    assert man["complete"] and man["stop_reason"] == "complete" and man["crashes"] == 78
    assert len((juststart_dir / "crashes.jsonl").read_text().splitlines()) == 78


def test_fuzz_aes_only_clean(capsys, tmp_path):
    spec = json.loads(spec_path("juststart").read_text())
    spec["device"] = "builtin:devices/aes_only.json"
    spec["requests"] = [str(template_path("juststart"))]
    p = tmp_path / "aes.json"
    p.write_text(json.dumps(spec))
    rc, text, _ = run(capsys, "fuzz", p, "--out", tmp_path / "out", "--workers", 2)
    assert rc == EXIT_OK and "0 crashes" in text and "32768 cases" in text


def test_fuzz_default_out_dir(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc, text, _ = run(capsys, "fuzz", spec_path("juststart"), "--budget", 10)
    assert rc == EXIT_OK and "stop=budget" in text
    assert (tmp_path / "campaigns" / "juststart" / "manifest.json").exists()


def test_fuzz_resume(capsys, tmp_path):
    d = tmp_path / "r"
    rc, text, _ = run(capsys, "fuzz", spec_path("juststart"), "--out", d, "--budget", 3300)
    assert rc == EXIT_CRASHES and "stop=budget" in text
    rc, text, _ = run(capsys, "fuzz", spec_path("juststart"), "--out", d, "--resume")
    assert rc == EXIT_CRASHES and "78 crashes" in text and "stop=complete" in text


def test_fuzz_unreachable_tcp(capsys, tmp_path):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    rc, _, err = run(capsys, "fuzz", spec_path("juststart"), "--target", f"tcp:127.0.0.1:{port}",
                     "--out", tmp_path / "x")
    assert rc == EXIT_TARGET and "cannot reach" in err


def test_fuzz_bad_spec(capsys, tmp_path):
    rc, _, _ = run(capsys, "fuzz", tmp_path / "nope.json")
    assert rc == EXIT_USAGE


def test_crashes_list(capsys, juststart_dir):
    rc, text, _ = run(capsys, "crashes", juststart_dir, "list")
    lines = text.splitlines()
    assert rc == EXIT_OK and lines[-1] == "78 crashes"
    assert any(line.split()[0] == "3232" for line in lines[1:-1])


def test_crashes_show_bit_names(capsys, juststart_dir):
    rc, text, _ = run(capsys, "crashes", juststart_dir, "show", 3232, "--listing")
    assert rc == EXIT_OK
    assert "BIT14_DONE_PIN=1" in text and "STAT.crash_if_some_bits_in_mask_set=00016000" in text
    assert "listing:" in text and "WRITE reg=CMD" in text


def test_crashes_show_errors(capsys, juststart_dir, tmp_path):
    assert run(capsys, "crashes", juststart_dir, "show")[0] == EXIT_USAGE
    assert run(capsys, "crashes", juststart_dir, "show", 1)[0] == EXIT_USAGE
    assert run(capsys, "crashes", tmp_path / "missing", "list")[0] == EXIT_USAGE


def test_crashes_empty_db(capsys, tmp_path):
    rc, text, _ = run(capsys, "crashes", tmp_path, "list")
    assert rc == EXIT_OK and text.splitlines()[-1] == "0 crashes"


def test_export_roundtrips_through_replay(capsys, juststart_dir, tmp_path):
    out = tmp_path / "export.json"
    assert run(capsys, "crashes", juststart_dir, "export", "--output", out)[0] == EXIT_OK
    assert len(json.loads(out.read_text())) == 78
    rc, text, _ = run(capsys, "replay", out)
    assert rc == EXIT_OK and text.splitlines()[-1] == "78/78 records reproduced"
    rc, text, _ = run(capsys, "crashes", juststart_dir, "export", "--format", "text")
    assert text.count("outcome=normal") == 78


def test_replay_divergence(capsys, juststart_dir):
    rc, text, _ = run(capsys, "replay", juststart_dir, "--case", 3232, "--target", "sim:aes_only")
    assert rc == EXIT_OK and "case 3232: DIVERGED" in text and text.splitlines()[-1] == "0/1 records reproduced"


# --- serve / attack ------------------------------------------------------------------------------


def test_serve_port_in_use(capsys):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    try:
        rc, _, err = run(capsys, "serve", "--port", s.getsockname()[1])
    finally:
        s.close()
    assert rc == EXIT_TARGET and "cannot listen" in err


def test_serve_subprocess_and_tcp_fuzz(capsys, tmp_path):
    proc = subprocess.Popen([sys.executable, "-m", "bitfuzz.cli", "serve", "--port", "0"],
                            stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        port = int(line.rsplit(":", 1)[1])
        rc, text, _ = run(capsys, "fuzz", spec_path("juststart"), "--target", f"tcp:127.0.0.1:{port}",
                          "--out", tmp_path / "t", "--budget", 200)
        assert rc == EXIT_CRASHES and "200 cases" in text
        rc, _, _ = run(capsys, "fuzz", spec_path("juststart"), "--out", tmp_path / "s", "--budget", 200)
        assert (tmp_path / "t" / "crashes.jsonl").read_bytes() == (tmp_path / "s" / "crashes.jsonl").read_bytes()
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_attack_juststart(capsys):
    rc, text, _ = run(capsys, "attack", "juststart")
    assert rc == EXIT_OK and text.splitlines()[-1].startswith("PASS")


def test_attack_juststart_aes_only(capsys):
    rc, text, _ = run(capsys, "attack", "juststart", "--device", "aes_only")
    assert rc == EXIT_USAGE and text.splitlines()[-1].startswith("FAIL (expected)")


def test_attack_starbleed(capsys):
    rc, text, _ = run(capsys, "attack", "starbleed", "--words", 3)
    assert rc == EXIT_OK
    assert "recovered fabric words: deadc0de deadc0de deadc0de" in text


def test_module_entry_point(tmp_path):
    p = tmp_path / "s.bin"
    write_bitstream(p, [SYNC_WORD, 0x20000000])
    res = subprocess.run([sys.executable, "-m", "bitfuzz.cli", "disasm", str(p)], capture_output=True, text=True)
    assert res.returncode == 0 and "@1 TYPE1 NOP" in res.stdout
    assert read_bitstream(p) == [SYNC_WORD, 0x20000000]
