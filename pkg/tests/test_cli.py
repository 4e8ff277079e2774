import csv
import json

import pytest

from dnlab.cli import main
from dnlab.reports import load_manifest


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_dn_smoke_and_manifest(tmp_path, capsys):
    out = tmp_path / "dn"
    code, text, _ = run(["dn", "--resolution", "32", "--out", str(out)], capsys)
    assert code == 0
    assert text.startswith("PASS dn_map")
    man = load_manifest(out / "manifest.json")
    assert man["passed"] and any(f["path"] == "dn.csv" for f in man["files"])


def test_same_seed_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["verify-identities", "--resolution", "32", "--seed", "3", "--out", str(d)], capsys)[0] == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_empty_config_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "empty.ini"
    cfg.write_text("")
    code, _, err = run(["dn", "--config", str(cfg)], capsys)
    assert code == 2 and "error" in err


def test_config_runs_command(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[run]\ncommand = dn\nresolution = 32\nout = {tmp_path / 'cfg'}\n")
    assert run(["--config", str(cfg)], capsys)[0] == 0
    assert (tmp_path / "cfg" / "manifest.json").exists()


def test_unknown_command(capsys):
    assert run(["frobnicate"], capsys)[0] == 2


def test_report_bad_manifest(tmp_path, capsys):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    assert run(["report", str(bad)], capsys)[0] == 2
    assert run(["report", str(tmp_path / "missing.json")], capsys)[0] == 2


def test_runge_summary_matches_csv(tmp_path, capsys):
    out = tmp_path / "runge"
    code, _, _ = run(["runge", "--resolution", "32", "--out", str(out)], capsys)
    assert code == 0
    code, text, _ = run(["report", str(out), "--verify"], capsys)
    assert code == 0 and text.startswith("PASS runge")
    fields = dict(kv.split("=", 1) for kv in text.split()[2:])
    with open(out / "runge.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert int(fields["iterations"]) == len(rows) - 1
    first, last = float(rows[0]["residual"]), float(rows[-1]["residual"])
    assert float(fields["final_relative_residual"]) == pytest.approx(last / first, rel=1e-9)
    consts = json.loads((out / "constants.json").read_text())
    assert set(consts) == {"K", "C", "sigma0", "alpha"}


def test_report_flags_failure(tmp_path, capsys):
    out = tmp_path / "ev"
    code, _, err = run(["evolve", "--resolution", "32", "--out", str(out)], capsys)
    # the tautological halving ratio degrades on the coarse mesh; a failing suite exits 1
    assert code == 1 and "failed" in err
    code, text, _ = run(["report", str(out)], capsys)
    assert code == 1 and any(ln.startswith("FAIL") for ln in text.splitlines())


def test_stability_and_recurrence(tmp_path, capsys):
    assert run(["stability", "--resolution", "32", "--out", str(tmp_path / "s")], capsys)[0] == 0
    assert json.loads((tmp_path / "s" / "fit.json").read_text())
    assert run(["recurrence", "--out", str(tmp_path / "r")], capsys)[0] == 0


def test_malformed_config_value(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\ncommand = dn\nresolution = many\n")
    assert run(["--config", str(cfg)], capsys)[0] == 2


def test_config_keys_case_sensitive(tmp_path, capsys):
    cfg = tmp_path / "rec.ini"
    cfg.write_text(f"[run]\ncommand = recurrence\nout = {tmp_path / 'rec'}\n"
                   "[recurrence]\nC = 1.0\nsigma0 = 3.0\nsteps = 100\n")
    code, _, err = run(["--config", str(cfg)], capsys)
    assert code == 2 and "C = 1.0" in err
