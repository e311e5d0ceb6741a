import json
import shutil
import threading

import pytest

from mlo_ptrl.bridge import make_server
from mlo_ptrl.cli import compare_report, load_runs, main
from mlo_ptrl.wlan import desk_scenario

FAST = ["--scenario", "desk", "--steps", "60", "--set", "n_steps=10", "--set", "batch_size=8",
        "--set", "hidden_dim=8", "--set", "mlp_hidden_dim=8", "--set", "ep_buffer_size=10"]


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and "checkpoints" not in p.parts}


def test_manifest_echoes_defaults(tmp_path):
    assert main(["run", "--scenario", "desk", "--steps", "0", "--out-dir", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    t = m["train"]
    assert (t["gamma"], t["alpha"], t["buffer_size"], t["batch_size"]) == (0.99, 0.1, 2000, 64)
    assert m["variants"]["oVDN_g"]["sigma"] == 1.0


def test_unknown_key_rejected_before_training(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", *FAST, "--set", "gamme=0.5", "--out-dir", str(out)]) == 2
    assert "gamme" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize("bad", ["gamma=abc", "gamma=0", "band.7.num_channels=3", "experience_mode=all", "nokey"])
def test_bad_overrides(tmp_path, bad):
    assert main(["run", *FAST, "--set", bad, "--out-dir", str(tmp_path / "o")]) == 2


def test_band_override(tmp_path):
    assert main(["run", "--scenario", "desk", "--steps", "0", "--set", "band.5.bandwidth_mhz=40",
                 "--out-dir", str(tmp_path)]) == 0
    bands = json.loads((tmp_path / "manifest.json").read_text())["scenario"]["bands"]
    assert next(b for b in bands if b["band_id"] == "5")["bandwidth_mhz"] == 40


def test_deterministic_and_manifest_rerun(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["run", *FAST, "--variant", "oVDN_g", "--seeds", "1", "2", "--out-dir", str(a)]) == 0
    assert main(["run", *FAST, "--variant", "oVDN_g", "--seeds", "1", "2", "--out-dir", str(b)]) == 0
    assert main(["run", "--manifest", str(a / "manifest.json"), "--out-dir", str(c)]) == 0
    ta = read_tree(a)
    assert any(k.startswith("metrics/") for k in ta) and "runs/oVDN_g/seed_2/log.csv" in ta
    assert ta == read_tree(b) == read_tree(c)


def test_compare_needs_two_variants(tmp_path):
    out = tmp_path / "o"
    assert main(["run", *FAST, "--variant", "oVDN", "--seeds", "0", "--out-dir", str(out)]) == 0
    assert main(["compare", "--from-dir", str(out), "--out-dir", str(tmp_path / "cmp")]) == 2


def test_self_compare_is_zero(tmp_path):
    out = tmp_path / "o"
    assert main(["run", *FAST, "--variant", "oVDN", "--seeds", "0", "1", "--out-dir", str(out)]) == 0
    shutil.copytree(out / "runs" / "oVDN", out / "runs" / "twin")
    rows = compare_report(load_runs(out, ["oVDN", "twin"]))
    assert len(rows) == 3 * 2 and all(r["theta"] == 0.0 for r in rows)


def test_three_variants_three_pairs(tmp_path, capsys):
    args = ["compare", *FAST, "--seeds", "0", "--out-dir", str(tmp_path)]
    for v in ("oVDN", "VDN", "non-PTRL"):
        args += ["--variant", v]
    assert main(args) == 0
    text = capsys.readouterr().out
    assert "3 pairwise comparison(s)" in text
    rows = (tmp_path / "compare.csv").read_text().splitlines()[1:]
    assert len(rows) == 3 * 3 * 2


def test_compare_from_dir_reads_runs(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", *FAST, "--variant", "oVDN_g", "--variant", "non-PTRL", "--seeds", "0", "1",
                 "--out-dir", str(out)]) == 0
    assert main(["compare", "--from-dir", str(out), "--out-dir", str(tmp_path / "c")]) == 0
    assert "1 pairwise comparison(s)" in capsys.readouterr().out
    first = (tmp_path / "c" / "compare.csv").read_text().splitlines()[1]
    # X/Y follow the order given on the command line, not alphabetical order
    assert first.startswith("oVDN_g,non-PTRL,")


def test_missing_scenario_file(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)]) in (1, 2)


def test_run_through_bridge(tmp_path):
    srv = make_server(desk_scenario())
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        host, port = srv.server_address[:2]
        assert main(["run", *FAST, "--seeds", "0", "1", "--bridge", f"{host}:{port}",
                     "--out-dir", str(tmp_path / "br")]) == 0
    finally:
        srv.shutdown()
        srv.server_close()
    assert main(["run", *FAST, "--seeds", "0", "1", "--out-dir", str(tmp_path / "in")]) == 0
    assert read_tree(tmp_path / "br") == read_tree(tmp_path / "in")
