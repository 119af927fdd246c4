import json
import stat
import sys

import numpy as np
import pytest

from copnet.cli import main, read_config_file, read_report
from copnet.raster import BinaryMask, LabelMap, read_copf, read_pgm


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tissue(tmp_path_factory):
    d = tmp_path_factory.mktemp("tissue")
    assert run("synth", "--cells", 12, "--width", 64, "--height", 64, "--slices", 2, "--out", d) == 0
    return d


def test_synth_default_cells(tmp_path, capsys):
    assert run("synth", "--cells", 100, "--seed", 7, "--out", tmp_path) == 0
    contours = read_pgm(tmp_path / "synth_contours.pgm")
    labels = read_pgm(tmp_path / "synth_labels.pgm")
    assert isinstance(contours, BinaryMask) and contours.shape == (512, 512)
    assert isinstance(labels, LabelMap) and labels.n_labels == 100
    assert "100 cells" in capsys.readouterr().out
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 7 and m["status"] == 0
    assert len(m["outputs"]) == 2


def test_synth_single_cell(tmp_path):
    assert run("synth", "--cells", 1, "--width", 20, "--height", 10, "--thickness", 1, "--out", tmp_path) == 0
    bits = read_pgm(tmp_path / "synth_contours.pgm").bits
    assert bits.sum() == 2 * 20 + 2 * 8


def test_replay_is_bit_identical(tmp_path):
    assert run("synth", "--cells", 9, "--width", 48, "--height", 40, "--out", tmp_path) == 0
    before = {p.name: p.read_bytes() for p in tmp_path.glob("*.pgm")}
    for p in tmp_path.glob("*.pgm"):
        p.unlink()
    assert run("replay", tmp_path / "manifest.json") == 0
    after = {p.name: p.read_bytes() for p in tmp_path.glob("*.pgm")}
    assert before == after and len(before) == 2


def test_simulate_naming_and_determinism(tissue, tmp_path):
    gts = sorted(tissue.glob("*_contours.pgm"))
    args = ["simulate", *gts, "--reps", 2, "--T", 0.2, "--dt", 0.05]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b", "--jobs", 2) == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.copf"))
    assert names == [
        "synth_000_k0_degraded.copf",
        "synth_000_k1_degraded.copf",
        "synth_001_k0_degraded.copf",
        "synth_001_k1_degraded.copf",
    ]
    assert (tmp_path / "a" / "synth_000_gt.pgm").exists()
    for n in names:
        f = read_copf(tmp_path / "a" / n)
        assert f.values.min() >= 0 and f.values.max() <= 1
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    k0 = (tmp_path / "a" / names[0]).read_bytes()
    assert k0 != (tmp_path / "a" / names[1]).read_bytes()


def test_close_identity_and_history(tissue, tmp_path):
    src = tissue / "synth_000_contours.pgm"
    assert run("close", src, "--out", tmp_path) == 0
    closed = read_copf(tmp_path / "synth_000_closed.copf")
    assert np.array_equal(closed.values > 0.5, read_pgm(src).bits)
    hist = (tmp_path / "synth_000_history.csv").read_text().splitlines()
    assert hist == ["iteration,modified_fraction", "1,0.0"]


def test_close_sweep_emits_all_maps(tissue, tmp_path):
    src = tissue / "synth_000_contours.pgm"
    assert run("close", src, "--backend", "morphological:2", "--sweep", "--emit-iterations", "--out", tmp_path) == 0
    maps = sorted(tmp_path.glob("synth_000_it*.copf"))
    assert len(maps) == 31
    assert len((tmp_path / "synth_000_history.csv").read_text().splitlines()) == 31


def _script(tmp_path, name, body):
    p = tmp_path / name
    p.write_text(f"#!{sys.executable}\nimport sys\n{body}\n")
    p.chmod(p.stat().st_mode | stat.S_IXUSR)
    return p


def test_close_external(tissue, tmp_path):
    cp = _script(tmp_path, "copy.py", "import shutil; shutil.copyfile(sys.argv[1], sys.argv[2])")
    src = tissue / "synth_001_contours.pgm"
    assert run("close", src, "--backend", f"external:{cp}", "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "synth_001_closed.copf").exists()


def test_close_failure_sets_exit_code(tissue, tmp_path, capsys):
    bad = _script(tmp_path, "bad.py", "sys.exit(2)")
    src = tissue / "synth_001_contours.pgm"
    assert run("close", src, "--backend", f"external:{bad}", "--out", tmp_path / "o") == 1
    assert "synth_001" in capsys.readouterr().err
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["status"] == 1


def test_label_recovers_cells(tissue, tmp_path):
    assert run("label", tissue / "synth_000_contours.pgm", "--min-area", 0, "--out", tmp_path) == 0
    got = read_pgm(tmp_path / "synth_000_labels.pgm")
    assert got == read_pgm(tissue / "synth_000_labels.pgm")


def test_evaluate_perfect_prediction(tissue, tmp_path):
    labels = sorted(tissue.glob("*_labels.pgm"))
    contours = sorted(tissue.glob("*_contours.pgm"))
    out = tmp_path / "report.csv"
    assert run(
        "evaluate", "--pred-labels", *labels, "--gt-labels", *labels,
        "--pred-contours", *contours, "--gt-contours", *contours, "--interslice", "--out", out,
    ) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "slice,labelled,merged,split,nsd,cldice"
    assert lines[1] == "synth_000,100.000000,0.000000,0.000000,1.000000,1.000000"
    assert lines[3].startswith("summary,100.000000±0.000000")
    assert lines[4].startswith("interslice_cldice,")
    assert read_report(out, "labelled") == [100.0, 100.0]


def test_evaluate_length_mismatch(tissue, tmp_path):
    labels = sorted(tissue.glob("*_labels.pgm"))
    assert run("evaluate", "--pred-labels", *labels, "--gt-labels", labels[0], "--out", tmp_path / "r.csv") == 1


def test_stats_self_comparison(tmp_path, capsys):
    rep = tmp_path / "r.csv"
    rep.write_text("slice,labelled\n0,90\n1,80\n2,85\n3,70\nsummary,81.25±7.4\n")
    assert run("stats", rep, rep, "--out", tmp_path / "s.json") == 0
    res = json.loads((tmp_path / "s.json").read_text())
    assert res["p"] >= 0.5 and res["significant"] is False
    assert "significant=no" in capsys.readouterr().out


def test_stats_detects_shift(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("slice,labelled\n" + "".join(f"{i},{90 + i}\n" for i in range(6)))
    b.write_text("slice,labelled\n" + "".join(f"{i},{60 + i}\n" for i in range(6)))
    assert run("stats", a, b, "--out", tmp_path / "s.json") == 0
    res = json.loads((tmp_path / "s.json").read_text())
    assert res["U"] == 36 and res["significant"] is True


def test_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# synthetic run\ncells = 5\nwidth=40\nheight = 30\nstem = conf\n")
    assert read_config_file(cfg)["cells"] == "5"
    assert run("synth", "--config", cfg, "--out", tmp_path) == 0
    assert read_pgm(tmp_path / "conf_labels.pgm").n_labels == 5
    # flags beat the file
    assert run("synth", "--config", cfg, "--cells", 3, "--out", tmp_path) == 0
    assert read_pgm(tmp_path / "conf_labels.pgm").n_labels == 3
    cfg.write_text("bogus = 1\n")
    assert run("synth", "--config", cfg, "--out", tmp_path) == 1


def test_grid_rows(tmp_path):
    out = tmp_path / "g.csv"
    assert run(
        "grid", "--cells", 6, "--width", 48, "--height", 48, "--n1-values", "0,6", "--n2-values", "0",
        "--T", 0.1, "--backend", "morphological:2", "--min-area", 16, "--out", out,
    ) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n1,n2,labelled_mean,labelled_std,nsd_mean,nsd_std,cldice_mean,cldice_std"
    assert [l.split(",")[:2] for l in lines[1:]] == [["0", "0"], ["6", "0"]]


def test_missing_input_is_an_error(tmp_path):
    assert run("label", tmp_path / "nope.pgm", "--out", tmp_path) == 1
