import json

import numpy as np
import pytest

from interspec import cli
from interspec.dataset import load_dataset
from interspec.errors import InfeasibleError
from interspec.geometry import build_v_cavity, cached_kernel, eigendecompose, load_kernel
from interspec.imageio import read_facet_csv, read_png16, write_facet_csv
from interspec.inverse import build_basis
from interspec.net.train import evaluate_predictions
from interspec.render import render_panel_batch, render_panel_image
from interspec.report import build_report
from interspec.spectra import (
    load_camera,
    load_illuminant,
    load_munsell_matrix,
    munsell_notations,
    write_spectral_csv,
)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_kernel_command(tmp_path):
    out = tmp_path / "k.bin"
    assert run("kernel", "--angle", 45, "-o", out) == 0
    assert np.array_equal(load_kernel(out).matrix, cached_kernel(45, 10).matrix)
    m = json.loads((tmp_path / "k.bin.manifest.json").read_text())
    assert m["command"] == "kernel" and m["config"]["angle"] == 45.0 and "tool_version" in m


def test_render_png_and_csv(tmp_path):
    out = tmp_path / "red.png"
    assert run("render", "--reflectance", "5R 4/14", "--tone", 0.5, "-o", out) == 0
    img = read_facet_csv(tmp_path / "red.csv")
    cam, d65 = load_camera("xyz"), load_illuminant("d65")
    r = load_munsell_matrix()[munsell_notations().index("5R 4/14")]
    ref = render_panel_image(build_v_cavity(45, 1, 10), eigendecompose(cached_kernel(45, 10)), r, d65, cam)
    assert np.array_equal(img, ref)
    from interspec.dataset import unit_signal

    png = read_png16(out)
    assert png.shape == (10, 10, 3)
    expect = np.round(np.clip(ref * 0.5 / unit_signal(cam), 0, 1) * 65535)
    assert np.array_equal(png, expect)


def test_facet_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("facet_row,facet_col,ch1\n0,0,1\n0,1,2\n")
    from interspec.errors import ParseError

    with pytest.raises(ParseError):
        read_facet_csv(p)
    p.write_text("a,b\n")
    with pytest.raises(ParseError):
        read_facet_csv(p)


def test_dataset_gen_config_and_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"patches": "0:6", "illuminants": "d65", "split": 0.5, "output": str(tmp_path / "a.ds")}))
    assert run("dataset", "gen", "--config", cfg) == 0
    a = load_dataset(tmp_path / "a.ds")
    assert len(a) == 6 and a.manifest["illuminants"] == ["D65"] and a.normalizer is not None
    # flags win over the file
    assert run("dataset", "gen", "--config", cfg, "--patches", "0:4", "-o", tmp_path / "b.ds") == 0
    assert len(load_dataset(tmp_path / "b.ds")) == 4
    # rerunning from the manifest is bit-identical
    assert run("dataset", "gen", "--config", tmp_path / "a.ds.manifest.json", "-o", tmp_path / "c.ds") == 0
    assert (tmp_path / "a.ds").read_bytes() == (tmp_path / "c.ds").read_bytes()
    assert run("dataset", "info", tmp_path / "a.ds") == 0


def test_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"no_such_option": 1}))
    assert run("dataset", "gen", "--config", cfg, "-o", tmp_path / "x.ds") == 2
    (tmp_path / "broken.json").write_text("{")
    assert run("dataset", "gen", "--config", tmp_path / "broken.json", "-o", tmp_path / "x.ds") == 2
    assert run("dataset", "gen", "--patches", "5000", "-o", tmp_path / "x.ds") == 2
    assert run("render", "--reflectance", "0") == 2  # argparse: missing -o
    assert run("dataset", "info", tmp_path / "missing.ds") == 3
    (tmp_path / "junk.ds").write_bytes(b"0" * 100)
    assert run("dataset", "info", tmp_path / "junk.ds") == 3
    assert run("render", "--reflectance", "0", "--camera", tmp_path / "none.csv", "-o", tmp_path / "x.png") == 3


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    import interspec.experiments as ex

    def boom(*a, **k):
        raise InfeasibleError("no light")

    monkeypatch.setattr(ex, "construct_metameric_light", boom)
    out = tmp_path / "met"
    assert run("metamer", "-o", out) == 4
    assert not out.exists()


def test_train_eval_report(tmp_path):
    ds = tmp_path / "d.ds"
    assert run("dataset", "gen", "--patches", "0:20", "--illuminants", "d65,planck:5000", "-o", ds) == 0
    ck = tmp_path / "m.ck"
    assert run("train", "--dataset", ds, "--epochs", 1, "--c1", 4, "--c2", 4, "--c3", 8, "--hidden", 16, "-o", ck) == 0
    assert (tmp_path / "m.log.csv").read_text().startswith("epoch,lr,L_R")
    ev = tmp_path / "runs" / "ev"
    assert run("eval", "--checkpoint", ck, "--dataset", ds, "-o", ev) == 0
    s = json.loads((ev / "eval_summary.json").read_text())
    assert s["count"] == 4 and "spd_rmse_avg" in s and "rmse_p95" in s
    assert (ev / "eval_spectra.csv").exists()
    res = build_report(tmp_path / "runs")
    assert len(res.tables["metrics"]) == 1 and not res.missing
    assert (tmp_path / "runs" / "report" / "spectra" / "spectra.gp").exists()
    # a checkpoint trained on 3 channels does not match a 1-channel dataset
    cam = tmp_path / "mono.csv"
    write_spectral_csv(cam, np.arange(400, 701, 5), np.ones(61))
    assert run("dataset", "gen", "--patches", "0:4", "--illuminants", "d65", "--camera", cam, "-o", tmp_path / "m.ds") == 0
    assert run("eval", "--checkpoint", ck, "--dataset", tmp_path / "m.ds", "-o", tmp_path / "ev2") == 2


def test_eval_identical_predictions_zero():
    R = load_munsell_matrix()[:10]
    rep = evaluate_predictions(R, R, R, R)
    for k in ("rmse_avg", "rmse_max", "rmse_p95", "pd_avg", "de00_avg", "spd_rmse_avg"):
        assert rep.summary[k] == pytest.approx(0, abs=1e-12)


def test_estimate_command(tmp_path):
    M = load_munsell_matrix()
    B = build_basis(M, 4)
    P = B.span()
    r = P @ (P.T @ M[300])
    img = render_panel_batch(eigendecompose(cached_kernel(45, 10)), 10, r[None], load_illuminant("d50").values, load_camera("xyz"))[0]
    write_facet_csv(tmp_path / "patch.csv", img)
    out = tmp_path / "refl.csv"
    assert run("estimate", "--image", tmp_path / "patch.csv", "--illuminant", "d50", "--k", 4, "-o", out) == 0
    from interspec.spectra import read_spectral_csv

    wl, vals = read_spectral_csv(out)
    assert len(wl) == 61
    assert np.sqrt(np.mean((vals[:, 0] - r) ** 2)) < 1e-4
    diag = json.loads((tmp_path / "refl.json").read_text())
    assert diag["converged"] and not diag["ambiguous"]


def test_metamer_command(tmp_path):
    out = tmp_path / "met"
    assert run("metamer", "--patch", "5YR 4/4", "--illuminant", "e", "-o", out) == 0
    s = json.loads((out / "metamer_summary.json").read_text())
    assert s["flat_max_rel_diff"] < 1e-6 and s["folded_max_rel_diff"] > 0.01
    for name in ("flat_original.png", "folded_metamer.csv", "folded_difference.csv", "lights.csv"):
        assert (out / name).exists()
    # white under white: the metameric light is the original one
    white = tmp_path / "white.csv"
    write_spectral_csv(white, np.arange(400, 701, 5), np.ones(61))
    assert run("metamer", "--patch", white, "--illuminant", "e", "-o", tmp_path / "w") == 0
    s = json.loads((tmp_path / "w" / "metamer_summary.json").read_text())
    assert s["folded_max_rel_diff"] == 0.0


def test_report_empty_and_missing(tmp_path, caplog):
    res = build_report(tmp_path)
    assert res.warnings and (tmp_path / "report" / "report.md").exists()
    run_dir = tmp_path / "r"
    run_dir.mkdir()
    (run_dir / "manifest.json").write_text(json.dumps({"command": "eval", "outputs": ["eval_summary.json"]}))
    res = build_report(run_dir)
    assert res.missing == ["eval_summary.json"]
    assert "Missing artifacts" in (run_dir / "report" / "report.md").read_text()
    assert run("report", tmp_path / "nothing_here") == 0


def test_report_angle_table(tmp_path):
    (tmp_path / "angle_study.csv").write_text(
        "train_angles,test_angle,rmse_avg,pd_avg,de00_avg,spd_rmse_avg\n45,45,0.01,0.02,0.8,0.02\n150,150,0.03,0.05,4.0,0.04\n"
    )
    res = build_report(tmp_path)
    assert [r[:2] for r in res.tables["angle_study"]] == [["45", "45"], ["150", "150"]]
    md = (tmp_path / "report" / "report.md").read_text()
    assert "| 150 | 150 | 0.0300 |" in md


def test_angle_study_command(tmp_path):
    out = tmp_path / "as"
    argv = ["angle-study", "--patches", "0:12", "--illuminants", "d65", "--row", "45", "--row", "30+60:45",
            "--epochs", 1, "--c1", 4, "--c2", 4, "--c3", 8, "--hidden", 16, "--split", 0.75, "-o", out]
    assert run(*argv) == 0
    lines = (out / "angle_study.csv").read_text().splitlines()
    assert lines[0].startswith("train_angles,test_angle") and len(lines) == 3
    assert lines[2].startswith("30+60,45,")
    # cached checkpoints are reused on a rerun
    before = sorted(p.stat().st_mtime_ns for p in out.glob("train_*.ck"))
    assert run(*argv) == 0
    assert sorted(p.stat().st_mtime_ns for p in out.glob("train_*.ck")) == before
