from __future__ import annotations

import pytest

from aamgan.bench import CSV_COLUMNS, read_results_csv
from aamgan.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from aamgan.data import write_pts


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "16", "--out", str(d), "--seed", "3"]) == EXIT_OK
    assert main(["build-model", "--manifest", str(d / "manifest.csv"), "--out", str(d)]) == EXIT_OK
    return d


def test_synth_outputs(workdir):
    assert (workdir / "face_0015.pgm").exists() and (workdir / "face_0015.pts").exists()
    assert len((workdir / "manifest.csv").read_text().strip().splitlines()) >= 16


def test_fit_prints_report(workdir, capsys):
    code = main(["fit", "--model", str(workdir / "model.aamg"), "--image", str(workdir / "face_0001.pgm"),
                 "--pts", str(workdir / "face_0001.pts"), "--init-perturb", "0.03", "--out", str(workdir)])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    for key in ("iterations:", "cost trace:", "mean error / iod:", "p_final:"):
        assert key in out
    assert (workdir / "fit.pts").exists()


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["bench", "--methods", "gd,telepathy"]) == EXIT_USAGE
    assert main(["fit", "--method", "nope"]) == EXIT_USAGE
    assert main(["synth"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("fit.max_iterz = 3\n")
    assert main(["fit", "--config", str(bad)]) == EXIT_USAGE
    bad.write_text("nosection = 3\n")
    assert main(["fit", "--config", str(bad)]) == EXIT_USAGE


def test_data_errors(tmp_path, workdir, capsys):
    assert main(["build-model", "--manifest", str(tmp_path / "none.csv")]) == EXIT_DATA
    assert "none.csv" in capsys.readouterr().err
    broken = tmp_path / "broken.aamg"
    broken.write_bytes((workdir / "model.aamg").read_bytes()[:100])
    assert main(["fit", "--model", str(broken)]) == EXIT_DATA
    assert main(["fit", "--model", str(workdir / "model.aamg"), "--method", "gan",
                 "--image", str(workdir / "face_0001.pgm"), "--pts", str(workdir / "face_0001.pts")]) == EXIT_DATA
    assert main(["fit", "--model", str(workdir / "model.aamg"), "--image",
                 str(workdir / "face_0001.pgm")]) == EXIT_DATA


def test_numeric_failure(tmp_path, workdir):
    far = tmp_path / "far.pts"
    far.write_text(write_pts(_far_shape(workdir)))
    code = main(["fit", "--model", str(workdir / "model.aamg"), "--image", str(workdir / "face_0001.pgm"),
                 "--init-pts", str(far), "--method", "cgd"])
    assert code == EXIT_NUMERIC


def _far_shape(workdir):
    from aamgan.data import read_pts
    return read_pts(workdir / "face_0001.pts") + 5000.0


def test_small_bench_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("bench.n_train = 16\nbench.n_validation = 0\nbench.n_test = 3\nbench.overlays = 1\n")
    out = tmp_path / "run"
    code = main(["bench", "--seed", "1", "--config", str(cfg), "--out", str(out), "--methods", "gd,cgd"])
    text = capsys.readouterr().out
    assert code == EXIT_OK
    assert "Convergence Rate (%)" in text
    rows = read_results_csv(out / "results.csv", drop_timing=False)
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 1 + 2 * 3
    assert (out / "ced.csv").exists() and (out / "config.txt").exists()
    assert len(list((out / "overlays").glob("*.pgm"))) == 2
