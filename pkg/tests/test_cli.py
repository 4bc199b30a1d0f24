import json
import subprocess
import sys

import pytest

from nfimaging import cli

RUNS = 120


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and not p.name.startswith("manifest")}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "run"
    codes = [cli.main(["simulate", "--seed", "3", "--runs", str(RUNS), "--out", str(d)]),
             cli.main(["detect", "--in", str(d)]),
             cli.main(["figures", "--in", str(d)])]
    return d, codes


def test_pipeline_succeeds(pipeline):
    d, codes = pipeline
    assert codes == [0, 0, 0]
    assert len(list((d / "series").glob("series_*.nfs"))) == RUNS
    summary = json.loads((d / "summary.json").read_text())
    assert summary["n_series"] == RUNS and 0 <= summary["p_false"] <= 1
    report = (d / "figures" / "report.txt").read_text()
    for key in cli.FIGURES:
        assert (d / "figures" / f"{key}.png").exists()
        assert any(line.startswith(key) for line in report.splitlines())


def test_figures_rerun_is_byte_identical(pipeline, tmp_path):
    d, _ = pipeline
    assert cli.main(["figures", "s3", "fig2", "--in", str(d), "--out", str(tmp_path / "f")]) == 0
    again = _files(tmp_path / "f")
    ref = _files(d / "figures")
    assert again and all(ref[k] == v for k, v in again.items() if k != "report.txt")


def test_simulate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--seed", "5", "--runs", "3", "--ascii", "--out", str(tmp_path / name)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and "truth.csv" in a and "spcm.csv" in a


def test_zero_runs_writes_manifest_only(tmp_path):
    assert cli.main(["simulate", "--runs", "0", "--out", str(tmp_path / "z")]) == 0
    assert [p.name for p in (tmp_path / "z").iterdir()] == ["manifest.json"]
    man = json.loads((tmp_path / "z" / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["parameters"]["runs"] == 0


def test_invalid_input_exit_codes(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["detect", "--in", str(tmp_path / "empty")]) == cli.EXIT_INPUT
    assert cli.main(["figures", "bogus", "--in", str(tmp_path / "empty")]) == cli.EXIT_INPUT
    assert cli.main(["figures", "s2", "--in", str(tmp_path / "empty")]) == cli.EXIT_INPUT
    assert cli.main(["simulate", "--runs", "-1", "--out", str(tmp_path / "n")]) == cli.EXIT_INPUT
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "n")]) == 2
    assert "error:" in capsys.readouterr().err


def test_too_little_data_is_an_input_error(tmp_path):
    d = tmp_path / "small"
    assert cli.main(["simulate", "--runs", "5", "--out", str(d)]) == 0
    assert cli.main(["detect", "--in", str(d)]) == 0
    assert cli.main(["figures", "s2", "--in", str(d)]) == cli.EXIT_INPUT


def test_unwritable_output_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["simulate", "--runs", "0", "--out", str(blocker / "out")]) == cli.EXIT_IO


def test_argument_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--out", "x", "--jobs", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "nfimaging.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "nfimaging" in r.stdout
