import json

import pytest

from svflow.experiments import cli

KERNEL = ["--override", "num_seeds=12", "--override", "sizes=[16, 64]"]


def test_check_passes(capsys):
    assert cli.main(["check"]) == 0
    out = capsys.readouterr().out
    assert "all checks passed" in out and "FAIL" not in out


def test_missing_config_exits_2(tmp_path, capsys):
    path = tmp_path / "missing.json"
    assert cli.main(["vmf", "--config", str(path)]) == 2
    assert str(path) in capsys.readouterr().err


def test_unknown_override_exits_2(capsys):
    assert cli.main(["kernel", "--override", "colour=1"]) == 2
    assert "colour" in capsys.readouterr().err


def test_bad_seed_is_usage_error():
    with pytest.raises(SystemExit) as e:
        cli.main(["kernel", "--seed", "-3"])
    assert e.value.code == 2


def test_run_failure_exits_1(tmp_path, capsys):
    # a quadrature resolution of 2 nodes cannot converge
    assert cli.main(["kernel", "--out", str(tmp_path), "--override", "resolution=2"] + KERNEL) == 1
    assert "QuadratureError" in capsys.readouterr().err


def test_seed_changes_values_not_schema(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["kernel", "--out", str(a), "--seed", "1"] + KERNEL) == 0
    assert cli.main(["kernel", "--out", str(b), "--seed", "2"] + KERNEL) == 0
    assert cli.main(["kernel", "--out", str(c), "--seed", "1"] + KERNEL) == 0
    ta, tb, tc = (p.joinpath("kernel/errors.csv").read_text() for p in (a, b, c))
    assert ta == tc and ta != tb
    assert ta.splitlines()[:2] == tb.splitlines()[:2]
    assert json.loads(a.joinpath("config.json").read_text())["seed"] == 1


def test_print_config(capsys):
    assert cli.main(["vmf", "--print-config", "--seed", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 5
