import os

import pytest

from sparsefrac.cli import ConfigError, RunConfig, format_config, main, parse_config
from sparsefrac.mm import SolveReport

SMALL = "[problem]\nN = 17\n[output]\nverbosity = 0\n"


def write(tmp_path, text, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_round_trip_of_defaults():
    cfg = RunConfig()
    again = parse_config(format_config(cfg))
    assert format_config(again) == format_config(cfg)
    assert again.mm == cfg.mm
    assert again.experiment.parameters() == {**cfg.experiment.parameters(), "pattern": None}


def test_round_trip_2d():
    cfg = parse_config("[experiment]\npreset = example_2d\n[problem]\np = 0.7\n")
    assert cfg.sweep == "p"
    assert format_config(parse_config(format_config(cfg))) == format_config(cfg)


@pytest.mark.parametrize("text, fragment", [
    ("[problem]\nbogus = 1\n", "c:2: unknown key 'bogus'"),
    ("[problem\nN = 3\n", "c:1: malformed section header"),
    ("[nowhere]\n", "c:1: unknown section"),
    ("N = 3\n", "c:1: key outside"),
    ("[problem]\nN = 3\nN = 4\n", "c:3: duplicate key"),
    ("[problem]\nN\n", "c:2: expected 'key = value'"),
    ("[mm]\nb = two\n", "c:2: bad value"),
    ("[mm]\nb = 0.5\n", "invalid configuration"),
    ("[experiment]\nsweep = alpha\n", "invalid configuration"),
])
def test_config_errors_cite_lines(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text, "c")


def test_comments_and_none():
    cfg = parse_config("# top\n[problem]\nM = none ; unset\n[experiment]\ngamma_list = 0, 2.5\n")
    assert cfg.experiment.parameters()["M"] is None
    assert cfg.experiment.gamma_list == [0.0, 2.5]


def test_solve_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["solve", write(tmp_path, SMALL), "--out", str(out)]) == 0
    for name in ("config.ini", "report.csv", "summary.txt", "fields/w.txt", "fields/u.txt", "fields/u_d.txt"):
        assert (out / name).exists()
    assert "converged = True" in (out / "summary.txt").read_text()
    assert len(SolveReport.read_csv(out / "report.csv")) > 10
    # the written configuration reproduces itself
    assert format_config(parse_config((out / "config.ini").read_text())) == (out / "config.ini").read_text()


def test_solve_not_converged_exit_code(tmp_path):
    out = tmp_path / "run"
    assert main(["solve", write(tmp_path, SMALL + "[mm]\nmax_outer = 1\n"), "--out", str(out)]) == 2
    assert len(SolveReport.read_csv(out / "report.csv")) == 1


def test_bad_config_writes_nothing(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["solve", write(tmp_path, "[problem]\nbogus = 1\n"), "--out", str(out)]) == 1
    assert not out.exists()
    assert "unknown key 'bogus'" in capsys.readouterr().err
    assert main(["solve", str(tmp_path / "missing.ini")]) == 1
    assert main(["table", write(tmp_path, "[problem]\np = 2\n", "bad.ini"), "--kind", "support",
                 "--out", str(out)]) == 1
    assert not out.exists()


def test_table_support(tmp_path):
    out = tmp_path / "tab"
    cfg = write(tmp_path, SMALL + "[experiment]\ngamma_list = 0, 1\n")
    assert main(["table", cfg, "--kind", "support", "--out", str(out)]) == 0
    text = (out / "table_support.csv").read_text()
    assert text.startswith("parameter,value,vanish_spacetime")
    assert len([ln for ln in text.splitlines() if ln.startswith("'gamma'")]) == 2


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    text = capsys.readouterr().out
    assert "[mm]" in text and "eps_decay = 0.02" in text


def test_check_command(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "10/10 invariants hold" in out
    assert os.linesep.join(line for line in out.splitlines() if line.startswith("FAIL")) == ""
