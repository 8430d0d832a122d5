import csv
import logging

import pytest

from twoscale import __version__
from twoscale.cli import ConfigError, RunConfig, main, parse_config


def read_csv(path):
    with open(path) as fh:
        header = fh.readline()
        return header, list(csv.reader(fh))


def test_minimal_config_defaults(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text("[run]\nproblem = layer\n")
    cfg = parse_config(str(f))
    assert cfg.beta == 0.5 and cfg.dt is None and cfg.problem == "layer"
    assert cfg.iters == 12 and cfg.tol == 1e-6


def test_sectionless_file_is_run_section():
    assert parse_config(text="level = 2\n").level == 2


def test_negative_diffusivity_cites_assumption():
    with pytest.raises(ConfigError) as exc:
        parse_config(text="[model]\nD_v = -1\n")
    assert any("(A3)" in e and "D_v" in e for e in exc.value.errors)


def test_beta_range():
    with pytest.raises(ConfigError) as exc:
        parse_config(text="[run]\nbeta = 1.0\n")
    assert any("(0, 1)" in e for e in exc.value.errors)


def test_errors_are_aggregated():
    with pytest.raises(ConfigError) as exc:
        parse_config(text="[run]\nbeta = 0\nbogus = 1\n[model]\nD_U = 0\n[micro]\ngamma_r = side\n")
    # unknown keys are reported before value validation
    assert any("bogus" in e for e in exc.value.errors)
    with pytest.raises(ConfigError) as exc:
        parse_config(text="[run]\nbeta = 0\n[model]\nD_U = 0\n[micro]\ngamma_r = side\n")
    errs = exc.value.errors
    assert any("(A2)" in e for e in errs) and any("(A3)" in e for e in errs) and any("beta" in e for e in errs)


def test_reaction_section_and_a4():
    cfg = parse_config(text="[reaction]\nkind = linear\nk = 2\n")
    assert cfg.reaction_law().kind == "linear" and cfg.reaction_law().k == 2.0
    with pytest.raises(ConfigError) as exc:
        parse_config(text="[reaction]\nM = inf\n")
    assert any("(A4)" in e for e in exc.value.errors)


def test_unknown_section_and_bad_value():
    with pytest.raises(ConfigError):
        parse_config(text="[extra]\na = 1\n")
    with pytest.raises(ConfigError):
        parse_config(text="[run]\nlevel = two\n")


def test_digest_ignores_output_dir():
    assert RunConfig(out="a").digest == RunConfig(out="b").digest
    assert RunConfig(level=2).digest != RunConfig(level=3).digest


def test_cli_validation_exit_code(tmp_path, capsys):
    assert main(["solve", "--beta", "1.5", "--out", str(tmp_path)]) == 2
    assert "beta" in capsys.readouterr().err


def test_solve_ignores_beta_with_warning(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="twoscale"):
        rc = main(["solve", "--beta", "0.3", "--level", "1", "--micro-n", "2", "--out", str(tmp_path)])
    assert rc == 0
    assert any("beta" in r.getMessage() for r in caplog.records)
    header, rows = read_csv(tmp_path / "trajectory.csv")
    assert header.startswith(f"# twoscale {__version__} config=")
    assert rows[0] == ["t", "dof_kind", "index", "value"]
    assert (tmp_path / "config.ini").exists()


def test_solver_failure_exit_code(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[reaction]\nkind = truncated-bilinear\nk = 1\nM = 100\n")
    # the default step violates the reaction guard dt <= 1/(2L)
    assert main(["solve", "--config", str(cfg), "--level", "1", "--micro-n", "2", "--out", str(tmp_path / "o")]) == 3


def test_mms_verify_constant(tmp_path):
    assert main(["mms-verify", "--problem", "constant", "--level", "1", "--micro-n", "2", "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "solver_errors.csv")
    assert all(float(x) <= 1e-9 for r in rows[1:] for x in r[2:6])


def test_refine_loop_layer(tmp_path):
    out = tmp_path / "loop"
    rc = main(["refine-loop", "--problem", "layer", "--level", "0", "--iters", "8", "--micro-n", "4",
               "--out", str(out)])
    assert rc == 0
    _, rows = read_csv(out / "history.csv")
    assert rows[0] == ["iter", "n_squares", "n_dofs", "max_nu", "sum_nu_sq", "e2_norm", "marked", "closure_splits"]
    nu = [float(r[3]) for r in rows[1:]]
    assert len(nu) == 9 and all(a > b for a, b in zip(nu, nu[1:]))
    assert len(list(out.glob("partition_gen*.txt"))) == 9


def test_trace_check_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["trace-check", "--micro-n", "8", "--seed", "4", "--out", str(d)]) == 0
    assert (a / "trace_check.csv").read_bytes() == (b / "trace_check.csv").read_bytes()


def test_parallel_output_identical(tmp_path, monkeypatch):
    args = ["mms-verify", "--level", "2", "--micro-n", "4"]
    assert main(args + ["--out", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("TWOSCALE_THREADS", "3")
    assert main(args + ["--out", str(tmp_path / "parallel")]) == 0
    for name in ("solver_errors.csv", "eoc_macro.csv", "eoc_micro.csv"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()



def test_acceptance_failure_exit_code(tmp_path):
    # one macro level is too coarse for asymptotic rates
    assert main(["mms-verify", "--level", "1", "--micro-n", "2", "--out", str(tmp_path)]) == 4
