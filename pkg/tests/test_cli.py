import json

import pytest

from jumpfbsde.cli import main


def run(tmp_path, *argv):
    return main(list(argv) + ["--out", str(tmp_path)])


def test_list_problems(capsys):
    assert main(["list-problems"]) == 0
    assert "lq_jump" in capsys.readouterr().out


def test_solve_zero_writes_report(tmp_path):
    assert run(tmp_path, "solve", "--problem", "zero", "--paths", "200", "--steps", "20") == 0
    rep = json.loads((tmp_path / "solve_report.json").read_text())
    assert rep["cost"] == 0.0
    assert len(rep["noise_hash"]) == 64
    assert rep["config"]["run"]["paths"] == 200
    assert (tmp_path / "solution.csv").exists()


def test_solve_linear_bsde(tmp_path):
    assert run(tmp_path, "solve", "--problem", "linear_bsde", "--paths", "2000",
               "--steps", "100") == 0
    rep = json.loads((tmp_path / "solve_report.json").read_text())
    assert rep["cost"] == pytest.approx(1.0512710963760241, abs=1e-3)


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[grid]\nsteps = 10\n\n[run]\npaths = 100\nseeds = 3\n")
    assert run(tmp_path, "solve", "--config", str(cfg)) == 1
    assert "line 6" in capsys.readouterr().err


def test_malformed_toml(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[grid\nsteps = 10\n")
    assert run(tmp_path, "solve", "--config", str(cfg)) == 1
    assert "line 1" in capsys.readouterr().err


def test_missing_config_is_an_error(tmp_path):
    assert run(tmp_path, "solve", "--config", str(tmp_path / "nope.toml")) == 1


def test_adjoint_lq(tmp_path):
    assert run(tmp_path, "adjoint", "--problem", "lq_jump", "--paths", "500", "--steps", "50") == 0
    rep = json.loads((tmp_path / "adjoint_report.json").read_text())
    assert rep["max_p_oracle_error"] < 1e-3
    header = (tmp_path / "adjoint.csv").read_text().splitlines()[0]
    assert header == "path,step,t,p,P,q_0,qt_0,K1_0,K2_0"


def test_adjoint_singular_guard(tmp_path):
    cfg = tmp_path / "sing.toml"
    cfg.write_text(
        "[coefficients]\nx0 = 1.0\n[coefficients.sigma]\nz = 1.0\nconst = 0.1\n"
        "[coefficients.phi]\nslope = 1.0\n[picard]\nmax_iter = 1\n"
    )
    assert run(tmp_path, "adjoint", "--config", str(cfg), "--paths", "100", "--steps", "10") == 3
    lines = (tmp_path / "guards.csv").read_text().splitlines()
    assert lines[0] == "t,path,mark,guard_name,value"
    assert len(lines) > 1 and "sigma_z*p" in lines[1]


def test_verify_mp_exit_codes(tmp_path):
    assert run(tmp_path, "verify-mp", "--problem", "lq_jump", "--paths", "300",
               "--steps", "50") == 0
    cfg = tmp_path / "shift.toml"
    cfg.write_text("[controls]\ncandidate = \"oracle\"\nshift = 1.0\n")
    assert run(tmp_path, "verify-mp", "--problem", "lq_jump", "--config", str(cfg),
               "--paths", "300", "--steps", "50") == 2


def test_spike_order_zero_is_inconclusive(tmp_path, capsys):
    assert run(tmp_path, "spike-order", "--problem", "zero", "--paths", "300", "--steps", "80") == 0
    assert "inconclusive" in capsys.readouterr().out
    assert (tmp_path / "order.csv").read_text().startswith("epsilon,statistic,se")


def test_validate(tmp_path):
    assert run(tmp_path, "validate", "--problem", "coupled_small") == 0


def test_bad_builtin_params(tmp_path):
    cfg = tmp_path / "p.toml"
    cfg.write_text("[coefficients]\nbuiltin = \"lq_jump\"\nparams = {nope = 1.0}\n")
    assert run(tmp_path, "solve", "--config", str(cfg), "--paths", "100") == 1


def test_threads_do_not_change_csv(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, threads in ((a, "1"), (b, "3")):
        assert main(["solve", "--problem", "coupled_small", "--paths", "3000", "--steps", "20",
                     "--seed", "5", "--threads", threads, "--out", str(out)]) == 0
    assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()


def test_linear_table_with_per_mark_slopes(tmp_path):
    cfg = tmp_path / "lin.toml"
    cfg.write_text(
        "[markspace]\nmarks = [0.5, 1.0]\nweights = [0.6, 0.4]\n"
        "[coefficients]\nx0 = 1.0\n[coefficients.b]\nx = 0.2\nu = 0.5\n"
        "[coefficients.sigma]\nconst = 0.2\nz = 0.1\n[coefficients.f]\nx = [0.1, 0.2]\n"
        "[coefficients.g]\nx = 0.1\nu2 = 0.5\n[coefficients.phi]\nslope = 1.0\n"
    )
    assert run(tmp_path, "solve", "--config", str(cfg), "--paths", "3000", "--steps", "50") == 0
    assert run(tmp_path, "validate", "--config", str(cfg)) == 0


def test_f_rejects_z_slope(tmp_path, capsys):
    cfg = tmp_path / "f.toml"
    cfg.write_text("[coefficients]\nx0 = 1.0\n[coefficients.f]\nz = 0.1\n")
    assert run(tmp_path, "solve", "--config", str(cfg)) == 1
    assert "line 4" in capsys.readouterr().err
