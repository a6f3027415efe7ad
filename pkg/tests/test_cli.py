from pathlib import Path

import pytest

import fbsdelab.cli as cli
from fbsdelab.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

MINIMAL_LQR = """
[problem]
kind = lqr
A = 0
B = 1
sigma = 1
delta = 0
target = 0
control_weight = 1
terminal_weight = 0
x0 = 1
T = 1

[experiment]
kind = feynman_kac
"""


def parse(text):
    return cli.parse_config(text)


class TestParseConfig:
    def test_shipped_configs_parse(self):
        for name in ("lqr_delta0.cfg", "lqr_delta01.cfg", "heat.cfg",
                     "lqr_uniqueness.cfg", "lqr_sweep.cfg", "lqr_condition.cfg"):
            cfg = parse((CONFIG_DIR / name).read_text())
            assert cfg.setup is not None

    def test_minimal_defaults(self):
        cfg = parse(MINIMAL_LQR)
        assert cfg.numerics.n_paths == 100_000
        assert cfg.numerics.seed == 20240801
        assert cfg.experiment == "feynman_kac"
        assert cfg.out_dir == "out"
        assert cfg.control is not None

    def test_missing_required_key_names_path(self):
        text = MINIMAL_LQR.replace("T = 1\n", "")
        with pytest.raises(ConfigError) as err:
            parse(text)
        assert any("problem.T" in e for e in err.value.errors)

    def test_expression_parse_error_located(self):
        text = MINIMAL_LQR.replace("sigma = 1", "sigma = 1+")
        with pytest.raises(ConfigError) as err:
            parse(text)
        joined = " ".join(err.value.errors)
        assert "problem.sigma" in joined and "column" in joined

    def test_unknown_keys_rejected(self):
        text = MINIMAL_LQR + "\n[numerics]\nn_paths = 100\nwarp_speed = 9\n"
        with pytest.raises(ConfigError) as err:
            parse(text)
        assert any("warp_speed" in e for e in err.value.errors)

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError) as err:
            parse(MINIMAL_LQR + "\n[plotting]\ncolor = red\n")
        assert any("plotting" in e for e in err.value.errors)

    def test_all_errors_collected(self):
        text = MINIMAL_LQR.replace("B = 1", "B = 1+") \
                          .replace("x0 = 1", "x0 = one") \
            + "\n[numerics]\nn_paths = 0\n"
        with pytest.raises(ConfigError) as err:
            parse(text)
        joined = " ".join(err.value.errors)
        assert "problem.B" in joined
        assert "problem.x0" in joined
        assert "n_paths" in joined
        assert len(err.value.errors) >= 3

    def test_numeric_range_checks(self):
        text = MINIMAL_LQR + "\n[numerics]\nn_paths = 0\n"
        with pytest.raises(ConfigError) as err:
            parse(text)
        assert any("n_paths" in e and ">= 1" in e for e in err.value.errors)

    def test_time_only_coefficients_reject_x(self):
        text = MINIMAL_LQR.replace("A = 0", "A = x")
        with pytest.raises(ConfigError) as err:
            parse(text)
        assert any("problem.A" in e for e in err.value.errors)

    def test_duplicate_key_rejected(self):
        text = MINIMAL_LQR + "\n[numerics]\nseed = 1\nseed = 2\n"
        with pytest.raises(ConfigError) as err:
            parse(text)
        assert any("duplicate key" in e for e in err.value.errors)

    def test_driver_problem_block(self):
        text = """
[problem]
kind = driver
mu = 0
sigma = 1
x0 = 0
T = 1
source = 0
z_quad = 0
terminal = x^2

[experiment]
kind = feynman_kac
"""
        cfg = parse(text)
        assert cfg.control is None
        assert float(cfg.setup.driver.terminal(3.0)) == 9.0
        assert cfg.setup.forward.x0 == 0.0


class TestMain:
    def run_main(self, *argv):
        return cli.main(list(argv))

    def test_run_heat_config(self, tmp_path, capsys):
        code = self.run_main("run", str(CONFIG_DIR / "heat.cfg"),
                             "--out-dir", str(tmp_path / "heat"),
                             "--paths", "20000")
        out = capsys.readouterr().out
        assert code == 0
        assert "overall: PASS" in out
        assert (tmp_path / "heat" / "routes.csv").exists()
        assert (tmp_path / "heat" / "verdicts.txt").exists()

    def test_repeat_runs_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code = self.run_main("run", str(CONFIG_DIR / "heat.cfg"),
                                 "--out-dir", str(out), "--paths", "5000",
                                 "--steps", "16")
            assert code == 0
        for name in ("routes.csv", "verdicts.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(MINIMAL_LQR + "\n[numerics]\nn_paths = 0\n")
        code = self.run_main("run", str(bad))
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_file_exits_2(self, capsys):
        code = self.run_main("run", "no_such_file.cfg")
        assert code == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_check_condition_verb(self, tmp_path, capsys):
        code = self.run_main("check-condition", str(CONFIG_DIR / "lqr_condition.cfg"),
                             "--out-dir", str(tmp_path / "cond"))
        out = capsys.readouterr().out
        assert code == 0
        assert "uniqueness hypothesis: holds" in out
        assert (tmp_path / "cond" / "condition_report.txt").exists()

    def test_check_condition_failure_exits_1(self, tmp_path, capsys):
        text = """
[problem]
kind = driver
mu = 0
sigma = 1
x0 = 0
T = 1
source = 0
z_quad = t
terminal = x^2

[experiment]
kind = check_condition
"""
        cfg = tmp_path / "bad_driver.cfg"
        cfg.write_text(text)
        code = self.run_main("check-condition", str(cfg),
                             "--out-dir", str(tmp_path / "c"))
        assert code == 1
        assert "NOT established" in capsys.readouterr().out

    def test_sweep_verb_overrides_experiment(self, tmp_path, capsys):
        code = self.run_main("sweep", str(CONFIG_DIR / "lqr_sweep.cfg"),
                             "--out-dir", str(tmp_path / "sweep"))
        assert code == 0
        table = (tmp_path / "sweep" / "table.csv").read_text().splitlines()
        assert table[0] == "delta,value,disc_err"
        assert len(table) == 4

    def test_sweep_requires_lqr(self, tmp_path, capsys):
        code = self.run_main("sweep", str(CONFIG_DIR / "heat.cfg"),
                             "--out-dir", str(tmp_path / "x"))
        assert code == 2
        assert "lqr" in capsys.readouterr().err

    def test_seed_override_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, seed in ((a, "1"), (b, "2")):
            code = self.run_main("run", str(CONFIG_DIR / "heat.cfg"),
                                 "--out-dir", str(out), "--paths", "5000",
                                 "--steps", "16", "--seed", seed)
            assert code == 0
        assert (a / "routes.csv").read_bytes() != (b / "routes.csv").read_bytes()
