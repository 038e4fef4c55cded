import subprocess
import sys

import yaml

from dualmpc import example_config_path
from dualmpc.cli import EXIT_ASSUMPTION, EXIT_CONFIG, EXIT_INFEASIBLE, main


def write_variant(tmp_path, fn, name="cfg.yaml"):
    doc = yaml.safe_load(example_config_path().read_text())
    fn(doc)
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc, sort_keys=False))
    return str(p)


def test_bundled_aliases_resolve(capsys):
    for alias in ("example_sec6", "example_sec6.cfg"):
        assert main(["check", alias]) == 0
    assert capsys.readouterr().out.count("lambda_c = 0.675") == 2


def test_check_prints_offline_data(capsys):
    assert main(["check", "example"]) == 0
    out = capsys.readouterr().out
    assert "lambda_c = 0.675" in out
    assert "fbar = [1, 1, 1, 1, 1.8, 1.5, 1.8, 1.5]" in out


def test_check_unit_tube_prints_disturbance_support(tmp_path, capsys):
    path = write_variant(tmp_path, lambda d: d["model"].update(tube_shape={"box_radius": 1.0}))
    assert main(["check", path]) == 0
    assert "wbar = [0.10000000000000001, 0.10000000000000001, 0.10000000000000001, 0.10000000000000001]" in \
        capsys.readouterr().out


def test_check_reports_noncontractive_vertex_pair(tmp_path, capsys):
    path = write_variant(tmp_path, lambda d: d["model"].update(tube_shape={"box_radius": [0.1, 3.0]}))
    assert main(["check", path]) == EXIT_ASSUMPTION
    err = capsys.readouterr().err
    assert "parameter vertex" in err and "state vertex" in err


def test_parse_failure_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("schema_version: 1\nmodel: [\n")
    assert main(["check", str(p)]) == EXIT_CONFIG


def test_run_is_deterministic_and_filters_controllers(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["run", "example", "--realizations", "2", "--horizon", "4", "--seed", "7",
                   "--controllers", "ft_passive,ht_passive", "--out", str(out)])
        assert rc == 0
        outs.append(out)
    costs = [(o / "costs.csv").read_text() for o in outs]
    assert costs[0] == costs[1]
    assert (outs[0] / "summary.json").read_text() == (outs[1] / "summary.json").read_text()
    assert (outs[0] / "trace_1_ht_passive.csv").read_text() == (outs[1] / "trace_1_ht_passive.csv").read_text()
    rows = costs[0].splitlines()[1:]
    assert len(rows) == 4 and {r.split(",")[2] for r in rows} == {"ft_passive", "ht_passive"}
    assert "ht_passive" in capsys.readouterr().out


def test_unknown_controller(capsys):
    assert main(["run", "example", "--controllers", "nope", "--realizations", "1"]) == EXIT_CONFIG


def test_infeasible_start_exit_code(tmp_path):
    path = write_variant(tmp_path, lambda d: d["experiment"].update(x0=[3.5, 0.0]))
    args = ["run", path, "--realizations", "1", "--horizon", "2", "--controllers", "ht_passive",
            "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_INFEASIBLE
    assert main(args + ["--allow-infeasible"]) == 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dualmpc", "check", "example"], capture_output=True, text=True)
    assert res.returncode == 0 and "lambda_c" in res.stdout
