import csv
import json
import subprocess
import sys

import pytest
import yaml

from levydpp import harness as H
from levydpp import problems
from levydpp.cli import emit_plotdata, main, rows_to_csv, run_check, summary_line
from levydpp.config import ConfigError, bundled_configs, load_config, parse_config
from levydpp.dynamics import affine_coefficients

SMALL = dict(
    problem="heavy-tail", horizon=dict(s=0.0, T=1.0), seed=7, n_steps=16,
    budget=dict(n_paths=100, n_inner=16, truncation_paths=300, moment_paths=100, continuity_paths=100,
                n_seeds=1000),
    checks=dict(taus=[0.5], time_pairs=[[0.0, 0.5]], M_list=[1.0, 4.0]),
    tolerances=dict(moment_slack=1e5),
)


def write_cfg(tmp_path, name="cfg.yaml", **over):
    data = dict(SMALL, **over)
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_verify_output_identical_across_worker_counts(tmp_path):
    cfg = write_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    for out, w in [(a, "1"), (b, "3")]:
        code = main(["verify", "all", "--config", str(cfg), "--workers", w, "--out", str(out)])
        assert code in (0, 1)
    ta, tb = tree(a), tree(b)
    assert ta == tb
    assert "summary.txt" in ta and "truncation.json" in ta and "plotdata/truncation_gap_vs_M.dat" in ta


def test_verify_exit_status_and_json(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code = main(["verify", "tau-law", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 0
    rep = json.loads((tmp_path / "o" / "tau-law.json").read_text())
    assert rep["passed"] and [r["M"] for r in rep["tables"]["tau_law"]] == [1.0, 4.0]
    assert capsys.readouterr().out.startswith("PASS tau-law")


def test_seed_override_changes_results(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["verify", "tau-law", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["verify", "tau-law", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "tau-law.json").read_bytes() != (tmp_path / "b" / "tau-law.json").read_bytes()


def test_missing_horizon_is_reported(tmp_path, capsys):
    data = dict(SMALL)
    del data["horizon"]
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(data))
    assert main(["verify", "dpp", "--config", str(p)]) == 2
    assert "horizon" in capsys.readouterr().err


def test_config_errors_name_every_field():
    with pytest.raises(ConfigError) as exc:
        parse_config(dict(SMALL, bogus=1, horizon=dict(s=1.0, T=0.5),
                          policy=dict(breaks=[0.1 * k for k in range(1, 14)])))
    text = "\n".join(exc.value.problems)
    assert "bogus" in text and "horizon" in text and "policy" in text


def test_config_rejects_bad_values():
    for bad in [dict(problem="nope"), dict(checks=dict(M_list=[4.0, 1.0])), dict(checks=dict(M=0.5)),
                dict(checks=dict(p_list=[1.0])), dict(budget=dict(n_seeds=10)), dict(seed=-1)]:
        with pytest.raises(ConfigError):
            parse_config(dict(SMALL, **bad))
    with pytest.raises(ConfigError):
        parse_config([1, 2])
    with pytest.raises(ConfigError):
        load_config("no-such-config")


def test_bad_yaml(tmp_path):
    p = tmp_path / "broken.yaml"
    p.write_text("problem: [unclosed\n")
    assert main(["simulate", "--config", str(p)]) == 2


def test_bundled_configs_load():
    names = bundled_configs()
    assert {"controlled-sign-drift", "linear-drift", "pure-jump", "heavy-tail", "desk"} <= set(names)
    for n in names:
        cfg = load_config(n)
        assert cfg.horizon.T > cfg.horizon.s


def test_simulate_constant_policy_path(tmp_path):
    cfg = write_cfg(tmp_path, problem="controlled-sign-drift", simulate=dict(n_paths=2, policy_index=3, M=4.0))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "paths.csv")
    assert len(rows) == 2 * 17
    for r in rows:
        assert float(r["x"]) == pytest.approx(float(r["t"]), abs=1e-14)
        assert r["x"] == r["x_trunc"]
        assert r["jump_mark"] == ""


def test_simulate_marks_dropped_jumps(tmp_path):
    cfg = write_cfg(tmp_path, simulate=dict(n_paths=40, policy_index=0, M=1.0))
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path)])
    rows = [r for r in read_csv(tmp_path / "paths.csv") if r["jump_mark"]]
    assert rows
    for r in rows:
        assert (r["applied_in_truncated"] == "true") == (abs(float(r["jump_mark"])) < 1.0)


def test_simulate_rejects_bad_policy_index(tmp_path):
    cfg = write_cfg(tmp_path, simulate=dict(policy_index=99))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_value_table(tmp_path):
    cfg = write_cfg(tmp_path, value=dict(x_grid=[0.0, 1.0], M_values=[None, 2.0]))
    assert main(["value", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "values.csv")
    assert list(rows[0]) == ["s", "x", "M", "policy_id", "mean", "std_error", "n_paths", "diverged"]
    assert len(rows) == 2 * 2 * 5
    best = [r for r in rows if r["policy_id"].startswith("max:")]
    assert len(best) == 4
    for b in best:
        group = [float(r["mean"]) for r in rows if (r["x"], r["M"]) == (b["x"], b["M"])
                 and not r["policy_id"].startswith("max:")]
        assert float(b["mean"]) == max(group)


def test_discrete_problem_commands(tmp_path):
    cfg = write_cfg(tmp_path, problem="desk", budget=dict(discrete_outer=500, discrete_inner=32))
    assert main(["value", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "values.csv")
    assert float(rows[0]["mean"]) == -0.625
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "paths.csv")) == 4 * 3
    c = load_config(str(cfg))
    skipped = run_check(c, "truncation").to_dict()
    assert summary_line(skipped).startswith("SKIP truncation")


def test_emit_plotdata_copies_table_columns(tmp_path):
    rep = H.CheckReport("tau-law", "x", tables=dict(tau_law=[
        dict(M=1.0, empirical=0.5, binomial_se=0.01, analytic=0.49, tail_mass=4.0),
        dict(M=2.0, empirical=0.4, binomial_se=0.01, analytic=0.41, tail_mass=2.8)]))
    (path,) = emit_plotdata(rep, tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# M empirical binomial_se analytic"
    assert lines[1:] == ["1.0 0.5 0.01 0.49", "2.0 0.4 0.01 0.41"]


def test_emit_plotdata_with_empty_table(tmp_path):
    rep = H.CheckReport("truncation", "x", tables=dict(truncation=[], truncation_bound=[]))
    paths = emit_plotdata(rep, tmp_path)
    assert len(paths) == 3
    assert paths[0].read_text() == "# M VM VM_se\n"


def test_csv_floats_round_trip():
    text = rows_to_csv([dict(a=0.1 + 0.2, b=None, c=True)])
    assert text == "a,b,c\n0.30000000000000004,,true\n"


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path)
    res = subprocess.run([sys.executable, "-m", "levydpp", "verify", "tau-law", "--config", str(cfg),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "o" / "summary.txt").exists()


# -- worked examples ----------------------------------------------------------------


def test_verify_all_on_bundled_deterministic_config(tmp_path):
    assert main(["verify", "all", "--config", "controlled-sign-drift", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "summary.txt").read_text().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_truncation_plot_files(tmp_path):
    cfg = write_cfg(tmp_path, checks=dict(taus=[0.5], time_pairs=[[0.0, 0.5]], M_list=[1.0, 2.0, 4.0, 8.0]))
    assert main(["verify", "truncation", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    plot = tmp_path / "o" / "plotdata"

    def rows(name):
        lines = (plot / name).read_text().splitlines()
        return lines[0].split()[1:], [[float(v) for v in ln.split()] for ln in lines[1:]]

    head, gap = rows("truncation_gap_vs_M.dat")
    assert head == ["M", "gap", "VM_se", "bound"] and len(gap) == 4
    assert all(r[3] >= r[1] for r in gap)
    head, curve = rows("truncation_bound_curve.dat")
    assert head == ["M", "bound"] and [r[0] for r in curve] == [1.0, 2.0, 4.0, 8.0]


def test_simulate_without_motion_gives_constant_paths(tmp_path, monkeypatch):
    still = problems.controlled_sign_drift().with_(coeffs=affine_coefficients())
    monkeypatch.setitem(problems.REGISTRY, "controlled-sign-drift", lambda: still)
    cfg = write_cfg(tmp_path, problem="controlled-sign-drift", x0=1.25, simulate=dict(n_paths=3, policy_index=1))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "paths.csv")
    assert len(rows) == 3 * 17
    assert {(r["x"], r["x_left"], r["x_trunc"]) for r in rows} == {("1.25", "1.25", "1.25")}
