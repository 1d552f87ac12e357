"""Command-line runner: ``levydpp simulate|value|verify``.

Every run is a pure function of the config and the seed.  Outputs are JSON
(sorted keys), CSV and whitespace-separated plot data; none of them carries
timestamps, so repeated runs, with any ``--workers``, give identical bytes.
Exit status: 0 when every requested check passes, 1 when one fails,
2 for configuration or budget errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import harness as H
from .config import ConfigError, ExperimentConfig, bundled_configs, load_config
from .control import PolicyFamilyTooLarge
from .dp import desk_problem, dp_oracle, outcome_draws
from .dynamics import integrate_batch
from .levy_noise import InvalidInput, rng_for
from .problems import get_problem
from .value import evaluate_family, sample_batch

CHECKS = ("dpp", "truncation", "supermartingale", "moments", "tau-law", "continuity")


def _gate(cfg: ExperimentConfig) -> H.Gate:
    return H.Gate(se_mult=cfg.tolerances.se_mult, delta_dt=cfg.tolerances.delta_dt)


def _discrete(cfg: ExperimentConfig):
    return desk_problem()


def run_check(cfg: ExperimentConfig, name: str) -> H.CheckReport:
    """One named check for the configured problem."""
    b, c, gate, seed = cfg.budget, cfg.checks, _gate(cfg), cfg.seed
    if cfg.is_discrete:
        dp = _discrete(cfg)
        if name == "dpp":
            return H.check_dpp_discrete(dp, taus=tuple(c.discrete_taus), n_outer=b.discrete_outer,
                                        n_inner=b.discrete_inner, seed=seed, gate=gate)
        if name == "supermartingale":
            return H.check_supermartingale_discrete(dp)
        return H.CheckReport(name, cfg.problem, notes=dict(skipped="not defined for discrete-chain problems"))

    p = cfg.build_problem()
    if name == "dpp":
        return H.check_dpp(p, taus=tuple(c.taus), n_paths=b.n_paths, n_inner=b.n_inner, seed=seed, M=c.M,
                           gate=gate, fresh_budget=b.fresh_budget)
    if name == "truncation":
        return H.check_truncation_convergence(p, M_list=tuple(c.M_list), n_paths=b.truncation_paths, seed=seed,
                                              gate=gate)
    if name == "supermartingale":
        return H.check_supermartingale(p, time_pairs=tuple(tuple(t) for t in c.time_pairs), M=c.M,
                                       n_paths=b.n_paths, n_inner=b.n_inner, seed=seed, gate=gate)
    if name == "moments":
        contrast = None
        if c.contrast_problem is not None and b.contrast_samples > 0:
            contrast = get_problem(c.contrast_problem)
            if cfg.noise is not None and c.contrast_problem == cfg.problem:
                contrast = contrast.with_(spec=p.spec)
        return H.check_moment_bounds(p, M=c.moment_M, p_list=tuple(c.p_list), x_grid=tuple(c.x_grid),
                                     n_paths=b.moment_paths, seed=seed, slack=cfg.tolerances.moment_slack,
                                     contrast=contrast, contrast_samples=b.contrast_samples)
    if name == "tau-law":
        return H.check_tau_law(p.spec, M_list=tuple(c.M_list), T=p.T, s=p.s, n_seeds=b.n_seeds, seed=seed,
                               se_mult=cfg.tolerances.se_mult, name=p.name)
    if name == "continuity":
        return H.check_continuity(p, alpha=c.continuity_alpha, beta=c.continuity_beta, M=c.moment_M,
                                  n_paths=b.continuity_paths, seed=seed, se_mult=cfg.tolerances.se_mult)
    raise InvalidInput(f"unknown check {name!r}")


def _task(args) -> dict:
    cfg_data, name = args
    cfg = ExperimentConfig.model_validate(cfg_data)
    return run_check(cfg, name).to_dict()


def verify(cfg: ExperimentConfig, names: Sequence[str], workers: int = 1) -> list[dict]:
    """Run checks, fanning out over whole checks; results keep the requested order."""
    tasks = [(cfg.model_dump(), n) for n in names]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            return list(pool.map(_task, tasks))
    return [_task(t) for t in tasks]


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def _plain(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, default=_plain) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: list[dict], columns: Optional[list] = None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(k)) for k in columns])
    return buf.getvalue()


def _as_dict(report) -> dict:
    return report.to_dict() if isinstance(report, H.CheckReport) else report


def _dat(header: Sequence[str], rows: list) -> str:
    lines = ["# " + " ".join(header)]
    lines += [" ".join(_cell(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


PLOT_SPECS = {
    # check -> list of (file stem, table, columns)
    "truncation": [("VM_vs_M", "truncation", ["M", "VM", "VM_se"]),
                   ("gap_vs_M", "truncation", ["M", "gap", "VM_se", "bound"]),
                   ("bound_curve", "truncation_bound", ["M", "bound"])],
    "tau-law": [("prob_vs_M", "tau_law", ["M", "empirical", "binomial_se", "analytic"])],
    "dpp": [("sides_vs_tau", "dpp", None)],
    "supermartingale": [("G_by_pair", "supermartingale", None)],
    "moments": [("ratio_vs_x", "moments", ["x", "ratio", "p"]), ("increments", "increments", None)],
    "continuity": [("gap_vs_term", "continuity", ["term", "gap", "gap_se"])],
}


def emit_plotdata(report, out_dir) -> list[Path]:
    """Write ``x y [err ...]`` data files for one report; returns their paths.

    Each file is a copy of report table columns, so the numbers trace back
    to the report itself.
    """
    rep = _as_dict(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, table, cols in PLOT_SPECS.get(rep["name"], []):
        rows = rep.get("tables", {}).get(table, [])
        if cols is None:
            cols = list(rows[0].keys()) if rows else []
        path = out_dir / f"{rep['name']}_{stem}.dat"
        path.write_text(_dat(cols, [[r.get(c) for c in cols] for r in rows]))
        written.append(path)
    return written


def write_report(report, out_dir) -> list[Path]:
    rep = _as_dict(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{rep['name']}.json"]
    paths[0].write_text(to_json(rep))
    for tname, rows in sorted(rep.get("tables", {}).items()):
        p = out_dir / f"{rep['name']}_{tname}.csv"
        p.write_text(rows_to_csv(rows))
        paths.append(p)
    paths.extend(emit_plotdata(rep, out_dir / "plotdata"))
    return paths


def summary_line(rep: dict) -> str:
    if "skipped" in rep.get("notes", {}):
        return f"SKIP {rep['name']} [{rep['problem']}]: {rep['notes']['skipped']}"
    n = len(rep["cases"])
    ok = sum(c["passed"] for c in rep["cases"])
    status = "PASS" if rep["passed"] else "FAIL"
    line = f"{status} {rep['name']} [{rep['problem']}] {ok}/{n} cases"
    failing = [c["label"] for c in rep["cases"] if not c["passed"]]
    if failing:
        line += "; failing: " + ", ".join(failing[:5]) + (" ..." if len(failing) > 5 else "")
    return line


# ---------------------------------------------------------------------------
# simulate and value
# ---------------------------------------------------------------------------


def simulate(cfg: ExperimentConfig, out_dir) -> Path:
    """Sample paths, untruncated and truncated side by side, as CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "paths.csv"
    sc = cfg.simulate
    if cfg.is_discrete:
        dp = _discrete(cfg)
        table = dp_oracle(dp)
        rng = rng_for(cfg.seed)
        outs = outcome_draws(dp, rng.random((sc.n_paths, dp.n_stages)))
        rows = []
        for b in range(sc.n_paths):
            x = float(dp.x0)
            rows.append(dict(path=b, stage=0, x=x))
            for k in range(dp.n_stages):
                u = dp.actions[table.policy[k][x]]
                x = float(dp.move(x, u, dp.outcomes[outs[b, k]][0]))
                rows.append(dict(path=b, stage=k + 1, x=x))
        path.write_text(rows_to_csv(rows))
        return path
    p = cfg.build_problem()
    family = p.family()
    if sc.policy_index >= len(family):
        raise InvalidInput(f"simulate.policy_index {sc.policy_index} outside a family of {len(family)}")
    pol = family[sc.policy_index]
    nb = sample_batch(p.spec, p.coeffs.m, p.s, p.T, p.n_steps, cfg.seed, sc.n_paths, key=(H.OUTER,))
    full = integrate_batch(p.coeffs, pol, nb, p.x0, spec=p.spec)
    trunc = integrate_batch(p.coeffs, pol, nb, p.x0, M=sc.M, spec=p.spec)
    rows = []
    for b in range(len(nb)):
        a, c = full.path(b), trunc.path(b)
        marks = {int(i): (float(m[0]), bool(ap)) for i, m, ap in zip(a.event_indices(), a.jump_marks, c.applied)}
        for i, t in enumerate(a.time_grid):
            mk = marks.get(i)
            rows.append(dict(path=b, t=float(t), x=float(a.values[i, 0]), x_left=float(a.left_limits[i, 0]),
                             x_trunc=float(c.values[i, 0]), x_trunc_left=float(c.left_limits[i, 0]),
                             jump_mark=None if mk is None else mk[0],
                             applied_in_truncated=None if mk is None else mk[1]))
    path.write_text(rows_to_csv(rows))
    return path


VALUE_COLUMNS = ["s", "x", "M", "policy_id", "mean", "std_error", "n_paths", "diverged"]


def value_table(cfg: ExperimentConfig, out_dir) -> Path:
    """Revenue of every family policy, plus the maximum, on a grid of starts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "values.csv"
    rows = []
    if cfg.is_discrete:
        dp = _discrete(cfg)
        table = dp_oracle(dp)
        for k in range(dp.n_stages):
            for x, v in sorted(table.values[k].items()):
                rows.append(dict(s=k, x=x, M=None, policy_id=f"optimal:{dp.actions[table.policy[k][x]]}", mean=v,
                                 std_error=0.0, n_paths=0, diverged=0))
        path.write_text(rows_to_csv(rows, VALUE_COLUMNS))
        return path
    p = cfg.build_problem()
    family = p.family()
    s_grid = cfg.value.s_grid or [p.s]
    x_grid = cfg.value.x_grid or [p.x0]
    n = cfg.budget.n_paths
    base = sample_batch(p.spec, p.coeffs.m, p.s, p.T, p.n_steps, cfg.seed, n, key=(H.OUTER,))
    for s in s_grid:
        nb = base if s == p.s else H.restrict_batch(base, s)
        for x in x_grid:
            for M in cfg.value.M_values:
                res = evaluate_family(family, p.coeffs, p.cost, p.spec, s, x, p.T, n, cfg.seed, M=M, noise=nb)
                for pol, est in zip(family, res.estimates):
                    rows.append(dict(s=s, x=x, M=M, policy_id=pol.name, **_est_cols(est)))
                rows.append(dict(s=s, x=x, M=M, policy_id=f"max:{res.best_policy.name}", **_est_cols(res.best)))
    path.write_text(rows_to_csv(rows, VALUE_COLUMNS))
    return path


def _est_cols(e) -> dict:
    return dict(mean=e.mean, std_error=e.std_error, n_paths=e.n_paths, diverged=e.diverged_count)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="levydpp", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help=f"YAML config path or bundled name ({', '.join(bundled_configs())})")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write sample paths")
    sub.add_parser("value", parents=[common], help="write value tables")
    v = sub.add_parser("verify", parents=[common], help="run verification checks")
    v.add_argument("check", choices=list(CHECKS) + ["all"])
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = Path(args.out if args.out is not None else cfg.output_dir)
        if args.workers < 1:
            raise InvalidInput("--workers must be at least 1")
        if args.command == "simulate":
            print(simulate(cfg, out))
            return 0
        if args.command == "value":
            print(value_table(cfg, out))
            return 0
        names = list(CHECKS) if args.check == "all" else [args.check]
        reports = verify(cfg, names, workers=args.workers)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (InvalidInput, PolicyFamilyTooLarge, H.NestedBudgetExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    lines = []
    for rep in reports:
        write_report(rep, out)
        lines.append(summary_line(rep))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if all(r["passed"] for r in reports) else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
