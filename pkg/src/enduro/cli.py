"""Command-line entry point: ``enduro <command> [options]``.

Exit codes: 0 success, 1 domain failure (infeasible plan, fit error),
2 usage error (bad arguments, missing or invalid scenario).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .models import FitError, eval_lap_time, normalized_rmse, synth_ground_truth
from .simulator import POLICIES, RaceLog, ScenarioError, compare, load_scenario, run_race
from .strategy import BuildError, EgoMeasurement, build_problem, solve_forced_inlap, solve_strategy

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class DomainFailure(Exception):
    pass


@dataclass
class RunManifest:
    """Enough to reproduce a run: inputs with digests, outputs with digests, timings."""

    command: str
    scenario: str | None
    determinism: str = "no random state; identical inputs give identical outputs (timing.json excepted)"
    version: str = __version__
    python: str = platform.python_version()
    arguments: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)

    def add_outputs(self, paths, root: Path):
        for p in paths:
            p = Path(p)
            self.outputs[str(p.relative_to(root)) if p.is_relative_to(root) else str(p)] = _sha256(p)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load(path):
    if path is None:
        raise UsageError("--scenario is required")
    try:
        return load_scenario(path)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, sc=None) -> RunManifest:
    skip = {"func", "command"}
    argd = {k: v for k, v in vars(args).items() if k not in skip}
    argd = json.loads(json.dumps(argd, default=str))
    m = RunManifest(args.command, str(sc.path) if sc is not None else None, arguments=argd)
    if sc is not None:
        m.inputs["scenario_digest"] = sc.digest
    return m


# ---------------------------------------------------------------------------
# fit-maps
# ---------------------------------------------------------------------------


def cmd_fit_maps(args) -> int:
    sc = _load(args.scenario)
    if sc.params is None:
        raise DomainFailure("scenario has no ego.ground_truth parameters to fit")
    n_fits = args.n_fits or sc.n_fits
    out = _out_dir(args, "maps")
    t0 = time.perf_counter()
    truth = synth_ground_truth(sc.params)
    try:
        maps = truth.build_maps(n_fits)
    except FitError as exc:
        raise DomainFailure(f"fit failed: {exc}") from None
    samples = truth.lap_samples()
    rmse = normalized_rmse(maps.base, samples)
    files = maps.save(out)
    report = {"n_fits": n_fits, "n_samples": int(len(samples)), "normalized_rmse": rmse,
              "normalized_rmse_percent": 100.0 * rmse, "domain": list(maps.base.domain),
              "t_charge_max": maps.t_charge_max}
    rpath = out / "fit_report.json"
    rpath.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    man = _manifest(args, sc)
    man.wall_times["fit"] = time.perf_counter() - t0
    man.add_outputs(list(files.values()) + [rpath], out)
    man.write(out)
    print(f"n_fits={n_fits} normalized RMSE={100.0 * rmse:.5f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve-strategy
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    sc = _load(args.scenario)
    cfg = sc.config
    over = {k: getattr(args, k) for k in ("n_laps", "n_stops") if getattr(args, k) is not None}
    if over:
        cfg = cfg.replace(**over)
    t_fc = sc.ego.t_fc if args.t_fc is None else args.t_fc
    meas = EgoMeasurement(args.t_meas, t_fc)
    t0 = time.perf_counter()
    try:
        if args.dump_lp:
            model = build_problem(meas, cfg, sc.maps, force_inlap=args.force_inlap)
            Path(args.dump_lp).write_text(model.to_lp_format())
        if args.force_inlap:
            plan = solve_forced_inlap(meas, cfg, sc.maps)
        else:
            plan = solve_strategy(meas, cfg, sc.maps, round_stints=args.round_stints)
    except BuildError as exc:
        raise DomainFailure(f"cannot build the problem: {exc}") from None
    out_path = Path(args.out or "plan.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(plan.to_json() + "\n")
    man = _manifest(args, sc)
    man.wall_times["solve"] = time.perf_counter() - t0
    man.add_outputs([out_path] + ([Path(args.dump_lp)] if args.dump_lp else []), out_path.parent)
    man.write(out_path.parent)
    print(f"status={plan.status} objective={plan.objective:.6f} m ({plan.objective / cfg.s_lap:.6f} laps)")
    if not plan.ok:
        print(plan.message, file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / compare
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    sc = _load(args.scenario)
    out = _out_dir(args, f"run_{args.policy}")
    man = _manifest(args, sc)
    t0 = time.perf_counter()
    lg = run_race(sc, args.policy)
    man.wall_times["simulate"] = time.perf_counter() - t0
    files = lg.write(out)
    man.add_outputs([p for k, p in files.items() if k != "timing"], out)
    man.write(out)
    s = lg.summary
    print(f"{args.policy}: distance={s['distance_laps']:.4f} laps position={s['finishing_position']} "
          f"delay={s['cumulative_interaction_delay']:.3f} s")
    return EXIT_OK


def _read_log(path) -> RaceLog:
    try:
        return RaceLog.read(path)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read race log in {path}: {exc}") from None


def _write_comparison(cmp, out: Path, man: RunManifest):
    cpath = out / "compare.csv"
    cpath.write_text(cmp.csv())
    spath = out / "compare_summary.json"
    spath.write_text(json.dumps(cmp.summary, indent=2, sort_keys=True) + "\n")
    man.add_outputs([cpath, spath], out)


def cmd_compare(args) -> int:
    out = _out_dir(args, "compare")
    if args.logs:
        if len(args.logs) != 2:
            raise UsageError("compare takes exactly two log directories")
        man = _manifest(args)
        log_a, log_b = (_read_log(p) for p in args.logs)
        for p in args.logs:
            man.inputs[str(p)] = {f: _sha256(Path(p) / f) for f in ("race_log.csv", "summary.json")}
    else:
        sc = _load(args.scenario)
        man = _manifest(args, sc)
        log_a = _run_into(sc, "optimal", out / "optimal", man)
        log_b = _run_into(sc, "baseline", out / "baseline", man)
    try:
        cmp = compare(log_a, log_b)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None
    _write_comparison(cmp, out, man)
    man.write(out)
    s = cmp.summary
    print(f"final gap={s['final_gap']:.3f} s ({s['policy_a']} vs {s['policy_b']}); "
          f"delay {s['delay_a']:.3f} s vs {s['delay_b']:.3f} s")
    return EXIT_OK


def _run_into(sc, policy, out: Path, man: RunManifest) -> RaceLog:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    lg = run_race(sc, policy)
    man.wall_times[f"simulate_{policy}"] = time.perf_counter() - t0
    files = lg.write(out)
    man.add_outputs([p for k, p in files.items() if k != "timing"], out.parent)
    return lg


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _csv_table(path: Path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")


def _report_tables(sc, log_a: RaceLog, log_b: RaceLog, cmp, out: Path) -> dict[str, Path]:
    paths = {}
    # lap-time map: fitted PWA (and the generating curve when known)
    lo, hi = sc.maps.base.domain
    d = np.linspace(lo, hi, 200)
    fit = eval_lap_time(sc.maps.base, d)
    truth = synth_ground_truth(sc.params).lap_time(d) if sc.params is not None else np.full_like(d, np.nan)
    paths["lap_map"] = out / "lap_map.csv"
    _csv_table(paths["lap_map"], ("dt_charge", "t_lap_truth", "t_lap_fit", "t_lap_in_fit"),
               zip(d, truth, fit, eval_lap_time(sc.maps.inlap, d)))
    # distance and position over time
    rows = []
    for lg in (log_a, log_b):
        for r in lg.ms_records:
            rows.append((lg.summary["policy"], float(r["t_end"]), float(r["s"]) / sc.n_ms, int(r["position"])))
    paths["distance_position"] = out / "distance_position.csv"
    _csv_table(paths["distance_position"], ("policy", "t", "distance_laps", "position"), rows)
    # per-lap gap, SoC difference and cumulative delay
    paths["gap_soc"] = out / "gap_soc.csv"
    _csv_table(paths["gap_soc"], ("lap", "time_gap", "dsoc", "soc_a", "soc_b"),
               [(r["lap"], r["time_gap"], r["dsoc"], r["soc_a"], r["soc_b"]) for r in cmp.rows])
    paths["delay"] = out / "delay.csv"
    _csv_table(paths["delay"], ("lap", "delay_a", "delay_b"),
               [(r["lap"], r["delay_a"], r["delay_b"]) for r in cmp.rows])
    return paths


def _report_figures(tables: dict[str, Path], labels, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def load(key):
        return np.genfromtxt(tables[key], delimiter=",", names=True, dtype=None, encoding=None)

    figs = []
    lm = load("lap_map")
    fig, ax = plt.subplots(figsize=(6, 4))
    if np.isfinite(lm["t_lap_truth"]).any():
        ax.plot(lm["dt_charge"], lm["t_lap_truth"], "k-", lw=2, label="generating curve")
    ax.plot(lm["dt_charge"], lm["t_lap_fit"], "C0--", label="PWA fit")
    ax.set_xlabel("equivalent charge time per lap [s]")
    ax.set_ylabel("lap time [s]")
    ax.legend()
    figs.append((fig, out / "lap_map.png"))

    dp = load("distance_position")
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    for k, pol in enumerate(labels):
        sel = dp["policy"] == pol
        ax1.plot(dp["t"][sel], dp["distance_laps"][sel], f"C{k}", label=pol)
        ax2.step(dp["t"][sel], dp["position"][sel], f"C{k}", where="post", label=pol)
    ax1.set_ylabel("distance [laps]")
    ax2.set_ylabel("position")
    ax2.invert_yaxis()
    ax2.set_xlabel("race time [s]")
    ax1.legend()
    figs.append((fig, out / "distance_position.png"))

    gs = load("gap_soc")
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    ax1.plot(gs["lap"], gs["time_gap"], "C0o-")
    ax1.axhline(0.0, color="0.6", lw=0.8)
    ax1.set_ylabel(f"gap {labels[1]} - {labels[0]} [s]")
    ax2.plot(gs["lap"], 100.0 * gs["dsoc"], "C1o-")
    ax2.set_ylabel("SoC difference [%]")
    ax2.set_xlabel("lap")
    figs.append((fig, out / "gap_soc.png"))

    dl = load("delay")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(dl["lap"], dl["delay_a"], "C0o-", label=labels[0])
    ax.plot(dl["lap"], dl["delay_b"], "C1s-", label=labels[1])
    ax.set_xlabel("lap")
    ax.set_ylabel("cumulative interaction delay [s]")
    ax.legend()
    figs.append((fig, out / "delay.png"))

    paths = []
    for fig, path in figs:
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_report(args) -> int:
    sc = _load(args.scenario)
    out = _out_dir(args, "report")
    man = _manifest(args, sc)
    if args.logs:
        if len(args.logs) != 2:
            raise UsageError("report takes exactly two log directories")
        log_a, log_b = (_read_log(p) for p in args.logs)
        if log_a.summary.get("scenario_digest") != sc.digest:
            raise UsageError("logs were not produced from this scenario")
    else:
        log_a = _run_into(sc, "optimal", out / "optimal", man)
        log_b = _run_into(sc, "baseline", out / "baseline", man)
    try:
        cmp = compare(log_a, log_b)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None
    _write_comparison(cmp, out, man)
    tables = _report_tables(sc, log_a, log_b, cmp, out)
    man.add_outputs(tables.values(), out)
    if not args.no_figures:
        figs = _report_figures(tables, (log_a.summary["policy"], log_b.summary["policy"]), out)
        man.add_outputs(figs, out)
    man.write(out)
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="scenario TOML file")
    common.add_argument("--out", type=Path, help="output file or directory")

    p = argparse.ArgumentParser(prog="enduro", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"enduro {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit-maps", parents=[common], help="fit lap, stint and charge maps")
    f.add_argument("--n-fits", type=int, default=None, help="affine pieces in the lap map")
    f.set_defaults(func=cmd_fit_maps)

    s = sub.add_parser("solve-strategy", parents=[common], help="one maximum-distance solve")
    s.add_argument("--t-meas", type=float, required=True, help="elapsed race time [s]")
    s.add_argument("--t-fc", type=float, default=None, help="time to full charge [s] (scenario start value)")
    s.add_argument("--n-laps", type=int, default=None, help="current-stint lap horizon")
    s.add_argument("--n-stops", type=int, default=None, help="future stints to model")
    s.add_argument("--force-inlap", action="store_true", help="the lap now starting ends in the pit lane")
    s.add_argument("--round-stints", action="store_true", help="floor non-final stint lengths and re-solve")
    s.add_argument("--dump-lp", type=Path, default=None, help="also write the model in LP format")
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("simulate", parents=[common], help="simulate the race under one policy")
    r.add_argument("--policy", choices=POLICIES, default="optimal")
    r.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", parents=[common], help="compare two race logs (or run both policies)")
    c.add_argument("logs", nargs="*", type=Path, help="two simulate output directories")
    c.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", parents=[common], help="tables and figures for a policy comparison")
    rep.add_argument("--logs", nargs=2, type=Path, default=None, help="optimal and baseline log directories")
    rep.add_argument("--no-figures", action="store_true", help="write the CSV tables only")
    rep.set_defaults(func=cmd_report)
    return p


def _setup_logging():
    level = os.environ.get("ENDURO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"enduro {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DomainFailure as exc:
        print(f"enduro {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
