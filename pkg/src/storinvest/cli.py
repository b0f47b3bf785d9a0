"""Command line entry point: ``storinvest <command> [options]``.

Every command that produces results writes into ``<out>/<command>-<key>``
where ``key`` hashes the run manifest; repeating an identical run is a no-op
unless ``--force`` is given.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 verification
failure, 1 anything else (for example an unwritable output directory).
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

from . import cluster as clustering
from .equilibrium import compute_welfare, solve_market
from .invest import parse_regime, run_regimes, summarize
from .io import (
    REGIME_ORDER,
    RunManifest,
    emit_report,
    file_hash,
    load_scenario,
    load_solution,
    order_rows,
    resolve_scenario_path,
    run_directory,
    run_is_complete,
    save_solution,
    write_csv,
    write_json,
)
from .model import InvestmentDecision, ScenarioError
from .qpform import CompetitionMode
from .qpsolve import SolverError, SolverSettings
from .verify import certify, linearization_certificate

log = logging.getLogger("storinvest")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3, 4


class VerificationFailed(Exception):
    pass


# -- argument parsing ---------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _global_args(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--scenario", default=d("three_node"),
                   help="scenario JSON file or bundled fixture name (three_node, western_europe)")
    p.add_argument("--out", default=d("runs"), help="root directory for run outputs")
    p.add_argument("--workers", type=int, default=d(1), help="processes for the decision enumeration")
    p.add_argument("--eps-abs", type=float, default=d(SolverSettings.eps_abs))
    p.add_argument("--eps-rel", type=float, default=d(SolverSettings.eps_rel))
    p.add_argument("--max-iter", type=int, default=d(SolverSettings.max_iter))
    p.add_argument("--no-polish", action="store_true", default=d(False))
    p.add_argument("--seed", type=int, default=d(0),
                   help="recorded in the manifest; the solver itself is deterministic")
    p.add_argument("--force", action="store_true", default=d(False), help="rerun even if results exist")
    p.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storinvest", description=__doc__.split("\n")[0])
    _global_args(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the market for one investment decision")
    _global_args(p, suppress=True)
    p.add_argument("--mode", default="pc", help="pc (perfect competition) or co (Cournot)")
    p.add_argument("--decision", default="",
                   help="storage sizes per node, e.g. 'n3=100,n5=100'; omitted nodes get 0")
    p.add_argument("--cost", type=float, help="investment cost override (EUR/MWh)")

    p = sub.add_parser("invest", help="enumerate storage investments for one or more regimes")
    _global_args(p, suppress=True)
    p.add_argument("--investor", default="sw",
                   help="comma list of sw, merchant, cp; or 'all' for every regime")
    p.add_argument("--mode", default="pc", help="comma list of pc, co")
    cost = p.add_mutually_exclusive_group()
    cost.add_argument("--cost", type=float, help="investment cost override (EUR/MWh)")
    cost.add_argument("--cost-sweep", type=_float_list, help="comma list of investment costs")
    p.add_argument("--baseline", help="'no-invest' or a previous report.json to difference against")
    p.add_argument("--table", action="store_true", help="also write the per-decision enumeration tables")

    p = sub.add_parser("cluster", help="pick weighted representative weeks from hourly data")
    _global_args(p, suppress=True)
    p.add_argument("--weeks", type=int, required=True, help="number of representative weeks k")
    p.add_argument("--input", required=True, help="hourly CSV: " + ",".join(clustering.CSV_HEADER))
    p.add_argument("--linkage", default="ward", choices=clustering.LINKAGES)
    p.add_argument("--capacities", help="JSON {region: {wind: MW, solar: MW}} for scaling renewables")
    p.add_argument("--skeleton", help="scenario JSON without clusters; writes the reduced scenario")

    p = sub.add_parser("verify", help="check a saved solution against independent certificates")
    _global_args(p, suppress=True)
    p.add_argument("--solution", required=True, help="solution JSON written by solve or invest")
    p.add_argument("--mode", help="check under these market rules instead of the solution's own")
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("report", help="merge reports of earlier runs into one table")
    _global_args(p, suppress=True)
    p.add_argument("runs", nargs="+", help="run directories or report.json files")
    p.add_argument("--baseline", help="report.json whose rows are subtracted")
    return parser


# -- helpers ------------------------------------------------------------------------

def _settings(args) -> SolverSettings:
    return SolverSettings(eps_abs=args.eps_abs, eps_rel=args.eps_rel, max_iter=args.max_iter,
                          polish=not args.no_polish)


def _solver_dict(settings: SolverSettings) -> dict:
    return dataclasses.asdict(settings)


def _parse_decision(text: str, scenario) -> InvestmentDecision:
    cat = scenario.catalog
    sizes = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, val = part.partition("=")
        if not sep:
            raise ScenarioError(f"decision entry {part!r} is not of the form node=MWh")
        if name.strip() not in scenario.nodes:
            raise ScenarioError(f"decision names unknown node {name.strip()!r}")
        try:
            sizes[scenario.node_index(name.strip())] = float(val)
        except ValueError:
            raise ScenarioError(f"decision size {val!r} is not a number") from None
    try:
        return InvestmentDecision.from_sizes(cat, sizes)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


def _regimes(investor: str, mode: str) -> list[str]:
    inv = [v.strip().lower() for v in investor.split(",") if v.strip()]
    modes = [v.strip().lower() for v in mode.split(",") if v.strip()]
    if inv == ["all"]:
        return list(REGIME_ORDER)
    labels = []
    for i in inv:
        if i == "cp":
            labels.append("CP")
            continue
        kind = {"sw": "SW", "welfare": "SW", "merchant": "M", "m": "M"}.get(i)
        if kind is None:
            raise ScenarioError(f"unknown investor {i!r}; expected sw, merchant or cp")
        for m in modes:
            labels.append(f"{kind}-{CompetitionMode.parse(m).value.upper()}")
    for lab in labels:
        parse_regime(lab)
    return [r for r in REGIME_ORDER if r in labels]


def _start_run(args, command: str, scenario_ref: str | None, regimes=(), costs=(), options=None):
    scen_hash = file_hash(resolve_scenario_path(scenario_ref)) if scenario_ref else ""
    manifest = RunManifest(
        command=command, scenario=str(scenario_ref or ""), scenario_hash=scen_hash,
        regimes=list(regimes), solver=_solver_dict(_settings(args)), cost_sweep=[float(c) for c in costs],
        options={"seed": args.seed, **(options or {})},
    )
    run_dir = run_directory(args.out, manifest)
    if run_is_complete(run_dir) and not args.force:
        print(f"up to date: {run_dir} (use --force to recompute)")
        return manifest, run_dir, False
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create run directory {run_dir}: {exc}") from exc
    write_json(run_dir / "manifest.json", manifest.to_dict())
    return manifest, run_dir, True


def _finish_run(manifest: RunManifest, run_dir: Path) -> None:
    manifest.finished = _dt.datetime.now(_dt.timezone.utc).isoformat()
    write_json(run_dir / "manifest.json", manifest.to_dict())


def _print_rows(rows) -> None:
    cols = ("model", "SW", "IS", "PS", "CS", "GR", "price_mean", "investment_total_gwh", "investment_by_node")
    print("  ".join(f"{c:>14}" for c in cols))
    for r in rows:
        cells = [f"{r[c]:>14.6g}" if isinstance(r.get(c), float) else f"{str(r.get(c, '')):>14}" for c in cols]
        print("  ".join(cells))


def _load_baseline(ref: str) -> dict:
    path = Path(ref)
    if path.is_dir():
        path = path / "report.json"
    try:
        rows = json.loads(path.read_text())["rows"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read baseline report {ref!r}: {exc}") from None
    return {r["model"]: r for r in rows}


# -- commands -----------------------------------------------------------------------

def cmd_solve(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.cost is not None:
        scenario = scenario.with_cost(args.cost)
    mode = CompetitionMode.parse(args.mode)
    z = _parse_decision(args.decision, scenario)
    manifest, run_dir, fresh = _start_run(
        args, "solve", args.scenario, regimes=[mode.value.upper()],
        costs=[scenario.catalog.cost], options={"decision": list(z.choice)})
    if not fresh:
        return EXIT_OK
    eq = solve_market(scenario, mode, z, _settings(args))
    welfare = compute_welfare(scenario, eq, z)
    row = summarize(mode.value.upper(), eq, welfare, scenario.nodes)
    emit_report([row], run_dir, manifest, extra={"welfare": welfare.to_record()})
    save_solution(run_dir / "solution.json", eq, scenario_ref=str(args.scenario),
                  scenario_hash=manifest.scenario_hash, manifest=manifest)
    _finish_run(manifest, run_dir)
    _print_rows([row])
    print(f"wrote {run_dir}")
    return EXIT_OK


def cmd_invest(args) -> int:
    scenario = load_scenario(args.scenario)
    regimes = _regimes(args.investor, args.mode)
    costs = args.cost_sweep or [args.cost if args.cost is not None else scenario.catalog.cost]
    baseline = None
    if args.baseline and args.baseline != "no-invest":
        baseline = _load_baseline(args.baseline)
    manifest, run_dir, fresh = _start_run(
        args, "invest", args.scenario, regimes=regimes, costs=costs,
        options={"baseline": args.baseline, "table": bool(args.table)})
    if not fresh:
        return EXIT_OK
    results = run_regimes(scenario, regimes, costs, _settings(args), args.workers)
    sweep = len(costs) > 1
    sweep_rows = []
    for c in costs:
        rows = [results[(lab, c)].summary(scenario.nodes) for lab in regimes]
        base = baseline
        if args.baseline == "no-invest":
            base = {lab: results[(lab, c)].reference for lab in regimes}
        stem = f"report_cost{c:g}" if sweep else "report"
        emit_report(rows, run_dir, manifest, baseline=base, stem=stem,
                    extra={"cost": c, "stats": {lab: results[(lab, c)].stats for lab in regimes}})
        for lab in regimes:
            res = results[(lab, c)]
            suffix = f"_cost{c:g}" if sweep else ""
            save_solution(run_dir / f"solution_{lab}{suffix}.json", res.equilibrium,
                          scenario_ref=str(args.scenario), scenario_hash=manifest.scenario_hash,
                          manifest=manifest)
            if args.table:
                trows = res.table_rows(scenario.nodes)
                write_csv(run_dir / f"enumeration_{lab}{suffix}.csv", trows, list(trows[0]), manifest)
        sweep_rows += [{"cost": c, **r} for r in order_rows(rows)]
        print(f"investment cost {c:g} EUR/MWh")
        _print_rows(order_rows(rows))
    if sweep:
        write_csv(run_dir / "sweep.csv", sweep_rows, list(sweep_rows[0]), manifest)
        write_json(run_dir / "sweep.json", {"manifest": manifest.to_dict(), "rows": sweep_rows})
    _finish_run(manifest, run_dir)
    print(f"wrote {run_dir}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    series = clustering.read_hourly_csv(args.input)
    caps = None
    if args.capacities:
        try:
            caps = json.loads(Path(args.capacities).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read capacities {args.capacities!r}: {exc}") from None
    manifest = RunManifest(command="cluster", scenario=str(args.input), scenario_hash=file_hash(args.input),
                           options={"weeks": args.weeks, "linkage": args.linkage, "seed": args.seed,
                                    "capacities": caps, "skeleton": args.skeleton})
    run_dir = run_directory(args.out, manifest)
    if run_is_complete(run_dir) and not args.force:
        print(f"up to date: {run_dir} (use --force to recompute)")
        return EXIT_OK
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "manifest.json", manifest.to_dict())
    try:
        res = clustering.cluster_weeks(clustering.normalize(series, caps), args.weeks, args.linkage)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    reps = [{"cluster": c, "week": int(w), "size": int(n), "weight": float(wt)}
            for c, (w, n, wt) in enumerate(zip(res.representatives, res.sizes, res.weights))]
    assign = [{"week": w, "cluster": int(c)} for w, c in enumerate(res.assignments)]
    write_csv(run_dir / "representatives.csv", reps, ["cluster", "week", "size", "weight"], manifest)
    write_csv(run_dir / "assignments.csv", assign, ["week", "cluster"], manifest)
    write_json(run_dir / "clusters.json", {"manifest": manifest.to_dict(), **res.to_dict()})
    if args.skeleton:
        try:
            skeleton = json.loads(Path(args.skeleton).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read skeleton {args.skeleton!r}: {exc}") from None
        from .io import save_scenario
        scen = clustering.reduce_scenario(series, args.weeks, skeleton, capacities=caps, result=res)
        save_scenario(scen, run_dir / "scenario.json")
    _finish_run(manifest, run_dir)
    for r in reps:
        print(f"cluster {r['cluster']}: week {r['week'] + 1:>2}  size {r['size']:>2}  weight {r['weight']:.6f}")
    print(f"wrote {run_dir}")
    return EXIT_OK


def cmd_verify(args, scenario_given: bool) -> int:
    path = Path(args.solution)
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    ref = args.scenario if scenario_given or not meta.get("scenario") else meta["scenario"]
    scenario = load_scenario(ref)
    eq = load_solution(path, scenario)
    mode = CompetitionMode.parse(args.mode) if args.mode else eq.mode
    cert = certify(scenario, eq, mode, tol=args.tol)
    lin = linearization_certificate(eq)
    for kind, fam, viol, scale, ok in cert.table():
        print(f"{'PASS' if ok else 'FAIL'}  {kind:<8} {fam:<24} violation {viol:.3e}  scale {scale:.3e}")
    print(f"{'PASS' if lin.passed else 'FAIL'}  linearization certificate")
    for line in lin.failures():
        print(f"      {line}")
    if cert.passed and lin.passed:
        print(f"verified under {mode.value} rules")
        return EXIT_OK
    raise VerificationFailed(f"solution {path} fails verification under {mode.value} rules")


def cmd_report(args) -> int:
    rows, sources = [], []
    for ref in args.runs:
        path = Path(ref)
        if path.is_dir():
            path = path / "report.json"
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read report {ref!r}: {exc}") from None
        rows += data.get("rows", [])
        sources.append(str(path))
    seen = {}
    for r in rows:
        seen.setdefault(r["model"], r)
    rows = order_rows(seen.values())
    manifest = RunManifest(command="report", scenario="", scenario_hash="",
                           regimes=[r["model"] for r in rows],
                           options={"sources": [file_hash(s) for s in sources], "baseline": args.baseline})
    run_dir = run_directory(args.out, manifest)
    if run_is_complete(run_dir) and not args.force:
        print(f"up to date: {run_dir} (use --force to recompute)")
        return EXIT_OK
    baseline = _load_baseline(args.baseline) if args.baseline else None
    emit_report(rows, run_dir, manifest, baseline=baseline, extra={"sources": sources})
    _finish_run(manifest, run_dir)
    _print_rows(rows)
    print(f"wrote {run_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    scenario_given = any(a == "--scenario" or a.startswith("--scenario=") for a in argv)
    try:
        if args.command == "verify":
            return cmd_verify(args, scenario_given)
        return {"solve": cmd_solve, "invest": cmd_invest, "cluster": cmd_cluster,
                "report": cmd_report}[args.command](args)
    except VerificationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ScenarioError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
