"""Command-line entry point.

Subcommands: ``run`` (decentralized market over the horizon), ``benchmark``
(no demand response), ``oracle`` (every slot cleared centrally), ``compare``
(market against the central solution slot by slot), ``gen`` (synthetic
feeder) and ``report`` (recompute the summary of a finished run from its
files).

Exit codes: 0 on success, 1 on invalid input, 2 when a run did not converge.
"""
from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import jsonschema

from gridtrade.grid import (ScenarioError, SyntheticSpec, generate_scenario, load_scenario,
                            resolve_scenario_path, write_scenario, schema)
from gridtrade.linpf import write_lambda_csv
from gridtrade.market import MODES, World, run_horizon, write_outputs
from gridtrade.market import report as report_run

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 1, 2


class UsageFailure(click.ClickException):
    exit_code = EXIT_INVALID


def _load(path: str):
    try:
        return load_scenario(resolve_scenario_path(path))
    except FileNotFoundError:
        raise UsageFailure(f"scenario file not found: {path}") from None
    except ScenarioError as exc:
        raise UsageFailure(f"invalid scenario {path}: {exc}") from None


def _world(path: str | None):
    if path is None:
        return None
    try:
        return World.read_csv(path)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageFailure(f"cannot read wake-event log {path}: {exc}") from None


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageFailure(f"output directory {path} is not writable: {exc}") from None
    return out


def _varthetas(text: str | None) -> list[float]:
    if not text:
        return []
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageFailure(f"--sweep-vartheta expects comma-separated numbers, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise UsageFailure("--sweep-vartheta values must be nonnegative")
    return vals


def _finish(summary: dict, out: Path, converged: bool) -> None:
    click.echo(json.dumps({"out": str(out), "converged": converged,
                           "iterations": summary["iterations"],
                           "par": summary["par"]["aggregate"],
                           "peak_demand": summary["peak_demand"]["aggregate"],
                           "dominance_violations": summary["dominance_violations"]}))
    if not converged:
        click.echo(f"error: not every slot met the stopping test; see {out / 'slots.csv'}", err=True)
        sys.exit(EXIT_NONCONVERGED)


def _market_run(scenario, mode, seed, out, threads, max_iters, dump_lambda, dump_signals, world):
    res = run_horizon(scenario, mode, seed, world, threads, max_iters)
    summ = write_outputs(res, out, dump_signals)
    (world or World.sample(scenario, res.seed)).write_csv(out / "world.csv")
    if dump_lambda:
        from gridtrade.linpf import assemble_lambda
        write_lambda_csv(assemble_lambda(scenario.network), out / "lambda.csv")
    return res, summ


_common = [
    click.option("--scenario", "scenario_path", required=True,
                 help="Scenario file, or the name of a shipped scenario."),
    click.option("--seed", type=int, default=None, help="Override the scenario seed."),
    click.option("--out", "out", default="out", show_default=True, help="Output directory."),
    click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True),
    click.option("--max-iters", type=click.IntRange(min=1), default=None,
                 help="Iteration cap per slot (defaults to the scenario's)."),
    click.option("--world", "world_path", default=None,
                 help="Replay wake events from a CSV log (slot, aggregator_bus, appliance_id)."),
    click.option("--dump-lambda", is_flag=True, help="Also write the flow matrix as lambda.csv."),
    click.option("--dump-signals", is_flag=True, help="Also write per-iteration prices as signals.csv."),
]


def common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact")
def cli():
    """Decentralized energy trading on a linearized distribution network."""


@cli.command()
@common
@click.option("--mode", type=click.Choice(MODES), default="uncertainty", show_default=True)
@click.option("--sweep-vartheta", default=None,
              help="Comma-separated operator risk weights; one run per value under OUT/vartheta_<v>.")
def run(scenario_path, seed, out, threads, max_iters, world_path, dump_lambda, dump_signals, mode,
        sweep_vartheta):
    """Run the market over the full horizon."""
    scen = _load(scenario_path)
    world = _world(world_path)
    out = _outdir(out)
    sweep = _varthetas(sweep_vartheta)
    if not sweep:
        res, summ = _market_run(scen, mode, seed, out, threads, max_iters, dump_lambda, dump_signals, world)
        _finish(summ, out, res.converged)
        return
    rows, all_ok = [], True
    for vt in sweep:
        sub = _outdir(str(out / f"vartheta_{vt:g}"))
        res, summ = _market_run(scen.with_market(vartheta=vt), mode, seed, sub, threads, max_iters,
                                dump_lambda, dump_signals, world)
        com = res.committed
        rows.append([f"{vt:g}", repr(float(com["p_conv"].sum())), repr(float(com["p_ren"].sum())),
                     repr(float(summ["par"]["aggregate"] or 0.0)), int(res.converged)])
        all_ok &= res.converged
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vartheta", "conventional_energy", "renewable_energy", "par", "converged"])
        w.writerows(rows)
    click.echo(json.dumps({"out": str(out), "sweep": [r[0] for r in rows], "converged": all_ok}))
    if not all_ok:
        click.echo("error: some sweep runs did not converge", err=True)
        sys.exit(EXIT_NONCONVERGED)


@cli.command()
@common
def benchmark(scenario_path, seed, out, threads, max_iters, world_path, dump_lambda, dump_signals):
    """Run without demand response (appliances at nominal power once awake)."""
    scen = _load(scenario_path)
    world = _world(world_path)
    out = _outdir(out)
    res, summ = _market_run(scen, "benchmark", seed, out, threads, max_iters, dump_lambda, dump_signals,
                            world)
    _finish(summ, out, res.converged)


@cli.command()
@click.option("--scenario", "scenario_path", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", default="out", show_default=True)
@click.option("--world", "world_path", default=None)
@click.option("--tol", type=float, default=1e-7, show_default=True, help="Central solver tolerance.")
def oracle(scenario_path, seed, out, world_path, tol):
    """Clear every slot centrally along the rolling horizon."""
    from gridtrade.oracle import OracleError, run_central

    scen = _load(scenario_path)
    world = _world(world_path)
    out = _outdir(out)
    try:
        res = run_central(scen, seed, world, tol)
    except OracleError as exc:
        click.echo(f"error: central solver failed: {exc}", err=True)
        sys.exit(EXIT_NONCONVERGED)
    summ = write_outputs(res, out)
    _finish(summ, out, res.converged)


@cli.command()
@click.option("--scenario", "scenario_path", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", default="out", show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--max-iters", type=click.IntRange(min=1), default=None)
@click.option("--world", "world_path", default=None)
def compare(scenario_path, seed, out, threads, max_iters, world_path):
    """Run the market and compare each slot with the central solution."""
    from gridtrade.oracle import OracleError, compare_market

    scen = _load(scenario_path)
    world = _world(world_path)
    out = _outdir(out)
    try:
        rep, res = compare_market(scen, seed, world, threads, max_iters)
    except OracleError as exc:
        click.echo(f"error: central solver failed: {exc}", err=True)
        sys.exit(EXIT_NONCONVERGED)
    write_outputs(res, out / "market")
    jsonschema.validate(rep, schema("compare"))
    (out / "compare.json").write_text(json.dumps(rep, indent=1) + "\n")
    click.echo(json.dumps({k: v for k, v in rep.items() if k != "slots"}))
    if not res.converged:
        click.echo("error: the market did not converge in every slot", err=True)
        sys.exit(EXIT_NONCONVERGED)


@cli.command()
@click.option("--buses", type=click.IntRange(min=2), required=True)
@click.option("--gens", type=click.IntRange(min=1), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--horizon", type=click.IntRange(min=1), default=24, show_default=True)
@click.option("--users", default="100,500", show_default=True, help="Households per aggregator, MIN,MAX.")
@click.option("--out", "out", default=None, help="Scenario file to write (stdout when omitted).")
def gen(buses, gens, seed, horizon, users, out):
    """Generate a synthetic radial feeder scenario."""
    try:
        lo, hi = (int(x) for x in users.split(","))
    except ValueError:
        raise UsageFailure(f"--users expects MIN,MAX, got {users!r}") from None
    try:
        scen = generate_scenario(SyntheticSpec(buses, gens, (lo, hi), horizon=horizon), seed)
    except ScenarioError as exc:
        raise UsageFailure(str(exc)) from None
    if out is None:
        from gridtrade.grid import scenario_to_dict
        click.echo(json.dumps(scenario_to_dict(scen), indent=1))
        return
    try:
        write_scenario(scen, out)
    except OSError as exc:
        raise UsageFailure(f"cannot write {out}: {exc}") from None
    click.echo(json.dumps({"out": out, "buses": buses, "generators": len(scen.generators),
                           "aggregators": len(scen.aggregators)}))


@cli.command()
@click.option("--out", "out", required=True, help="Directory of a finished run.")
def report(out):
    """Recompute profits, PAR and peaks from a run's output files."""
    path = Path(out)
    if not (path / "committed.csv").exists():
        raise UsageFailure(f"{out} does not contain a finished run (committed.csv missing)")
    try:
        summ = report_run(path)
        jsonschema.validate(summ, schema("summary"))
    except (OSError, KeyError, ValueError, jsonschema.ValidationError) as exc:
        raise UsageFailure(f"cannot rebuild the report from {out}: {exc}") from None
    (path / "report.json").write_text(json.dumps(summ, indent=1, sort_keys=True) + "\n")
    click.echo(json.dumps(summ, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        cli.main(args=argv, prog_name="gridtrade", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return EXIT_INVALID
    except click.exceptions.Abort:
        return EXIT_INVALID
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
