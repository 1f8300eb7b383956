"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .errors import NumericalError, ValidationError
from .harness import (
    default_targets,
    figure1_data,
    load_config,
    plot_curves,
    run_ensemble,
    verify_suite,
    write_curves_csv,
    write_figure1_csv,
    write_summary_json,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_VERIFICATION = 0, 1, 2, 3


class VerificationFailed(Exception):
    pass


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Continuous-measurement purification: simulation and bounds."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Flat key: value file.")
@click.option("--n", "N", type=int, help="System dimension N.")
@click.option("--gamma", type=float)
@click.option("--dt", type=float)
@click.option("--t-final", "t_final", type=float)
@click.option("--trajectories", "n_trajectories", type=int)
@click.option("--seed", "master_seed", type=int)
@click.option("--mode", type=click.Choice(["unassisted", "feedback"]))
@click.option("--perm-mode", "permutation_mode", type=click.Choice(["exhaustive", "greedy"]))
@click.option("--thinning", type=int, help="Record the ensemble every this many steps.")
@click.option("--out", "output_path", type=click.Path(dir_okay=False), help="Curves CSV; a .json summary is written alongside.")
@click.option("--workers", type=int, default=None, help="Worker processes (capped by QPURIFY_THREADS).")
def simulate(config_path, workers, **overrides):
    """Run an ensemble and write curves (CSV) plus a summary (JSON)."""
    cfg = load_config(config_path, **overrides)
    summary = run_ensemble(cfg, workers=workers)
    out = Path(cfg.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_curves_csv(summary, out)
    write_summary_json(summary, out.with_suffix(".json"))
    click.echo(
        f"{cfg.mode} N={cfg.N}: {summary.n_ok}/{cfg.n_trajectories} trajectories, "
        f"final <L> = {summary.mean_impurity[-1]:.6g} +- {summary.stderr_impurity[-1]:.2g} -> {out}"
    )


@cli.command()
@click.option("--n-list", default="2,3,4", show_default=True)
@click.option("--targets", default=None, help="Comma-separated target impurities (default: log grid 1e-10..0.45).")
@click.option("--gamma", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="figure1.csv", show_default=True)
def figure1(n_list, targets, gamma, out):
    """Speed-up lower bound versus target impurity."""
    Ns = [int(x) for x in _floats(n_list)]
    Ls = _floats(targets) if targets else list(default_targets())
    rows = figure1_data(Ns, Ls, gamma)
    write_figure1_csv(rows, out)
    click.echo(f"{len(rows)} rows -> {out}")


@cli.command()
@click.option("--n-max", type=int, default=4, show_default=True)
@click.option("--gamma", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Also write the JSON report here.")
def verify(n_max, gamma, out):
    """Run the analytic verification suite."""
    report = verify_suite(n_max, gamma)
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    for c in report["checks"]:
        click.echo(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    if not report["passed"]:
        raise VerificationFailed("verification suite reported failures")


@cli.command()
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def plot(in_path, out):
    """Quick-look SVG from a curves or figure1 CSV."""
    plot_curves(in_path, out)
    click.echo(f"-> {out}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="qpurify", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except click.exceptions.Abort:
        return EXIT_VALIDATION
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    except (NumericalError, ArithmeticError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL
    except VerificationFailed as exc:
        click.echo(str(exc), err=True)
        return EXIT_VERIFICATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
