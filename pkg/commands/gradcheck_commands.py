"""
Gradcheck Command - compare propagated gradients with finite differences
"""

import sys
from functools import partial

import click

from commands.common import fail, new_run_directory, output_dir_option, seed_option, write_run
from config import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE
from services.errors import GoatError, SingularOverlapError
from services.optimize import GRADIENT_TOLERANCE, gradient_check
from services.problem_config import build_problem, load_problem_config, problem_config_to_dict
from storage import now_iso, write_csv

SLOT_COLUMNS = ["slot", "control", "term", "kind", "propagator_error", "goal_gradient", "goal_difference", "goal_error"]


@click.command("gradcheck")
@click.argument("config_path", type=click.Path(dir_okay=False))
@seed_option
@output_dir_option
@click.option("--step", type=click.FloatRange(min=0, min_open=True), default=1e-6, show_default=True,
              help="Central-difference step.")
@click.option("--tolerance", type=click.FloatRange(min=0, min_open=True), default=GRADIENT_TOLERANCE,
              show_default=True, help="Largest relative error that passes.")
def gradcheck_command(config_path, seed, output_dir, step, tolerance):
    """Check the gradient of the problem in CONFIG_PATH at its initial parameters."""
    started_at = now_iso()
    config, message = load_problem_config(config_path)
    if config is None:
        fail(message, EXIT_USAGE)
    try:
        problem = build_problem(config, seed=seed)
    except (GoatError, ValueError) as exc:
        fail(f"{config_path}: {exc}", EXIT_USAGE)

    try:
        report = gradient_check(problem, step=step, tolerance=tolerance)
    except SingularOverlapError as exc:
        fail(str(exc), EXIT_NUMERICAL)
    except GoatError as exc:
        fail(f"gradient check failed: {exc}", EXIT_NUMERICAL)

    run_dir = new_run_directory("gradcheck", output_dir or config.output_dir)
    summary = {key: value for key, value in report.items() if key != "slots"}
    summary["slots_checked"] = len(report["slots"])
    write_run(run_dir, [("gradcheck.csv", partial(write_csv, columns=SLOT_COLUMNS, rows=report["slots"]))],
              "gradcheck", report["status"], problem_config_to_dict(config), {"seed": problem.seed},
              started_at, summary)

    click.echo(f"status={report['status']} slots={len(report['slots'])} "
               f"max_error={report['max_error']:.3e} run_dir={run_dir}")
    sys.exit(EXIT_OK if report["status"] == "passed" else EXIT_NUMERICAL)
