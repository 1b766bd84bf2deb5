"""
Optimize Command - run one optimisation from a problem config
"""

import logging
import sys
from functools import partial

import click

from commands.common import (
    fail, max_iterations_option, new_run_directory, output_dir_option, seed_option,
    status_exit_code, threshold_option, write_run,
)
from config import EXIT_NUMERICAL, EXIT_USAGE
from services.densemath import derive_seed
from services.errors import GoatError
from services.optimize import (
    alternating_optimize, goat_optimize, multistart, nelder_mead_optimize, reference_check,
)
from services.problem_config import METHODS, build_problem, load_problem_config, problem_config_to_dict
from storage import now_iso, write_csv, write_json, write_trace

logger = logging.getLogger(__name__)


@click.command("optimize")
@click.argument("config_path", type=click.Path(dir_okay=False))
@seed_option
@output_dir_option
@max_iterations_option
@threshold_option
@click.option("--method", type=click.Choice(METHODS), default=None, help="Optimizer (overrides the config).")
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Processes for multistart runs.")
def optimize_command(config_path, seed, output_dir, max_iterations, threshold, method, workers):
    """Optimize the controls described by CONFIG_PATH."""
    started_at = now_iso()
    config, message = load_problem_config(config_path)
    if config is None:
        fail(message, EXIT_USAGE)
    try:
        problem = build_problem(config, seed=seed, threshold=threshold, max_iterations=max_iterations)
    except (GoatError, ValueError) as exc:
        fail(f"{config_path}: {exc}", EXIT_USAGE)
    method = method or config.method

    starts = []
    try:
        if method == "nelder-mead":
            trace = nelder_mead_optimize(problem)
        elif method == "goat-alternating":
            trace = alternating_optimize(problem)
        elif config.starts > 1:
            result = multistart(problem, config.starts, problem.seed, workers=workers)
            trace, starts = result.best, result.summaries
        else:
            trace = goat_optimize(problem)
        check = reference_check(problem, trace.parameters) if trace.converged else {}
    except GoatError as exc:
        fail(str(exc), EXIT_NUMERICAL)

    run_dir = new_run_directory("optimize", output_dir or config.output_dir)
    parameters = {
        "g": trace.value,
        "status": trace.status,
        "parameters": trace.parameters,
        "trainable": problem.ansatz.trainable.tolist(),
        "layout": [
            {"control": slot.control, "term": slot.term, "kind": slot.kind}
            for slot in problem.ansatz.layout
        ],
    }
    writers = [("trace.csv", partial(write_trace, trace=trace)),
               ("parameters.json", partial(write_json, data=parameters))]
    if starts:
        writers.append(("starts.csv", partial(write_csv, columns=list(starts[0]), rows=starts)))
    seeds = {"seed": problem.seed}
    if config.randomize:
        seeds["initial_parameters"] = derive_seed(problem.seed, 0)
    summary = {
        "method": method,
        "status": trace.status,
        "g": trace.value,
        "iterations": trace.iterations,
        "evaluations": trace.evaluations,
        "seconds": trace.seconds,
        "threshold": problem.threshold,
        "message": trace.message,
        **check,
    }
    write_run(run_dir, writers, "optimize", trace.status, problem_config_to_dict(config), seeds, started_at, summary)

    click.echo(f"status={trace.status} g={trace.value:.3e} iterations={trace.iterations} run_dir={run_dir}")
    sys.exit(status_exit_code(trace.status))
