"""
Study Command - run one of the scripted numerical studies
"""

import logging
import sys
from dataclasses import fields, replace
from functools import partial

import click

from commands.common import (
    fail, max_iterations_option, new_run_directory, output_dir_option, seed_option, threshold_option, write_run,
)
from config import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE
from services.errors import GoatError
from services.problem_config import load_study_spec
from services.studies import (
    STUDY_NAMES, run_dim_study, run_goat_vs_nm, run_high_accuracy_cnot, run_pwc_study, spec_to_dict,
)
from storage import now_iso, write_csv, write_trace

logger = logging.getLogger(__name__)

RUNNERS = {
    "pwc": run_pwc_study,
    "dims": run_dim_study,
    "goat-vs-nm": run_goat_vs_nm,
    "cnot-hi": run_high_accuracy_cnot,
}


def apply_overrides(spec, **overrides):
    """Replace the fields of ``spec`` named in ``overrides`` that are set and exist on it."""
    names = {f.name for f in fields(spec)}
    changes = {key: value for key, value in overrides.items() if value is not None and key in names}
    return replace(spec, **changes) if changes else spec


@click.command("study")
@click.argument("name", type=click.Choice(STUDY_NAMES))
@click.argument("spec_path", required=False, type=click.Path(dir_okay=False))
@seed_option
@output_dir_option
@max_iterations_option
@threshold_option
def study_command(name, spec_path, seed, output_dir, max_iterations, threshold):
    """Run study NAME, optionally configured by the JSON file SPEC_PATH."""
    started_at = now_iso()
    spec, message = load_study_spec(name, spec_path)
    if spec is None:
        fail(message, EXIT_USAGE)
    try:
        spec = apply_overrides(spec, seed=seed, threshold=threshold, max_iterations=max_iterations)
    except ValueError as exc:
        fail(str(exc), EXIT_USAGE)

    logger.info("study %s: %s", name, spec_to_dict(spec))
    try:
        result = RUNNERS[name](spec)
    except GoatError as exc:
        fail(f"study {name} failed: {exc}", EXIT_NUMERICAL)

    run_dir = new_run_directory(name, output_dir)
    writers = [("table.csv", partial(write_csv, columns=result.columns, rows=result.rows))]
    for label, trace in result.traces.items():
        writers.append((f"trace-{label}.csv", partial(write_trace, trace=trace)))
    for label, rows in result.extras.items():
        if rows:
            writers.append((f"{label}.csv", partial(write_csv, columns=list(rows[0]), rows=rows)))
    status = result.summary.get("status", "completed")
    write_run(run_dir, writers, f"study {name}", status, spec_to_dict(spec),
              {"seed": spec.seed}, started_at, result.summary)

    click.echo(f"study={name} rows={len(result.rows)} status={status} run_dir={run_dir}")
    sys.exit(EXIT_OK)
