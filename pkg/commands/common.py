"""
Helpers shared by the commands: options, exit handling and run directories
"""

import os
import sys
from typing import Callable, Dict, List, Tuple

import click

from config import (
    EXIT_CAP_HIT, EXIT_NUMERICAL, EXIT_OK, EXIT_OUTPUT, EXIT_USAGE, OUTPUT_DIR, OUTPUT_DIR_ENV,
)
from services.optimize import CAP_STATUSES, CONVERGED, NO_FREE_PARAMETERS
from storage import build_manifest, create_run_directory, list_run_files, write_manifest


def seed_option(command):
    return click.option("--seed", type=int, default=None, help="Root seed (overrides the config).")(command)


def output_dir_option(command):
    return click.option(
        "--output-dir", type=click.Path(file_okay=False), envvar=OUTPUT_DIR_ENV, default=None,
        help=f"Parent directory for run directories (env {OUTPUT_DIR_ENV}, default {OUTPUT_DIR!r}).",
    )(command)


def threshold_option(command):
    return click.option(
        "--threshold", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=None,
        help="Goal threshold (overrides the config).",
    )(command)


def max_iterations_option(command):
    return click.option(
        "--max-iterations", type=click.IntRange(min=0), default=None,
        help="Iteration cap (overrides the config).",
    )(command)


def fail(message: str, code: int):
    click.echo(f"Error: {message}", err=True)
    sys.exit(code)


def status_exit_code(status: str) -> int:
    if status == CONVERGED:
        return EXIT_OK
    if status in CAP_STATUSES:
        return EXIT_CAP_HIT
    if status == NO_FREE_PARAMETERS:
        return EXIT_USAGE
    return EXIT_NUMERICAL


def new_run_directory(label: str, output_dir: str) -> str:
    run_dir = create_run_directory(label, output_dir or OUTPUT_DIR)
    if run_dir is None:
        fail(f"cannot create a run directory under {output_dir or OUTPUT_DIR}", EXIT_OUTPUT)
    return run_dir


def write_run(run_dir: str, writers: List[Tuple[str, Callable[[str], bool]]], command: str,
              status: str, config: Dict, seeds: Dict, started_at: str, summary: Dict):
    """Write every artifact, then the manifest; exits with EXIT_OUTPUT on the first failure."""
    for name, writer in writers:
        if not writer(os.path.join(run_dir, name)):
            fail(f"cannot write {name} in {run_dir}", EXIT_OUTPUT)
    manifest = build_manifest(command, status, config, seeds, started_at, summary, list_run_files(run_dir))
    if not write_manifest(run_dir, manifest):
        fail(f"cannot write the manifest in {run_dir}", EXIT_OUTPUT)
