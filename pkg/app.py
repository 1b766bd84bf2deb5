"""
Main entry point for the GOAT optimal control toolkit.

This module provides the CLI factory. Commands are organized in separate
modules in the commands package.
"""

import logging

import click

from commands import register_commands
from config import VERSION

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def create_cli() -> click.Group:
    """
    CLI factory function to create and configure the command group.

    Returns:
        click.Group: group with every command registered
    """

    @click.group(help="Gradient optimization of analytic controls.")
    @click.version_option(VERSION, "--version", prog_name="goat")
    @click.option("-v", "--verbose", count=True, help="-v for progress, -vv for step-level detail.")
    def cli(verbose):
        level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
        logging.basicConfig(level=level, format=LOG_FORMAT)
        logging.getLogger().setLevel(level)

    register_commands(cli)
    return cli


cli = create_cli()


if __name__ == "__main__":
    cli()
