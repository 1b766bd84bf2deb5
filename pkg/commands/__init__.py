"""
Commands Package - Initialize all CLI commands
"""

from .gradcheck_commands import gradcheck_command
from .optimize_commands import optimize_command
from .study_commands import study_command


def register_commands(cli):
    """Register all commands with the CLI group."""
    cli.add_command(optimize_command)
    cli.add_command(study_command)
    cli.add_command(gradcheck_command)
