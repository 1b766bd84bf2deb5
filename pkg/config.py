"""
Runtime configuration for the GOAT optimal control toolkit
"""

import os

VERSION = "0.1.0"

# Problem configs and study specs must declare this version
SCHEMA_VERSION = 1

# Output directory, overridable from the environment
OUTPUT_DIR_ENV = "GOAT_OUTPUT_DIR"
OUTPUT_DIR = os.environ.get(OUTPUT_DIR_ENV, "results")

DEFAULT_THRESHOLD = 1e-10
HIGH_ACCURACY_THRESHOLD = 1e-12
DEFAULT_MAX_ITERATIONS = 1000

# Exit codes
EXIT_OK = 0
EXIT_CAP_HIT = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_OUTPUT = 4
