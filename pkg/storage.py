"""
Storage module for the GOAT toolkit
Handles run directories, CSV tables, JSON documents and run manifests
"""

import csv
import json
import logging
import math
import os
import platform
import tempfile
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional

import numpy as np
import scipy

from config import OUTPUT_DIR, SCHEMA_VERSION, VERSION

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TIMESTAMP_FORMAT = "%Y%m%dT%H%M%S"


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [float(value.real), float(value.imag)]
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _sanitize(value):
    """Non-finite floats become null so the documents stay strict JSON."""
    if isinstance(value, dict):
        return {key: _sanitize(item) for key, item in value.items()}
    if isinstance(value, np.ndarray) and not np.iscomplexobj(value):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        return [_sanitize(item) for item in value]
    if isinstance(value, (float, np.floating)) and not math.isfinite(value):
        return None
    return value


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def create_run_directory(label: str, base: Optional[str] = None) -> Optional[str]:
    """
    Create a fresh timestamped directory under ``base``; never reuses one.

    Returns:
        str or None: the directory path, None if it could not be created
    """
    base = base or OUTPUT_DIR
    stamp = datetime.now().strftime(TIMESTAMP_FORMAT)
    try:
        os.makedirs(base, exist_ok=True)
        for suffix in range(1000):
            name = f"{stamp}-{label}" if suffix == 0 else f"{stamp}-{label}-{suffix}"
            path = os.path.join(base, name)
            try:
                os.mkdir(path)
            except FileExistsError:
                continue
            logger.info("run directory %s", path)
            return path
    except OSError as exc:
        logger.error("cannot create run directory under %s: %s", base, exc)
    return None


def _atomic_write(path: str, write) -> bool:
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    except OSError as exc:
        logger.error("cannot write %s: %s", path, exc)
        return False
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            write(handle)
        os.replace(temp_path, path)
        return True
    except (OSError, TypeError, ValueError) as exc:
        logger.error("cannot write %s: %s", path, exc)
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        return False


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_csv(path: str, columns: List[str], rows: Iterable[Dict]) -> bool:
    """Write a header row plus one row per dict; missing and None cells are empty."""
    rows = list(rows)

    def write(handle):
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({column: _cell(row.get(column)) for column in columns})

    return _atomic_write(path, write)


def write_json(path: str, data) -> bool:
    def write(handle):
        json.dump(_sanitize(data), handle, indent=2, default=_json_default, allow_nan=False)
        handle.write("\n")

    return _atomic_write(path, write)


TRACE_COLUMNS = ["iteration", "g", "gradient_norm", "evaluations", "hamiltonian_evaluations", "seconds"]


def write_trace(path: str, trace) -> bool:
    return write_csv(path, TRACE_COLUMNS, trace.to_rows())


def package_versions() -> Dict[str, str]:
    return {
        "goat": VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def build_manifest(command: str, status: str, config: Dict, seeds: Dict, started_at: str,
                   summary: Optional[Dict] = None, artifacts: Optional[List[str]] = None) -> Dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "status": status,
        "started_at": started_at,
        "finished_at": now_iso(),
        "versions": package_versions(),
        "seeds": seeds,
        "config": config,
        "summary": summary or {},
        "artifacts": sorted(artifacts or []),
    }


def write_manifest(run_dir: str, manifest: Dict) -> bool:
    """Write the run's single manifest; refuses to replace an existing one."""
    path = os.path.join(run_dir, MANIFEST_NAME)
    if os.path.exists(path):
        logger.error("manifest already present in %s", run_dir)
        return False
    return write_json(path, manifest)


def list_run_files(run_dir: str) -> List[str]:
    try:
        return sorted(name for name in os.listdir(run_dir) if not name.startswith(".tmp-"))
    except OSError:
        return []
