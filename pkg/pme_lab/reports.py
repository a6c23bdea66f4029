"""
Report persistence: one JSON report per run plus per-check CSV tables for external plotting.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from pme_lab.config import CSV_FLOAT_FORMAT

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
TIMING_FILE = "timing.json"


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; numpy scalars and arrays unwrapped, non-finite floats as null."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, pd.DataFrame):
        return to_jsonable(value.to_dict(orient="list"))
    return value


def dump_json(data: dict, path: Path) -> None:
    path.write_text(json.dumps(to_jsonable(data), sort_keys=True, indent=2, allow_nan=False) + "\n")


def csv_name(index: int, check_id: str, frame: str = "") -> str:
    suffix = f"_{frame}" if frame else ""
    return f"{index:02d}_{check_id}{suffix}.csv"


def write_run_report(report, directory: Path) -> Path:
    """Writes report.json, timing.json and the CSV tables of every check. Returns the report path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    for index, result in enumerate(report.results, start=1):
        if result.series is not None:
            result.series.to_csv(directory / csv_name(index, result.id), index=False, float_format=CSV_FLOAT_FORMAT)
        for name, frame in result.frames.items():
            frame.to_csv(directory / csv_name(index, result.id, name), index=False, float_format=CSV_FLOAT_FORMAT)

    path = directory / REPORT_FILE
    dump_json(report.to_dict(), path)
    dump_json(report.timing, directory / TIMING_FILE)
    logger.info(f"Report written to {path} ({len(report.results)} checks, overall {report.overall})")
    return path


def load_report(directory: Path) -> dict:
    return json.loads((Path(directory) / REPORT_FILE).read_text())
