import base64
import hashlib
import math
import os
import sys
from os import PathLike
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import orjson
import pyarrow as pa
import pyarrow.csv as pa_csv
from loguru import logger


# Root directory of this library
PROJECT_ROOT = Path(__file__).parents[2]

LOG_ENV_VAR = "SOHKAN_LOG"
LOG_LEVELS = {"error": "ERROR", "warn": "WARNING", "warning": "WARNING", "info": "INFO", "debug": "DEBUG"}


def configure_logging(level: str | None = None) -> str:
    """Install a single stderr sink on the loguru logger. The level comes from `level` or, if
    that is not given, from the `SOHKAN_LOG` environment variable (error|warn|info|debug).

    Args:
        level (str | None): explicit level name, overrides the environment variable

    Returns:
        str: the loguru level that was installed
    """
    name = (level or os.environ.get(LOG_ENV_VAR) or "info").strip().lower()
    if name not in LOG_LEVELS:
        raise ValueError(f"Unknown log level '{name}' (from {LOG_ENV_VAR}). Choose from {sorted(set(LOG_LEVELS))}")

    loguru_level = LOG_LEVELS[name]
    logger.remove()
    logger.add(sys.stderr, level=loguru_level, format="{time:HH:mm:ss} | {level: <7} | {name}:{line} - {message}")
    return loguru_level


def log_system_stats():
    """
    Log the number of CPU cores on the system as well as the numerical library versions.
    """
    logger.debug(f"Number of CPU cores: {os.cpu_count()}")
    logger.debug(f"numpy {np.__version__}, pyarrow {pa.__version__}")


def generate_base64_hash(pfile: PathLike) -> str:
    sha256_hash = hashlib.sha256(Path(pfile).read_bytes()).digest()
    return base64.urlsafe_b64encode(sha256_hash).decode("utf-8")


def _to_builtin(value: Any) -> Any:
    # orjson does not know numpy scalars/arrays and turns nan/inf into null on its own
    if isinstance(value, Mapping):
        return {str(key): _to_builtin(val) for key, val in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(val) for val in value]
    if isinstance(value, np.ndarray):
        return [_to_builtin(val) for val in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(data: Any, pfout: PathLike) -> Path:
    """Write `data` as indented JSON. Keys keep their insertion order and floats use the shortest
    representation that round-trips exactly.
    """
    pfout = Path(pfout)
    pfout.parent.mkdir(parents=True, exist_ok=True)
    pfout.write_bytes(orjson.dumps(_to_builtin(data), option=orjson.OPT_INDENT_2) + b"\n")
    return pfout


def read_json(pfin: PathLike) -> Any:
    return orjson.loads(Path(pfin).read_bytes())


def write_csv_columns(columns: Mapping[str, Any], schema: pa.Schema, pfout: PathLike) -> Path:
    """Write equally long columns as a CSV file with an unquoted header in schema order.

    Args:
        columns (Mapping[str, Any]): column name -> sequence of values
        schema (pa.Schema): the column names and types to write
        pfout (PathLike): output file, parent directories are created

    Returns:
        Path: the written file
    """
    missing = [name for name in schema.names if name not in columns]
    if missing:
        raise ValueError(f"Cannot write {pfout}: missing column(s) {missing}")

    arrays = {
        name: pa.array(np.asarray(columns[name]).tolist(), type=schema.field(name).type) for name in schema.names
    }
    table = pa.table(arrays, schema=schema)
    pfout = Path(pfout)
    pfout.parent.mkdir(parents=True, exist_ok=True)
    pa_csv.write_csv(
        table, pfout, write_options=pa_csv.WriteOptions(quoting_style="none", quoting_header="none")
    )
    return pfout


def read_csv_table(pfin: PathLike, schema: pa.Schema) -> pa.Table:
    """Read a CSV file whose header must contain (at least) the columns of `schema`. Values are
    parsed with the schema's types.
    """
    pfin = Path(pfin)
    if not pfin.is_file():
        raise FileNotFoundError(f"CSV file not found: {pfin}")

    return pa_csv.read_csv(
        pfin,
        convert_options=pa_csv.ConvertOptions(
            column_types={field.name: field.type for field in schema},
            include_columns=schema.names,
            strings_can_be_null=False,
        ),
    )
