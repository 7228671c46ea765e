import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

import config
from errors import OutputError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

FLOAT_FORMAT = ".12g"


def format_number(value: Any) -> str:
    """
    Format a table cell for CSV output.

    Args:
        value: Cell value (float, int, bool or string)

    Returns:
        Text representation, floats in 12 significant digits
    """
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if value == 0.0:
            return "0"
        return format(value, FLOAT_FORMAT)
    return str(value)


def format_table_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """
    Render a header and rows as CSV text.

    Args:
        columns: Column headers, with units
        rows: Row sequences matching the headers

    Returns:
        CSV text with a trailing newline
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_number(value) for value in row])
    return buffer.getvalue()


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays into plain JSON types."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if not math.isfinite(value):
            return None
        return float(format(value, FLOAT_FORMAT))
    return value


def format_json(payload: Dict[str, Any]) -> str:
    return json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n"


def validate_table(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> bool:
    """
    Validate that a result table is rectangular and non-empty.

    Args:
        columns: Column headers
        rows: Table rows

    Returns:
        True if the table is valid, False otherwise
    """
    if not columns:
        logger.warning("Result table has no columns")
        return False

    for index, row in enumerate(rows):
        if len(row) != len(columns):
            logger.warning(f"Row {index} has {len(row)} cells, expected {len(columns)}")
            return False

    return True


def spec_hash(payload: Any) -> str:
    """
    Stable short hash of a JSON-serialisable payload.

    Args:
        payload: Data to hash (dicts are key-sorted)

    Returns:
        First 16 hex digits of the SHA-256 digest
    """
    text = json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def bytes_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """
    Write text to a file via a temporary sibling and rename.

    Args:
        path: Destination path
        text: File contents

    Raises:
        OutputError: If the file cannot be written
    """
    directory = os.path.dirname(os.path.abspath(path))
    temp_path = None
    try:
        fd, temp_path = tempfile.mkstemp(
            dir=directory, prefix=f".{os.path.basename(path)}.", suffix=".tmp"
        )
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(temp_path, path)
        temp_path = None
        logger.info(f"Wrote {path}")
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    finally:
        if temp_path and os.path.exists(temp_path):
            os.remove(temp_path)


def parallel_map(func: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None) -> List[R]:
    """
    Map a function over items on a thread pool, keeping input order.

    Args:
        func: Function to apply
        items: Inputs
        workers: Pool size (defaults to DNPR_THREADS)

    Returns:
        Results in the order of `items`
    """
    items = list(items)
    workers = workers or config.THREADS
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))


def get_current_timestamp() -> str:
    """
    Get current UTC timestamp.

    Returns:
        ISO 8601 timestamp string
    """
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
