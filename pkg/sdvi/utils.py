"""
Utility functions for seeding, tabular output and formatting.

Includes the named random-stream splitter, CSV helpers and timestamp/JSON
formatting shared by the CLI, the run store and the HTTP layer.
"""
import csv
import math
import zlib
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np


class RngStreams:
    """
    Named random streams derived from one master seed.

    get("train", 3) always returns a fresh generator over the same stream,
    independent of which other streams were requested before.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def get(self, name: str, *keys: int) -> np.random.Generator:
        """
        Generator for the stream (name, *keys).

        Args:
            name: Stream name, e.g. "discovery", "init", "train", "estimate", "eval"
            keys: Integer sub-keys such as an SLP index or a run counter

        Returns:
            A numpy Generator seeded from the master seed and the stream key
        """
        spawn_key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(k) for k in keys)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=spawn_key))


def get_current_datetime_iso() -> str:
    """
    Get current date and time in ISO8601 format.

    Returns:
        Current datetime string in ISO8601 format (e.g., '2025-01-12T20:30:45')
    """
    return datetime.now().isoformat(timespec="seconds")


def jsonable(value: Any) -> Any:
    """
    Convert numpy scalars/arrays and non-finite floats for strict JSON.

    Args:
        value: Nested structure of dicts, lists, tuples, numpy values and floats

    Returns:
        The same structure with plain Python types; inf and nan become None
    """
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def write_csv(path: Path, rows: Sequence[Dict[str, Any]], fieldnames: Optional[List[str]] = None) -> None:
    """
    Write dict rows to CSV.

    Args:
        path: Destination file (parent directories are created)
        rows: Rows to write; the header is the union of keys in first-seen order
        fieldnames: Explicit column order, overrides the inferred header
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: Path) -> List[Dict[str, str]]:
    """Read CSV rows as string dicts; missing file gives an empty list."""
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def array_rows(columns: Dict[str, np.ndarray]) -> Iterable[Dict[str, Any]]:
    """
    Flatten equally long arrays into CSV rows.

    2-D arrays expand to one column per coordinate (name_0, name_1, ...).
    Columns of different lengths are padded with empty cells.
    """
    flat: Dict[str, np.ndarray] = {}
    for name, values in columns.items():
        arr = np.asarray(values)
        if arr.ndim == 2:
            for d in range(arr.shape[1]):
                flat[f"{name}_{d}"] = arr[:, d]
        else:
            flat[name] = arr
    n = max((len(v) for v in flat.values()), default=0)
    for i in range(n):
        yield {k: (v[i].item() if i < len(v) else "") for k, v in flat.items()}
