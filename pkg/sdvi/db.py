"""
Storage layer - JSON and CSV file operations with locks and backups.

This module provides thread-safe read/write operations for the files of a
run directory, with automatic backups and atomic writes to prevent
corruption. Non-finite floats are kept (written as Infinity/NaN) so local
ELBOs of -inf survive a round trip.
"""
import json
import logging
import os
import shutil
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from sdvi import utils


logger = logging.getLogger(__name__)

INDEX_FILE = "runs.json"

# Dictionary to store locks for each file
_file_locks: Dict[str, threading.Lock] = {}
_locks_lock = threading.Lock()


def runs_dir() -> Path:
    """Root of all run directories (SDVI_RUNS_DIR, default ./runs)."""
    path = Path(os.getenv("SDVI_RUNS_DIR", "runs"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _get_lock(filepath: Path) -> threading.Lock:
    """Get or create a lock for a specific file."""
    key = str(filepath.resolve())
    with _locks_lock:
        if key not in _file_locks:
            _file_locks[key] = threading.Lock()
        return _file_locks[key]


def _get_backup_path(filepath: Path) -> Path:
    """Get backup file path (.bak)."""
    return filepath.with_name(filepath.name + ".bak")


def _create_timestamped_backup(filepath: Path) -> Path:
    """Timestamped backup path in the backups/ directory next to the file."""
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    backups = filepath.parent / "backups"
    backups.mkdir(parents=True, exist_ok=True)
    return backups / f"{filepath.name}.{timestamp}.bak"


def _encode(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _backup(filepath: Path) -> None:
    if not filepath.exists():
        return
    try:
        shutil.copy2(filepath, _get_backup_path(filepath))
    except OSError:
        logger.warning("could not back up %s", filepath)
    try:
        shutil.copy2(filepath, _create_timestamped_backup(filepath))
    except OSError:
        logger.warning("could not create timestamped backup of %s", filepath)


def _replace_atomically(filepath: Path, write) -> None:
    temp_filepath = filepath.with_name(filepath.name + ".tmp")
    try:
        write(temp_filepath)
        temp_filepath.replace(filepath)
    except Exception:
        if temp_filepath.exists():
            try:
                temp_filepath.unlink()
            except OSError:
                pass
        raise


def read_json(filepath: Path, default: Any = None) -> Any:
    """
    Read JSON file with lock protection.

    Returns default if the file doesn't exist. Attempts to restore from
    .bak if the main file is corrupted.
    """
    lock = _get_lock(filepath)
    with lock:
        if not filepath.exists():
            return default
        try:
            with open(filepath, "r", encoding="utf-8") as f:
                return json.load(f)
        except (json.JSONDecodeError, OSError):
            logger.warning("%s is unreadable, trying its backup", filepath)
            backup_path = _get_backup_path(filepath)
            if backup_path.exists():
                try:
                    with open(backup_path, "r", encoding="utf-8") as f:
                        data = json.load(f)
                    shutil.copy2(backup_path, filepath)
                    return data
                except (json.JSONDecodeError, OSError):
                    pass
            return default


def write_json(filepath: Path, data: Any) -> None:
    """
    Write JSON file atomically with lock protection and automatic backup.

    Process:
    1. Create backup of current file (.bak)
    2. Create timestamped backup in backups/ directory
    3. Write to temporary file
    4. Rename temp file to final file (atomic operation)
    """
    filepath.parent.mkdir(parents=True, exist_ok=True)
    lock = _get_lock(filepath)
    with lock:
        _backup(filepath)

        def write(path: Path) -> None:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(data, f, ensure_ascii=False, indent=2, default=_encode)

        _replace_atomically(filepath, write)


def write_csv(filepath: Path, rows: Sequence[Dict[str, Any]], fieldnames: Optional[List[str]] = None) -> None:
    """Write CSV rows atomically under the file's lock."""
    filepath.parent.mkdir(parents=True, exist_ok=True)
    lock = _get_lock(filepath)
    with lock:
        _replace_atomically(filepath, lambda path: utils.write_csv(path, rows, fieldnames))


def read_csv(filepath: Path) -> List[Dict[str, str]]:
    """Read CSV rows under the file's lock."""
    with _get_lock(filepath):
        return utils.read_csv(filepath)


def write_bytes(filepath: Path, payload: bytes) -> None:
    """Write a binary artifact (spreadsheet) atomically."""
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with _get_lock(filepath):
        _replace_atomically(filepath, lambda path: path.write_bytes(payload))


def restore_from_backup(filepath: Path) -> bool:
    """
    Manually restore a file from its .bak backup.

    Returns True if restoration was successful, False otherwise.
    """
    backup_path = _get_backup_path(filepath)
    lock = _get_lock(filepath)
    with lock:
        if not backup_path.exists():
            return False
        try:
            with open(backup_path, "r", encoding="utf-8") as f:
                json.load(f)
            shutil.copy2(backup_path, filepath)
            return True
        except (json.JSONDecodeError, OSError):
            return False


def ensure_file_exists(filepath: Path, default: Any) -> None:
    """Ensure a JSON file exists, seeding it with default."""
    if not filepath.exists():
        write_json(filepath, default)
