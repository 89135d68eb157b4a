#!/usr/bin/env python3
"""
Atomic output writers shared by every pipeline stage.

Files are first written to a temporary file in the destination directory and
then moved into place with os.replace, so an interrupted or failed run never
leaves a half-written checkpoint, cloud or report behind.
"""

import os
import tempfile
from pathlib import Path
from typing import Union

import pandas as pd

from utils.errors import IoError


PathLike = Union[str, os.PathLike]


def atomic_write_bytes(final_path: PathLike, data: bytes) -> None:
    """Write bytes to a temp file next to final_path, then rename over it."""
    final_path = Path(final_path)
    directory = final_path.parent if str(final_path.parent) else Path('.')
    temp_file = None
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd, temp_file = tempfile.mkstemp(prefix=f'{final_path.name}.tmp_', dir=directory)
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_file, final_path)
    except OSError as e:
        if temp_file and os.path.exists(temp_file):
            try:
                os.remove(temp_file)
            except OSError:
                pass
        raise IoError(f'Failed to write {final_path}: {e}') from e


def atomic_write_text(final_path: PathLike, text: str) -> None:
    """UTF-8 text with LF line endings."""
    atomic_write_bytes(final_path, text.encode('utf-8'))


def dataframe_to_csv_text(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, lineterminator='\n', float_format='%.9g')


def write_csv(df: pd.DataFrame, final_path: PathLike) -> Path:
    """Write a report table as UTF-8 CSV (LF, 9 significant digits)."""
    atomic_write_text(final_path, dataframe_to_csv_text(df))
    return Path(final_path)
