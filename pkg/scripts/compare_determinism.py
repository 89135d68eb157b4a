#!/usr/bin/env python3
"""
Script to compare two output directories of the same seeded command.
Tests determinism: every file must match byte-for-byte, except that CSV
reports are compared with their timing columns removed.

Usage: python scripts/compare_determinism.py RUN_A RUN_B
"""

import hashlib
import io
import sys
from pathlib import Path
from typing import Dict, List

import pandas as pd

TIMING_COLUMNS = {'seconds', 'time_ms_mean', 'time_ms_median'}


def get_file_hash(file_path: Path) -> str:
    """Get SHA-256 hash of file content."""
    with open(file_path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def csv_without_timing(file_path: Path) -> str:
    """CSV text with timing columns dropped, as written by the report writer."""
    df = pd.read_csv(file_path, dtype=str, keep_default_na=False)
    df = df.drop(columns=[c for c in df.columns if c in TIMING_COLUMNS])
    buffer = io.StringIO()
    df.to_csv(buffer, index=False, lineterminator='\n')
    return buffer.getvalue()


def list_files(root: Path) -> Dict[str, Path]:
    return {str(p.relative_to(root)): p for p in sorted(root.rglob('*')) if p.is_file()}


def compare_directories(dir_a: Path, dir_b: Path) -> List[str]:
    """Human-readable differences; empty when the runs agree."""
    files_a, files_b = list_files(dir_a), list_files(dir_b)
    differences = []
    for name in sorted(set(files_a) ^ set(files_b)):
        side = dir_a if name in files_a else dir_b
        differences.append(f'only in {side}: {name}')
    for name in sorted(set(files_a) & set(files_b)):
        a, b = files_a[name], files_b[name]
        if a.suffix == '.csv':
            same = csv_without_timing(a) == csv_without_timing(b)
        else:
            same = get_file_hash(a) == get_file_hash(b)
        if not same:
            differences.append(f'differs: {name}')
    return differences


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print(__doc__.strip().splitlines()[-1])
        return 2
    dir_a, dir_b = Path(argv[0]), Path(argv[1])
    for d in (dir_a, dir_b):
        if not d.is_dir():
            print(f"Error: {d} is not a directory")
            return 2

    differences = compare_directories(dir_a, dir_b)
    n_files = len(list_files(dir_a))
    if differences:
        print(f"❌ {len(differences)} difference(s) between {dir_a} and {dir_b}:")
        for line in differences:
            print(f"   {line}")
        return 1
    print(f"✓ {n_files} files identical (timing columns excluded)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
