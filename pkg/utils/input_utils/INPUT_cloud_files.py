#!/usr/bin/env python3
"""
Point cloud file readers and writers (XYZ, ASCII PLY, OFF).

FORMATS:
    XYZ  one point per line, three numbers separated by spaces; '#' lines are comments
    PLY  ASCII only; element vertex with exactly the properties x, y, z (float/double);
         other elements (faces, edges) are skipped on read and never written
    OFF  "OFF" magic, counts line "n_vertices n_faces n_edges", vertex lines; faces ignored

Coordinates are written with 9 significant digits and LF line endings.
Writes go through the atomic writer so a failed save leaves nothing behind.
"""

from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from utils.errors import IoError, ParseError, UnsupportedElement
from utils.geometry_utils.cloud import PointCloud
from utils.output_utils.OUTPUT_reports import atomic_write_text


FORMATS = ('xyz', 'ply', 'off')
PLY_FLOAT_TYPES = {'float', 'float32', 'double', 'float64'}


def infer_format(path, fmt: Optional[str] = None) -> str:
    """Explicit format wins; otherwise the file suffix decides."""
    fmt = (fmt or Path(path).suffix.lstrip('.')).lower()
    if fmt not in FORMATS:
        raise ValueError(f'Unsupported point cloud format {fmt!r} for {path}; expected one of {FORMATS}')
    return fmt


def _format_point(p) -> str:
    return f'{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}'


def _parse_xyz_tokens(tokens: List[str], line_no: int, path: str) -> Tuple[float, float, float]:
    if len(tokens) != 3:
        raise ParseError(line_no, f'expected 3 coordinates, found {len(tokens)}', path)
    try:
        x, y, z = (float(tok) for tok in tokens)
    except ValueError:
        raise ParseError(line_no, f'non-numeric coordinate in {" ".join(tokens)!r}', path) from None
    if not all(np.isfinite((x, y, z))):
        raise ParseError(line_no, 'non-finite coordinate', path)
    return x, y, z


# =============================================================================
# READERS
# =============================================================================
def _read_lines(path: Path) -> List[str]:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(f'Cannot read {path}: {e}') from e
    try:
        return raw.decode('utf-8').splitlines()
    except UnicodeDecodeError as e:
        raise ParseError(1, f'file is not UTF-8 text ({e.reason})', str(path)) from None


def _read_xyz(lines: List[str], path: str) -> np.ndarray:
    points = []
    for line_no, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        points.append(_parse_xyz_tokens(stripped.split(), line_no, path))
    if not points:
        raise ParseError(max(len(lines), 1), 'file contains no points', path)
    return np.array(points, dtype=np.float64)


def _content_lines(lines: List[str], start: int = 0) -> Iterator[Tuple[int, str]]:
    """(1-based line number, stripped text) for non-blank, non-comment lines."""
    for idx in range(start, len(lines)):
        stripped = lines[idx].strip()
        if stripped and not stripped.startswith('#'):
            yield idx + 1, stripped


def _read_off(lines: List[str], path: str) -> np.ndarray:
    content = _content_lines(lines)
    try:
        line_no, first = next(content)
    except StopIteration:
        raise ParseError(1, 'empty OFF file', path) from None
    tokens = first.split()
    if tokens[0] != 'OFF':
        raise ParseError(line_no, f'missing OFF magic, found {tokens[0]!r}', path)
    counts = tokens[1:]
    if not counts:
        try:
            line_no, counts_line = next(content)
        except StopIteration:
            raise ParseError(line_no, 'missing counts line', path) from None
        counts = counts_line.split()
    try:
        n_vertices = int(counts[0])
    except (ValueError, IndexError):
        raise ParseError(line_no, f'invalid counts line {" ".join(counts)!r}', path) from None
    if n_vertices < 1:
        raise ParseError(line_no, 'OFF file declares no vertices', path)
    points = []
    for _ in range(n_vertices):
        try:
            line_no, text = next(content)
        except StopIteration:
            raise ParseError(line_no + 1, f'expected {n_vertices} vertices, found {len(points)}', path) from None
        points.append(_parse_xyz_tokens(text.split(), line_no, path))
    return np.array(points, dtype=np.float64)


def _read_ply(lines: List[str], path: str) -> np.ndarray:
    if not lines or lines[0].strip() != 'ply':
        raise ParseError(1, "missing 'ply' magic", path)
    elements = []  # [name, count, properties]
    header_end = None
    for idx in range(1, len(lines)):
        line_no = idx + 1
        tokens = lines[idx].split()
        if not tokens or tokens[0] in ('comment', 'obj_info'):
            continue
        keyword = tokens[0]
        if keyword == 'format':
            if len(tokens) < 2 or tokens[1] != 'ascii':
                raise UnsupportedElement(f'{path}: only ASCII PLY is supported, got format {tokens[1:]}')
        elif keyword == 'element':
            if len(tokens) != 3:
                raise ParseError(line_no, f'malformed element line {lines[idx]!r}', path)
            try:
                elements.append([tokens[1], int(tokens[2]), []])
            except ValueError:
                raise ParseError(line_no, f'invalid element count {tokens[2]!r}', path) from None
        elif keyword == 'property':
            if not elements:
                raise ParseError(line_no, 'property declared before any element', path)
            elements[-1][2].append(tokens[1:])
        elif keyword == 'end_header':
            header_end = idx + 1
            break
        else:
            raise ParseError(line_no, f'unknown header keyword {keyword!r}', path)
    if header_end is None:
        raise ParseError(len(lines), 'missing end_header', path)

    vertex = [e for e in elements if e[0] == 'vertex']
    if len(vertex) != 1:
        raise UnsupportedElement(f'{path}: PLY must declare exactly one vertex element')
    props = vertex[0][2]
    names = [p[-1] for p in props]
    if sorted(names) != ['x', 'y', 'z'] or len(names) != 3:
        raise UnsupportedElement(f'{path}: vertex properties must be exactly x, y, z, got {names}')
    for prop in props:
        if prop[0] == 'list' or prop[0] not in PLY_FLOAT_TYPES:
            raise UnsupportedElement(f'{path}: vertex property {prop[-1]} has unsupported type {prop[0]}')
    order = [names.index(axis) for axis in ('x', 'y', 'z')]

    cursor = header_end
    points = None
    for name, count, _ in elements:
        block = lines[cursor:cursor + count]
        if len(block) < count:
            raise ParseError(len(lines), f'expected {count} {name} lines, found {len(block)}', path)
        if name == 'vertex':
            rows = [_parse_xyz_tokens(line.split(), cursor + i + 1, path) for i, line in enumerate(block)]
            points = np.array(rows, dtype=np.float64)[:, order]
        cursor += count
    if points is None or len(points) == 0:
        raise ParseError(header_end, 'PLY file contains no vertices', path)
    return points


def load(path, fmt: Optional[str] = None) -> PointCloud:
    """Read a cloud; format from `fmt` or the file suffix."""
    path = Path(path)
    fmt = infer_format(path, fmt)
    lines = _read_lines(path)
    reader = {'xyz': _read_xyz, 'ply': _read_ply, 'off': _read_off}[fmt]
    return PointCloud(reader(lines, str(path)))


# =============================================================================
# WRITERS
# =============================================================================
def to_text(cloud: PointCloud, fmt: str) -> str:
    body = '\n'.join(_format_point(p) for p in cloud.points) + '\n'
    if fmt == 'xyz':
        return body
    if fmt == 'ply':
        header = ['ply', 'format ascii 1.0', f'element vertex {cloud.n}',
                  'property double x', 'property double y', 'property double z', 'end_header']
        return '\n'.join(header) + '\n' + body
    return f'OFF\n{cloud.n} 0 0\n' + body


def save(cloud: PointCloud, path, fmt: Optional[str] = None) -> Path:
    """Write a cloud atomically; format from `fmt` or the file suffix."""
    path = Path(path)
    atomic_write_text(path, to_text(cloud, infer_format(path, fmt)))
    return path
