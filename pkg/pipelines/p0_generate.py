"""
Synthetic Dataset Generation
============================

DESCRIPTION:
Samples procedural shapes (sphere, box, torus with an arc gap, box with a
spherical cap), normalizes each into the unit box and writes them as XYZ files
together with a manifest. Every cloud is reproducible from (seed, family,
index) alone, so adding a family never changes the clouds of another.

USAGE:
    python run_pipeline.py gen --families box,torus --count 64 --points 512 --seed 7 --out data/

OUTPUT:
    <out>/<family>_<index>.xyz     one cloud per file
    <out>/manifest.csv            file, family, shape_seed, points
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import pandas as pd

from utils.errors import IoError, ParseError
from utils.geometry_utils.cloud import SHAPE_FAMILIES, PointCloud, parse_families, sample_shape
from utils.input_utils.INPUT_cloud_files import load, save
from utils.output_utils.OUTPUT_reports import write_csv


MANIFEST_NAME = 'manifest.csv'
MANIFEST_COLUMNS = ['file', 'family', 'shape_seed', 'points']


@dataclass(frozen=True)
class Dataset:
    """Unit-box normalized clouds with their family labels."""
    clouds: Tuple[PointCloud, ...]
    families: Tuple[str, ...]
    names: Tuple[str, ...]

    def __post_init__(self):
        if not (len(self.clouds) == len(self.families) == len(self.names)):
            raise ValueError('clouds, families and names must have equal length')

    def __len__(self) -> int:
        return len(self.clouds)

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        return Dataset(tuple(self.clouds[i] for i in indices),
                       tuple(self.families[i] for i in indices),
                       tuple(self.names[i] for i in indices))

    def with_families(self, families: Sequence[str]) -> 'Dataset':
        return self.subset([i for i, f in enumerate(self.families) if f in families])

    def without_families(self, families: Sequence[str]) -> 'Dataset':
        return self.subset([i for i, f in enumerate(self.families) if f not in families])


def shape_streams(seed: int, family: str, index: int) -> Tuple[int, np.random.Generator]:
    """(shape_seed, point rng) for one dataset member."""
    sequence = np.random.SeedSequence([seed, SHAPE_FAMILIES.index(family), index])
    shape_seed = int(sequence.generate_state(1)[0])
    return shape_seed, np.random.default_rng(sequence)


def synthesize_dataset(families: Sequence[str], count: int, points: int, seed: int) -> Dataset:
    """In-memory dataset, family-major order."""
    families = parse_families(families)
    if count < 1 or points < 1:
        raise ValueError(f'count and points must be >= 1, got count={count}, points={points}')
    clouds, labels, names = [], [], []
    for family in families:
        for i in range(count):
            shape_seed, rng = shape_streams(seed, family, i)
            clouds.append(sample_shape(family, points, shape_seed, rng))
            labels.append(family)
            names.append(f'{family}_{i:04d}.xyz')
    return Dataset(tuple(clouds), tuple(labels), tuple(names))


def generate_dataset(out_dir, families: Sequence[str], count: int, points: int, seed: int) -> Path:
    """Write clouds and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    dataset = synthesize_dataset(families, count, points, seed)
    indices = [i for _ in parse_families(families) for i in range(count)]
    rows = []
    for cloud, family, name, i in zip(dataset.clouds, dataset.families, dataset.names, indices):
        save(cloud, out_dir / name, 'xyz')
        rows.append({'file': name, 'family': family,
                     'shape_seed': shape_streams(seed, family, i)[0], 'points': cloud.n})
    manifest = write_csv(pd.DataFrame(rows, columns=MANIFEST_COLUMNS), out_dir / MANIFEST_NAME)
    print(f"  INFO: wrote {len(dataset)} clouds ({', '.join(parse_families(families))}) to {out_dir}")
    return manifest


def load_dataset(data_dir) -> Dataset:
    """Clouds listed in the manifest, or every *.xyz file (family 'unknown') without one."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise IoError(f'dataset directory not found: {data_dir}')
    manifest_path = data_dir / MANIFEST_NAME
    if manifest_path.exists():
        try:
            manifest = pd.read_csv(manifest_path, dtype={'file': str, 'family': str})
        except (OSError, ValueError) as e:
            raise ParseError(1, f'unreadable manifest: {e}', str(manifest_path)) from None
        missing = [c for c in ('file', 'family') if c not in manifest.columns]
        if missing:
            raise ParseError(1, f'manifest lacks columns {missing}', str(manifest_path))
        names = tuple(manifest['file'])
        families = tuple(manifest['family'])
    else:
        names = tuple(sorted(p.name for p in data_dir.glob('*.xyz')))
        families = ('unknown',) * len(names)
    if not names:
        raise IoError(f'dataset directory {data_dir} contains no clouds')
    clouds = tuple(load(data_dir / name) for name in names)
    return Dataset(clouds, families, names)
