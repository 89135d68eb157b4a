"""
Point cloud container and generators
====================================

DESCRIPTION:
PointCloud value type, unit-box normalization, the perturbations used by the
robustness studies (random decimation, Gaussian noise, half-space cropping) and
procedural shape sampling that stands in for CAD-model vertices.

NOTES:
- Noise sigma is absolute, in unit-box coordinates. The "SNR 0.01" setting of
  the density/noise studies is read as sigma = 0.01 because a normalized
  cloud has extent 1.
- Cropping keeps every point whose coordinate along the chosen axis is at or
  below the (1 - crop_fraction) quantile (linear interpolation), so ties at
  the threshold are kept.
- Every generator takes a caller-owned numpy Generator and is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from utils.errors import DegenerateExtent, EmptyResult


SHAPE_FAMILIES = ('sphere', 'box', 'torus', 'composite')


# =============================================================================
# DATA TYPES
# =============================================================================
@dataclass(frozen=True)
class PointCloud:
    """Ordered (N, 3) float64 points, N >= 1, all finite. Immutable."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f'PointCloud needs an (N, 3) array, got shape {pts.shape}')
        if pts.shape[0] < 1:
            raise ValueError('PointCloud needs at least one point')
        if not np.all(np.isfinite(pts)):
            raise ValueError('PointCloud coordinates must be finite')
        pts.setflags(write=False)
        object.__setattr__(self, 'points', pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, index) -> np.ndarray:
        return self.points[index]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def extent(self) -> np.ndarray:
        return self.points.max(axis=0) - self.points.min(axis=0)


@dataclass(frozen=True)
class RigidScaleRecord:
    """normalized = (original - offset) * scale."""
    scale: float
    offset: np.ndarray

    def normalize_points(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.offset) * self.scale

    def denormalize_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.offset

    def denormalize(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(self.denormalize_points(cloud.points))


class PerturbationSpec(BaseModel):
    """Source-cloud degradation for the robustness studies."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    keep_fraction: float = Field(1.0, gt=0.0, le=1.0,
        description='Fraction of points kept by random decimation')
    noise_sigma: float = Field(0.0, ge=0.0,
        description='Std-dev of additive Gaussian noise (unit-box units)')
    crop_fraction: float = Field(0.0, ge=0.0, lt=1.0,
        description='Fraction of extent removed by a half-space cut')
    crop_axis: Optional[int] = Field(None, ge=0, le=2,
        description='Axis of the cut; random per cloud when unset')
    seed: int = 0


# =============================================================================
# NORMALIZATION
# =============================================================================
def _record_for(points: np.ndarray) -> RigidScaleRecord:
    if points.shape[0] < 2:
        raise DegenerateExtent('normalization needs at least two points')
    lo = points.min(axis=0)
    extent = float(np.max(points.max(axis=0) - lo))
    if extent <= 0.0:
        raise DegenerateExtent('all points coincide')
    return RigidScaleRecord(scale=1.0 / extent, offset=lo)


def normalize_unit_box(cloud: PointCloud) -> Tuple[PointCloud, RigidScaleRecord]:
    """Uniform scale by 1/max-extent and shift so the bounding-box min corner is the origin."""
    record = _record_for(cloud.points)
    return PointCloud(record.normalize_points(cloud.points)), record


def normalize_jointly(*clouds: PointCloud) -> Tuple[Tuple[PointCloud, ...], RigidScaleRecord]:
    """One shared scale/offset computed from the union of all clouds.

    Rigid motions between the normalized clouds stay rigid motions between the
    originals (translation rescaled), which is what de-normalizing a
    registration result needs.
    """
    record = _record_for(np.vstack([c.points for c in clouds]))
    return tuple(PointCloud(record.normalize_points(c.points)) for c in clouds), record


# =============================================================================
# PERTURBATIONS
# =============================================================================
def decimate(cloud: PointCloud, keep_fraction: float, rng: np.random.Generator) -> PointCloud:
    """ceil(keep_fraction * N) points sampled without replacement, input order kept."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f'keep_fraction must lie in (0, 1], got {keep_fraction}')
    if keep_fraction == 1.0:
        return cloud
    n = cloud.n
    # round() strips representation noise such as 0.1 * 30 = 3.0000000000000004
    k = max(1, math.ceil(round(keep_fraction * n, 9)))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return PointCloud(cloud.points[idx])


def add_gaussian_noise(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    """Independent N(0, sigma^2) noise on every coordinate."""
    if sigma < 0:
        raise ValueError(f'sigma must be >= 0, got {sigma}')
    if sigma == 0:
        return cloud
    return PointCloud(cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


def crop_half_space(cloud: PointCloud, crop_fraction: float, axis: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> PointCloud:
    """Drop points above the (1 - crop_fraction) quantile along `axis` (random axis when None)."""
    if not 0.0 <= crop_fraction < 1.0:
        raise ValueError(f'crop_fraction must lie in [0, 1), got {crop_fraction}')
    if crop_fraction == 0.0:
        return cloud
    if axis is None:
        if rng is None:
            raise ValueError('crop_half_space needs an axis or a random generator')
        axis = int(rng.integers(3))
    coord = cloud.points[:, axis]
    threshold = np.quantile(coord, 1.0 - crop_fraction)
    keep = coord <= threshold
    if not np.any(keep):
        raise EmptyResult(f'cropping {crop_fraction} along axis {axis} removed every point')
    return PointCloud(cloud.points[keep])


def apply_perturbation(cloud: PointCloud, spec: PerturbationSpec, rng: np.random.Generator) -> PointCloud:
    """Crop, then decimate, then add noise; inactive steps draw nothing from rng."""
    out = crop_half_space(cloud, spec.crop_fraction, spec.crop_axis, rng)
    out = decimate(out, spec.keep_fraction, rng)
    return add_gaussian_noise(out, spec.noise_sigma, rng)


def perturbation_tag(spec: PerturbationSpec) -> str:
    """Label for report rows, 'none' when the perturbation changes nothing."""
    parts = []
    if spec.crop_fraction > 0:
        parts.append(f'crop={spec.crop_fraction:g}')
    if spec.keep_fraction < 1:
        parts.append(f'keep={spec.keep_fraction:g}')
    if spec.noise_sigma > 0:
        parts.append(f'noise={spec.noise_sigma:g}')
    return '+'.join(parts) if parts else 'none'


# =============================================================================
# SHAPE SAMPLING
# =============================================================================
def _shape_parameters(family: str, shape_seed: int) -> Dict[str, np.ndarray]:
    srng = np.random.default_rng(shape_seed)
    center = srng.uniform(-1.0, 1.0, size=3)
    if family == 'sphere':
        return {'center': center, 'radius': srng.uniform(0.5, 1.5)}
    if family == 'box':
        return {'center': center, 'half_extents': srng.uniform(0.3, 1.0, size=3)}
    if family == 'torus':
        # The swept arc leaves a gap so rotations about the torus axis stay observable.
        return {'center': center,
                'major_radius': srng.uniform(0.8, 1.4),
                'minor_radius': srng.uniform(0.15, 0.45),
                'arc': srng.uniform(1.3 * math.pi, 1.8 * math.pi)}
    if family == 'composite':
        half = srng.uniform(0.3, 1.0, size=3)
        radius = srng.uniform(0.2, 0.45)
        signs = srng.choice([-1.0, 1.0], size=2)
        cap = center + np.array([0.5 * half[0] * signs[0], 0.3 * half[1] * signs[1], half[2] + 0.6 * radius])
        return {'center': center, 'half_extents': half, 'sphere_center': cap, 'sphere_radius': radius}
    raise ValueError(f'unknown shape family {family!r}; expected one of {SHAPE_FAMILIES}')


def _sphere_surface(center, radius, n, rng) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + radius * d


def _box_surface(center, half, n, rng) -> np.ndarray:
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return center + pts


def _torus_surface(center, major, minor, arc, n, rng) -> np.ndarray:
    u = rng.uniform(0.0, arc, size=n)
    w = rng.uniform(0.0, 2.0 * math.pi, size=n)
    ring = major + minor * np.cos(w)
    return center + np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(w)], axis=1)


def sample_shape_raw(family: str, n: int, shape_seed: int,
                     rng: np.random.Generator) -> Tuple[PointCloud, Dict[str, np.ndarray]]:
    """n surface points of a procedural shape before normalization, plus its parameters."""
    if n < 1:
        raise ValueError(f'point count must be >= 1, got {n}')
    params = _shape_parameters(family, shape_seed)
    if family == 'sphere':
        pts = _sphere_surface(params['center'], params['radius'], n, rng)
    elif family == 'box':
        pts = _box_surface(params['center'], params['half_extents'], n, rng)
    elif family == 'torus':
        pts = _torus_surface(params['center'], params['major_radius'], params['minor_radius'],
                             params['arc'], n, rng)
    else:
        n_sphere = n // 3
        box = _box_surface(params['center'], params['half_extents'], n - n_sphere, rng)
        cap = _sphere_surface(params['sphere_center'], params['sphere_radius'], n_sphere, rng)
        pts = np.vstack([box, cap])
    return PointCloud(pts), params


def sample_shape(family: str, n: int, shape_seed: int, rng: np.random.Generator) -> PointCloud:
    """n surface points of a procedural shape, normalized into the unit box."""
    cloud, _ = sample_shape_raw(family, n, shape_seed, rng)
    return normalize_unit_box(cloud)[0]


def parse_families(families: Sequence[str]) -> Tuple[str, ...]:
    out = tuple(f.strip() for f in families if f.strip())
    unknown = [f for f in out if f not in SHAPE_FAMILIES]
    if unknown or not out:
        raise ValueError(f'unknown shape families {unknown}; expected a subset of {SHAPE_FAMILIES}')
    return out
