"""
SE(3) / SO(3) Lie-group arithmetic
==================================

DESCRIPTION:
Closed-form exponential and logarithm maps for rigid motions, composition,
inversion, application to point clouds, the error metrics used by training and
benchmarking, and seeded random-transform sampling.

CONVENTIONS:
- A twist is the 6-vector (v1, v2, v3, t1, t2, t3): rotation part first
  (axis-angle, radians), translation part second (normalized scene units).
- exp is the coupled se(3) exponential: the translation of exp(theta) is
  V(v) @ t, not t itself.
- Everything is float64. All functions are pure; RNG state is caller-owned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.typing import ArrayLike

from utils.errors import AngleNearPi
from utils.geometry_utils.cloud import PointCloud


# =============================================================================
# NUMERICAL CONSTANTS
# =============================================================================
# Below this rotation magnitude the Rodrigues / V-matrix coefficients switch
# to their Taylor expansions.
SMALL_ANGLE = 1e-8

# log() refuses rotations whose angle lies within this distance of pi.
PI_MARGIN = 1e-6


# =============================================================================
# DATA TYPES
# =============================================================================
@dataclass(frozen=True)
class Twist:
    """Six motion parameters: rotation part v and translation part t."""
    v: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=np.float64).reshape(3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(t))):
            raise ValueError(f'Twist entries must be finite, got v={v}, t={t}')
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'v', v)
        object.__setattr__(self, 't', t)

    @classmethod
    def from_vector(cls, theta: ArrayLike) -> 'Twist':
        theta = np.asarray(theta, dtype=np.float64).reshape(6)
        return cls(theta[:3], theta[3:])

    @classmethod
    def zero(cls) -> 'Twist':
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.t])

    def __array__(self, dtype=None, copy=None):
        vec = self.as_vector()
        return vec if dtype is None else vec.astype(dtype)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation matrix R in SO(3) and translation vector t."""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f'RigidTransform needs R (3, 3) and t (3,), got {R.shape} and {t.shape}')
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError('RigidTransform entries must be finite')
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 't', t)

    @classmethod
    def identity(cls) -> 'RigidTransform':
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: ArrayLike) -> 'RigidTransform':
        """Build from a 4x4 homogeneous or 3x4 [R|t] matrix."""
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def as_3x4(self) -> np.ndarray:
        return np.hstack([self.R, self.t[:, None]])

    def orthonormality_error(self) -> float:
        return float(np.linalg.norm(self.R.T @ self.R - np.eye(3)))

    def is_valid(self, tol: float = 1e-9) -> bool:
        return self.orthonormality_error() < tol and np.linalg.det(self.R) > 0


TwistLike = Union[Twist, ArrayLike]


# =============================================================================
# SO(3) HELPERS
# =============================================================================
def hat(v: ArrayLike) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=np.float64)


def _exp_coefficients(theta: float):
    """A = sin/x, B = (1 - cos)/x^2, C = (x - sin)/x^3 with Taylor fallback."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    A = s / theta
    B = 2.0 * half * half / (theta * theta)
    C = (theta - s) / (theta ** 3)
    return A, B, C


def exp_so3(v: ArrayLike) -> np.ndarray:
    """Rodrigues formula."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(v))
    A, B, _ = _exp_coefficients(theta)
    K = hat(v)
    return np.eye(3) + A * K + B * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of R in [0, pi], computed with atan2 for accuracy near 0 and pi."""
    w = 0.5 * vee(R - R.T)
    c = 0.5 * (np.trace(R) - 1.0)
    return float(math.atan2(np.linalg.norm(w), c))


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R. Raises AngleNearPi within PI_MARGIN of pi."""
    R = np.asarray(R, dtype=np.float64)
    angle = rotation_angle(R)
    if angle > math.pi - PI_MARGIN:
        raise AngleNearPi(f'rotation angle {angle!r} is within {PI_MARGIN} of pi')
    w = 0.5 * vee(R - R.T)
    if angle < SMALL_ANGLE:
        return w * (1.0 + angle * angle / 6.0)
    return w * (angle / math.sin(angle))


# =============================================================================
# SE(3) MAPS
# =============================================================================
def _as_twist_vector(theta: TwistLike) -> np.ndarray:
    if isinstance(theta, Twist):
        return theta.as_vector()
    vec = np.asarray(theta, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(vec)):
        raise ValueError(f'twist entries must be finite, got {vec}')
    return vec


def exp(theta: TwistLike) -> RigidTransform:
    """Coupled se(3) exponential: R = exp_so3(v), translation = V(v) @ t."""
    vec = _as_twist_vector(theta)
    v, rho = vec[:3], vec[3:]
    angle = float(np.linalg.norm(v))
    A, B, C = _exp_coefficients(angle)
    K = hat(v)
    K2 = K @ K
    R = np.eye(3) + A * K + B * K2
    V = np.eye(3) + B * K + C * K2
    return RigidTransform(R, V @ rho)


def log(g: RigidTransform) -> Twist:
    """Inverse of exp for rotation angles below pi - PI_MARGIN."""
    v = log_so3(g.R)
    angle = float(np.linalg.norm(v))
    _, B, C = _exp_coefficients(angle)
    K = hat(v)
    V = np.eye(3) + B * K + C * (K @ K)
    rho = np.linalg.solve(V, g.t)
    return Twist(v, rho)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: x -> a(b(x))."""
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t)


def inverse(g: RigidTransform) -> RigidTransform:
    Rt = g.R.T
    return RigidTransform(Rt, -(Rt @ g.t))


def apply_points(g: RigidTransform, points: np.ndarray) -> np.ndarray:
    """R p + t for every row of an (N, 3) array."""
    return np.asarray(points, dtype=np.float64) @ g.R.T + g.t


def apply(g: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Transform a cloud; count and order are preserved."""
    return PointCloud(apply_points(g, cloud.points))


# =============================================================================
# ERROR METRICS
# =============================================================================
def angular_error(g_est: RigidTransform, g_gt: RigidTransform) -> float:
    """Geodesic rotation distance ||log(R_est^T R_gt)|| in radians."""
    return float(np.linalg.norm(log_so3(g_est.R.T @ g_gt.R)))


def translation_error(g_est: RigidTransform, g_gt: RigidTransform) -> float:
    return float(np.linalg.norm(g_est.t - g_gt.t))


def transform_rmse(g_est: RigidTransform, g_gt: RigidTransform) -> float:
    """Root-mean-square over the 12 entries of the [R|t] difference."""
    diff = g_est.as_3x4() - g_gt.as_3x4()
    return float(np.sqrt(np.mean(diff * diff)))


# =============================================================================
# RANDOM SAMPLING
# =============================================================================
def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        d = rng.standard_normal(3)
        n = np.linalg.norm(d)
        if n > 1e-12:
            return d / n


def transform_at_angle(angle: float, trans_max: float, rng: np.random.Generator) -> RigidTransform:
    """Rotation of exactly `angle` about a uniform axis; translation norm uniform in [0, trans_max]."""
    if not 0.0 <= angle < math.pi:
        raise ValueError(f'angle must lie in [0, pi), got {angle}')
    if trans_max < 0:
        raise ValueError(f'trans_max must be >= 0, got {trans_max}')
    axis = _unit_vector(rng)
    direction = _unit_vector(rng)
    norm = rng.uniform(0.0, trans_max) if trans_max > 0 else 0.0
    return RigidTransform(exp_so3(axis * angle), direction * norm)


def random_transform(rot_max: float, trans_max: float, rng: np.random.Generator) -> RigidTransform:
    """Angle uniform in [0, rot_max] about a uniform axis, translation norm uniform in [0, trans_max]."""
    if not 0.0 <= rot_max < math.pi:
        raise ValueError(f'rot_max must lie in [0, pi), got {rot_max}')
    angle = rng.uniform(0.0, rot_max) if rot_max > 0 else 0.0
    return transform_at_angle(angle, trans_max, rng)
