"""
Training objectives with exact gradients.

chamfer          mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2
point_error      mean_i |g_est p_i - g_gt p_i|^2
combined_loss    chamfer terms plus point-error terms (semi) or chamfer only (unsupervised)

Nearest neighbours come from a kd-tree; squared distances are then recomputed
from the coordinates so the kd-tree and brute-force paths give identical values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from utils.errors import ModeMismatch
from utils.geometry_utils import se3
from utils.geometry_utils.cloud import PointCloud

MODES = ('semi', 'unsupervised')

CloudLike = Union[PointCloud, np.ndarray]


@dataclass(frozen=True)
class LossValue:
    total: float
    chamfer: float
    point_error: float


def _points(cloud: CloudLike) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def nearest_indices(src: np.ndarray, dst: np.ndarray, method: str = 'kdtree') -> np.ndarray:
    """Index into dst of the nearest neighbour of every row of src."""
    if method == 'kdtree':
        return cKDTree(dst).query(src, k=1)[1]
    if method == 'brute':
        d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        return np.argmin(d2, axis=1)
    raise ValueError(f"unknown nearest-neighbour method {method!r}; expected 'kdtree' or 'brute'")


def _assignments(A: np.ndarray, B: np.ndarray, method: str):
    return nearest_indices(A, B, method), nearest_indices(B, A, method)


def chamfer(A: CloudLike, B: CloudLike, method: str = 'kdtree') -> float:
    A, B = _points(A), _points(B)
    nn_ab, nn_ba = _assignments(A, B, method)
    d_ab = ((A - B[nn_ab]) ** 2).sum(axis=-1)
    d_ba = ((B - A[nn_ba]) ** 2).sum(axis=-1)
    return float(d_ab.mean() + d_ba.mean())


def chamfer_backward(A: CloudLike, B: CloudLike, method: str = 'kdtree') -> Tuple[np.ndarray, np.ndarray]:
    """(dA, dB) with nearest-neighbour assignments frozen at their forward values."""
    A, B = _points(A), _points(B)
    nn_ab, nn_ba = _assignments(A, B, method)
    diff_ab = 2.0 * (A - B[nn_ab]) / A.shape[0]
    diff_ba = 2.0 * (B - A[nn_ba]) / B.shape[0]
    dA = diff_ab.copy()
    dB = diff_ba.copy()
    np.add.at(dB, nn_ab, -diff_ab)
    np.add.at(dA, nn_ba, -diff_ba)
    return dA, dB


def point_error_loss(g_est: se3.RigidTransform, g_gt: se3.RigidTransform, P: CloudLike) -> float:
    pts = _points(P)
    e = se3.apply_points(g_est, pts) - se3.apply_points(g_gt, pts)
    return float((e * e).sum(axis=-1).mean())


def point_error_gradient(g_est: se3.RigidTransform, g_gt: se3.RigidTransform,
                         P: CloudLike) -> Tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. a left twist eps of g_est, exp(eps) g_est, at eps = 0.

    Gradient layout follows the twist: rotation part first, translation second.
    """
    pts = _points(P)
    y = se3.apply_points(g_est, pts)
    e = y - se3.apply_points(g_gt, pts)
    value = float((e * e).sum(axis=-1).mean())
    grad_v = 2.0 * np.cross(y, e).mean(axis=0)
    grad_t = 2.0 * e.mean(axis=0)
    return value, np.concatenate([grad_v, grad_t])


def _total(terms: Union[float, Iterable[float]]) -> float:
    if np.isscalar(terms):
        return float(terms)
    return float(sum(terms))


def combined_loss(mode: str, chamfer_terms: Union[float, Iterable[float]],
                  pe_terms: Optional[Union[float, Iterable[float]]] = None) -> LossValue:
    """Unweighted sum of the reconstruction and (semi mode only) point-error terms."""
    if mode not in MODES:
        raise ModeMismatch(f'unknown training mode {mode!r}; expected one of {MODES}')
    if mode == 'semi' and pe_terms is None:
        raise ModeMismatch('semi-supervised loss needs point-error terms')
    if mode == 'unsupervised' and pe_terms is not None:
        raise ModeMismatch('unsupervised loss must not receive point-error terms')
    cf = _total(chamfer_terms)
    pe = _total(pe_terms) if pe_terms is not None else 0.0
    return LossValue(total=cf + pe, chamfer=cf, point_error=pe)
