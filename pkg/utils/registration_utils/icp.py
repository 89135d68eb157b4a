""" Point-to-point ICP baseline

    Estimate g such that P ~ g Q:
    nearest neighbours of g Q in P via a kd-tree, closed-form SVD alignment of
    the matched pairs, repeat until the mean squared distance stops improving.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial import cKDTree

from utils.errors import DegenerateCloud, DegenerateConfiguration
from utils.geometry_utils import se3
from utils.geometry_utils.cloud import PointCloud
from utils.registration_utils.feature_metric import RegistrationResult


class IcpConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    max_iterations: int = Field(50, ge=1)
    tolerance: float = Field(1e-10, ge=0.0, description='Stop when the relative error decrease falls below this')


def kabsch(src_points: np.ndarray, dst_points: np.ndarray) -> se3.RigidTransform:
    """Least-squares rigid motion taking src onto dst (proper rotation only)."""
    A = np.asarray(src_points, dtype=np.float64)
    B = np.asarray(dst_points, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise DegenerateConfiguration(f'kabsch needs two (n, 3) arrays of equal size, got {A.shape}, {B.shape}')
    if A.shape[0] < 3:
        raise DegenerateConfiguration(f'kabsch needs at least 3 point pairs, got {A.shape[0]}')

    centroid_A = A.mean(axis=0)
    centroid_B = B.mean(axis=0)
    A = A - centroid_A
    B = B - centroid_B

    spread = np.linalg.svd(A, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= 1e-10 * spread[0]:
        raise DegenerateConfiguration('source points are coincident or collinear')

    H = A.T @ B
    U, _, Vt = np.linalg.svd(H)
    # special reflection case
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = centroid_B - R @ centroid_A
    return se3.RigidTransform(R, t)


def _match_error(tree: cKDTree, target: np.ndarray, moved: np.ndarray):
    idx = tree.query(moved)[1]
    return idx, float(((moved - target[idx]) ** 2).sum(axis=-1).mean())


def icp_register(P: PointCloud, Q: PointCloud, cfg: Optional[IcpConfig] = None,
                 init: Optional[se3.RigidTransform] = None) -> RegistrationResult:
    """Align source Q to target P. A step that would raise the error is never taken."""
    cfg = cfg or IcpConfig()
    for cloud, label in ((P, 'target'), (Q, 'source')):
        if cloud.n < 3 or float(np.max(cloud.extent())) <= 0.0:
            raise DegenerateCloud(f'{label} cloud is degenerate for ICP ({cloud.n} points)')

    target = P.points
    tree = cKDTree(target)
    g = init if init is not None else se3.RigidTransform.identity()
    moved = se3.apply_points(g, Q.points)
    idx, err = _match_error(tree, target, moved)
    history = [err]
    transforms = [g]
    converged = False

    for _ in range(cfg.max_iterations):
        if err == 0.0:
            converged = True
            break
        try:
            step = kabsch(moved, target[idx])
        except DegenerateConfiguration as e:
            raise DegenerateCloud(f'ICP correspondences degenerate: {e}') from e
        g_new = se3.compose(step, g)
        moved_new = se3.apply_points(g_new, Q.points)
        idx_new, err_new = _match_error(tree, target, moved_new)
        if err_new > err:
            converged = True
            break
        improvement = err - err_new
        g, moved, idx, err = g_new, moved_new, idx_new, err_new
        history.append(err)
        transforms.append(g)
        if improvement <= cfg.tolerance * history[-2]:
            converged = True
            break

    return RegistrationResult(g_est=g, r_est=err, residual_history=tuple(history),
                              iterations_run=len(history) - 1, converged=converged,
                              transform_history=tuple(transforms))
