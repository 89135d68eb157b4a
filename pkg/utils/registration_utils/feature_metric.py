"""
Feature-metric registration
===========================

DESCRIPTION:
Aligns a source cloud Q to a target cloud P by driving the global-feature
residual r = F(P) - F(g Q) to zero with inverse-compositional Gauss-Newton:

    J        forward-difference Jacobian of F on the target, one column per twist axis
    dtheta   solution of (J^T J + lambda I) dtheta = J^T r
    g        exp(dtheta) composed on the left of the current estimate

The Jacobian is evaluated once on P and reused every iteration, so an
iteration costs one encoder pass on the moved source. No point correspondences
are ever searched.

NOTES:
- Clouds are expected in unit-box coordinates; nothing is normalized here.
- The step is checked against step_tolerance before it is applied. A step that
  small ends the run as converged and leaves g unchanged.
- Encoder passes with the precomputed Jacobian: 1 for F(P), 6 for the
  Jacobian columns, 1 per residual evaluation (iterations_run + 1 of them).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import cho_factor, cho_solve

from utils.errors import DegenerateCloud, SingularNormalEquations
from utils.geometry_utils import se3
from utils.geometry_utils.cloud import PointCloud
from utils.network_utils.model import ModelParams, encode


# Largest damping tried, as a multiple of the mean diagonal of J^T J.
MAX_DAMPING_RATIO = 1e3
# First nonzero damping when escalating from lambda = 0.
INITIAL_DAMPING_RATIO = 1e-9
# Cholesky pivots whose square falls below this fraction of the largest
# diagonal entry mark the system as numerically singular.
PIVOT_RTOL = 1e-13


class RegistrationConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    max_iterations: int = Field(10, ge=1, description='Gauss-Newton iteration budget')
    perturbation_xi: float = Field(0.02, gt=0.0, description='Finite-difference step of the Jacobian')
    step_tolerance: float = Field(1e-7, ge=0.0, description='Early stop when |dtheta| falls below this')
    damping_lambda: float = Field(0.0, ge=0.0, description='Initial damping of the normal equations')
    recompute_jacobian: bool = Field(False, description='Re-evaluate J on g Q every iteration')


@dataclass(frozen=True)
class RegistrationResult:
    """Final estimate plus one residual (and transform) per iterate, iterate 0 included."""
    g_est: se3.RigidTransform
    r_est: float
    residual_history: Tuple[float, ...]
    iterations_run: int
    converged: bool
    transform_history: Tuple[se3.RigidTransform, ...] = ()


def check_registrable(cloud: PointCloud, label: str) -> None:
    if cloud.n < 2 or float(np.max(cloud.extent())) <= 0.0:
        raise DegenerateCloud(f'{label} cloud is degenerate ({cloud.n} points, zero extent)')


def feature_residual(P: PointCloud, Q: PointCloud, g: se3.RigidTransform, params: ModelParams) -> np.ndarray:
    """F(P) - F(g Q); its squared norm is the feature-metric error."""
    return encode(P, params) - encode(se3.apply(g, Q), params)


def fd_jacobian(P: PointCloud, params: ModelParams, xi: float,
                base_feature: Optional[np.ndarray] = None) -> np.ndarray:
    """K x 6 forward differences of F at P along each twist axis.

    base_feature, when given, is used as F(P) and saves one encoder pass.
    """
    if xi <= 0:
        raise ValueError(f'xi must be > 0, got {xi}')
    f0 = encode(P, params) if base_feature is None else base_feature
    columns = []
    for i in range(6):
        step = np.zeros(6)
        step[i] = xi
        columns.append((encode(se3.apply(se3.exp(step), P), params) - f0) / xi)
    return np.stack(columns, axis=1)


def gn_step(J: np.ndarray, r: np.ndarray, lam: float = 0.0) -> se3.Twist:
    """Solve (J^T J + lam I) dtheta = J^T r by Cholesky, escalating lam on failure."""
    return se3.Twist.from_vector(solve_normal_equations(J, r, lam)[0])


def solve_normal_equations(J: np.ndarray, r: np.ndarray, lam: float = 0.0) -> Tuple[np.ndarray, float]:
    """(dtheta, damping actually used). A zero right-hand side gives a zero step at lam."""
    J = np.asarray(J, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if J.ndim != 2 or J.shape[1] != 6 or J.shape[0] != r.shape[0]:
        raise ValueError(f'gn_step needs J (K, 6) and r (K,), got {J.shape} and {r.shape}')
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(r))):
        raise SingularNormalEquations('Jacobian or residual is not finite')
    if lam < 0:
        raise ValueError(f'damping must be >= 0, got {lam}')

    A = J.T @ J
    b = J.T @ r
    if not np.any(b):
        return np.zeros(6), float(lam)

    mean_diag = float(np.trace(A)) / 6.0
    cap = MAX_DAMPING_RATIO * mean_diag
    current = float(lam)
    while True:
        system = A + current * np.eye(6)
        try:
            factor = cho_factor(system)
            pivots = np.diag(factor[0]) ** 2
            if pivots.min() > PIVOT_RTOL * np.max(np.diag(system)):
                return cho_solve(factor, b), current
        except np.linalg.LinAlgError:
            pass
        current = current * 10.0 if current > 0 else INITIAL_DAMPING_RATIO * mean_diag
        if current <= 0 or current > cap:
            raise SingularNormalEquations(
                f'normal equations singular up to damping {cap:.3g} (mean diagonal {mean_diag:.3g})')


def register(P: PointCloud, Q: PointCloud, params: ModelParams,
             cfg: Optional[RegistrationConfig] = None,
             init: Optional[se3.RigidTransform] = None) -> RegistrationResult:
    """Estimate g such that g Q aligns with P."""
    cfg = cfg or RegistrationConfig()
    check_registrable(P, 'target')
    check_registrable(Q, 'source')

    g = init if init is not None else se3.RigidTransform.identity()
    f_p = encode(P, params)
    J = None if cfg.recompute_jacobian else fd_jacobian(P, params, cfg.perturbation_xi, base_feature=f_p)

    moved = se3.apply(g, Q)
    f_q = encode(moved, params)
    r = f_p - f_q
    history = [float(r @ r)]
    transforms = [g]
    converged = False

    for _ in range(cfg.max_iterations):
        if cfg.recompute_jacobian:
            J = fd_jacobian(moved, params, cfg.perturbation_xi, base_feature=f_q)
        dtheta = gn_step(J, r, cfg.damping_lambda).as_vector()
        if np.linalg.norm(dtheta) < cfg.step_tolerance:
            converged = True
            break
        g = se3.compose(se3.exp(dtheta), g)
        moved = se3.apply(g, Q)
        f_q = encode(moved, params)
        r = f_p - f_q
        history.append(float(r @ r))
        transforms.append(g)

    return RegistrationResult(g_est=g, r_est=history[-1], residual_history=tuple(history),
                              iterations_run=len(history) - 1, converged=converged,
                              transform_history=tuple(transforms))
