import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from utils.errors import DegenerateCloud, SingularNormalEquations
from utils.geometry_utils import se3
from utils.geometry_utils.cloud import PointCloud
from utils.network_utils.model import ENCODER_PASSES, ModelParams, encode
from utils.network_utils.tinynet import IDENTITY, DenseLayer, NamedLayer, ParamSet
from utils.registration_utils.feature_metric import (
    RegistrationConfig,
    feature_residual,
    fd_jacobian,
    gn_step,
    register,
    solve_normal_equations,
)


def test_gn_step_with_identity_jacobian():
    J = np.vstack([np.eye(6), np.zeros((2, 6))])
    r = np.arange(1.0, 9.0)
    assert_allclose(gn_step(J, r).as_vector(), np.arange(1.0, 7.0), atol=1e-12)


def test_gn_step_matches_least_squares(rng):
    J = rng.normal(size=(20, 6))
    r = rng.normal(size=20)
    expected = np.linalg.lstsq(J, r, rcond=None)[0]
    assert_allclose(gn_step(J, r).as_vector(), expected, atol=1e-9)


def test_gn_step_matches_least_squares_on_tall_systems():
    rng = np.random.default_rng(77)
    for _ in range(100):
        J = rng.normal(size=(1024, 6))
        r = rng.normal(size=1024)
        expected = np.linalg.lstsq(J, r, rcond=None)[0]
        assert_allclose(gn_step(J, r).as_vector(), expected, rtol=0, atol=1e-9)


def test_gn_step_heavy_damping_is_scaled_gradient(rng):
    J = rng.normal(size=(20, 6))
    r = rng.normal(size=20)
    lam = 1e8
    assert_allclose(gn_step(J, r, lam).as_vector(), J.T @ r / lam, rtol=1e-5)


def test_gn_step_zero_residual_gives_zero_step(rng):
    assert np.array_equal(gn_step(rng.normal(size=(10, 6)), np.zeros(10)).as_vector(), np.zeros(6))


def test_rank_deficient_system_is_damped(rng):
    J = rng.normal(size=(12, 6))
    J[:, 4] = 0.0
    dtheta, used = solve_normal_equations(J, rng.normal(size=12))
    assert used > 0.0
    assert np.all(np.isfinite(dtheta))
    assert dtheta[4] == 0.0


def test_non_finite_system_is_singular(rng):
    J = rng.normal(size=(10, 6))
    J[0, 0] = np.nan
    with pytest.raises(SingularNormalEquations):
        gn_step(J, np.ones(10))


def test_gn_step_shape_checks():
    with pytest.raises(ValueError):
        gn_step(np.ones((4, 5)), np.ones(4))
    with pytest.raises(ValueError):
        gn_step(np.ones((4, 6)), np.ones(3))


def test_fd_jacobian_shape_and_pass_count(small_model, box_cloud):
    with ENCODER_PASSES.measure() as counted:
        J = fd_jacobian(box_cloud, small_model, 0.02)
    assert J.shape == (32, 6)
    assert counted['passes'] == 7
    f0 = encode(box_cloud, small_model)
    with ENCODER_PASSES.measure() as counted:
        assert np.array_equal(fd_jacobian(box_cloud, small_model, 0.02, base_feature=f0), J)
    assert counted['passes'] == 6


def test_fd_jacobian_of_constant_encoder_is_zero(toy_model, box_cloud):
    flat = ParamSet(tuple(NamedLayer(e.name, DenseLayer(np.zeros_like(e.layer.W), e.layer.b + 1.0), e.activation)
                          for e in toy_model.encoder))
    params = ModelParams(flat, toy_model.decoder, toy_model.config)
    assert np.array_equal(fd_jacobian(box_cloud, params, 0.02), np.zeros((8, 6)))


def test_fd_jacobian_rejects_bad_xi(toy_model, box_cloud):
    with pytest.raises(ValueError):
        fd_jacobian(box_cloud, toy_model, 0.0)


def test_register_identical_clouds_is_a_fixed_point(small_model, box_cloud):
    with ENCODER_PASSES.measure() as counted:
        result = register(box_cloud, box_cloud, small_model)
    assert result.iterations_run == 0
    assert result.converged
    assert result.residual_history == (0.0,)
    assert np.array_equal(result.g_est.as_matrix(), np.eye(4))
    assert counted['passes'] == 8


def test_register_pass_count_and_history(small_model, box_cloud):
    g = se3.exp([0.0, 0.0, math.radians(10), 0.02, 0.0, 0.0])
    Q = se3.apply(se3.inverse(g), box_cloud)
    cfg = RegistrationConfig(max_iterations=4, step_tolerance=0.0)
    with ENCODER_PASSES.measure() as counted:
        result = register(box_cloud, Q, small_model, cfg)
    assert result.iterations_run == 4
    assert not result.converged
    assert len(result.residual_history) == 5
    assert len(result.transform_history) == 5
    assert counted['passes'] == 8 + result.iterations_run
    assert result.r_est == result.residual_history[-1]
    assert result.g_est.orthonormality_error() < 1e-9


def test_register_first_step_is_one_gauss_newton_step(small_model, box_cloud):
    Q = se3.apply(se3.exp([0.05, -0.02, 0.1, 0.01, 0.0, 0.02]), box_cloud)
    cfg = RegistrationConfig(max_iterations=1, step_tolerance=0.0)
    result = register(box_cloud, Q, small_model, cfg)
    J = fd_jacobian(box_cloud, small_model, cfg.perturbation_xi)
    r0 = feature_residual(box_cloud, Q, se3.RigidTransform.identity(), small_model)
    expected = se3.exp(gn_step(J, r0).as_vector())
    assert_allclose(result.g_est.as_matrix(), expected.as_matrix(), atol=1e-12)
    assert result.residual_history[0] == pytest.approx(float(r0 @ r0))


def test_register_honours_initial_estimate(small_model, box_cloud):
    g = se3.exp([0.0, 0.2, 0.0, 0.0, 0.1, 0.0])
    Q = se3.apply(se3.inverse(g), box_cloud)
    result = register(box_cloud, Q, small_model, init=g)
    assert result.residual_history[0] == pytest.approx(0.0, abs=1e-18)
    assert result.iterations_run == 0


def test_register_with_recomputed_jacobian_runs(small_model, box_cloud):
    Q = se3.apply(se3.exp([0.0, 0.0, 0.1, 0.0, 0.0, 0.0]), box_cloud)
    cfg = RegistrationConfig(max_iterations=2, recompute_jacobian=True)
    result = register(box_cloud, Q, small_model, cfg)
    assert 1 <= len(result.residual_history) <= 3
    assert np.isfinite(result.r_est)


def test_register_rejects_degenerate_clouds(small_model, box_cloud):
    with pytest.raises(DegenerateCloud):
        register(box_cloud, PointCloud([[0.5, 0.5, 0.5]]), small_model)
    with pytest.raises(DegenerateCloud):
        register(PointCloud([[0.1, 0.1, 0.1]] * 4), box_cloud, small_model)


def test_registration_config_validation():
    with pytest.raises(ValidationError):
        RegistrationConfig(max_iterations=0)
    with pytest.raises(ValidationError):
        RegistrationConfig(perturbation_xi=0.0)


def test_fd_jacobian_agrees_with_central_differences(small_model):
    # linear encoder on a single point: max-pool is the identity, so F is smooth
    encoder = ParamSet(tuple(NamedLayer(e.name, e.layer, IDENTITY) for e in small_model.encoder))
    params = ModelParams(encoder, small_model.decoder, small_model.config)
    P = PointCloud(np.array([[0.3, -0.2, 0.5]]))
    xi = 0.02
    J = fd_jacobian(P, params, xi)
    h = xi / 10
    for i in range(6):
        step = np.zeros(6)
        step[i] = h
        central = (encode(se3.apply(se3.exp(step), P), params)
                   - encode(se3.apply(se3.exp(-step), P), params)) / (2 * h)
        assert np.linalg.norm(J[:, i] - central) <= 0.05 * np.linalg.norm(central)
