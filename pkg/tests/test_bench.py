import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from monitoring.performance_monitor import create_monitor
from pipelines.p0_generate import synthesize_dataset
from pipelines.p3_bench import (
    BENCH_COLUMNS,
    CATEGORY_COLUMNS,
    TIMING_COLUMNS,
    TRACE_COLUMNS,
    BenchProtocol,
    build_estimators,
    category_test,
    density_test,
    make_trial,
    noise_test,
    overlap_test,
    residual_trace,
    rotation_sweep,
    run_sweep,
    timing_report,
)
from utils.errors import DegenerateCloud
from utils.geometry_utils import se3
from utils.registration_utils.feature_metric import RegistrationConfig


@pytest.fixture
def dataset():
    return synthesize_dataset(('box', 'composite'), 2, 64, 0)


@pytest.fixture
def protocol():
    return BenchProtocol(init_rot_angles_deg=(0.0, 30.0), init_trans_max=0.2, trials_per_cell=2,
                         methods=('icp',), seed=3)


def without_timing(df):
    return df.drop(columns=['time_ms_mean'])


def test_trials_are_seeded_and_consistent(dataset, protocol):
    a = make_trial(dataset, protocol, 1, 0)
    b = make_trial(dataset, protocol, 1, 0)
    assert np.array_equal(a.source.points, b.source.points)
    assert math.degrees(se3.rotation_angle(a.g_true.R)) == pytest.approx(30.0, abs=1e-9)
    moved = se3.apply_points(a.g_true, a.source.points)
    np.testing.assert_allclose(moved, a.target.points, atol=1e-12)


def test_rotation_sweep_layout(dataset, protocol):
    df = rotation_sweep(None, dataset, protocol, threads=1)
    assert list(df.columns) == BENCH_COLUMNS
    assert len(df) == 2
    assert list(df['init_angle_deg']) == [0.0, 30.0]
    assert set(df['perturbation']) == {'none'}
    assert (df['trials'] == 2).all()


def test_icp_is_exact_without_motion(dataset):
    protocol = BenchProtocol(init_rot_angles_deg=(0.0,), init_trans_max=0.0, trials_per_cell=3, methods=('icp',))
    row = rotation_sweep(None, dataset, protocol, threads=1).iloc[0]
    assert row['rot_err_mean_deg'] == 0.0
    assert row['trans_err_mean'] == 0.0
    assert row['success_rate'] == 1.0


def test_thread_count_does_not_change_results(dataset, protocol):
    serial = rotation_sweep(None, dataset, protocol, threads=1)
    pooled = rotation_sweep(None, dataset, protocol, threads=3)
    pd.testing.assert_frame_equal(without_timing(serial), without_timing(pooled))


def test_density_with_full_keep_matches_rotation(dataset, protocol):
    rotation = rotation_sweep(None, dataset, protocol, threads=1)
    density = density_test(None, dataset, protocol, keep_fraction=1.0, threads=1)
    pd.testing.assert_frame_equal(without_timing(rotation), without_timing(density))


def test_perturbation_protocols_tag_rows(dataset, protocol):
    noise = noise_test(None, dataset, protocol, threads=1)
    assert len(noise) == 4
    assert list(noise['perturbation'].unique()) == ['noise=0.01', 'noise=0.02']
    overlap = overlap_test(None, dataset, protocol, crops=(0.25,), threads=1)
    assert list(overlap['perturbation']) == ['crop=0.25'] * 2
    density = density_test(None, dataset, protocol, threads=1)
    assert set(density['perturbation']) == {'keep=0.1'}


def test_category_splits_seen_and_held_out_families(dataset, protocol):
    df = category_test(None, dataset, protocol, holdout_families=('composite',), threads=1)
    assert list(df.columns) == CATEGORY_COLUMNS
    assert list(df['split']) == ['same', 'same', 'cross', 'cross']
    same = rotation_sweep(None, dataset.with_families(('box',)), protocol, threads=1)
    cross = rotation_sweep(None, dataset.with_families(('composite',)), protocol, threads=1)
    split = df.drop(columns=['split'])
    pd.testing.assert_frame_equal(without_timing(split.iloc[:2]), without_timing(same))
    pd.testing.assert_frame_equal(without_timing(split.iloc[2:].reset_index(drop=True)), without_timing(cross))


def test_category_needs_both_splits(dataset, protocol):
    with pytest.raises(ValueError):
        category_test(None, dataset, protocol, holdout_families=(), threads=1)
    with pytest.raises(ValueError):
        category_test(None, dataset, protocol, holdout_families=('torus',), threads=1)
    with pytest.raises(ValueError):
        category_test(None, dataset, protocol, holdout_families=('box', 'composite'), threads=1)


def test_failures_count_against_success_rate(dataset, protocol, tmp_path):
    def broken(trial):
        raise DegenerateCloud('no')

    monitor = create_monitor('bench', str(tmp_path))
    df = run_sweep({'broken': broken}, dataset, protocol, threads=1, monitor=monitor)
    assert (df['success_rate'] == 0.0).all()
    assert df['rot_err_mean_deg'].isna().all()
    records = monitor.get_performance_data()
    assert len(records) == 2
    assert not records[0]['success']
    assert 'DegenerateCloud' in records[0]['error_message']


def test_perfect_estimator_succeeds(dataset, protocol):
    df = run_sweep({'oracle': lambda trial: trial.g_true}, dataset, protocol, threads=1)
    assert (df['success_rate'] == 1.0).all()
    assert (df['rot_err_mean_deg'] < 1e-6).all()


def test_model_methods_need_a_model():
    with pytest.raises(ValueError):
        build_estimators(None, ('fmr', 'icp'))


def test_sweep_with_model(dataset, protocol, small_model):
    protocol = protocol.model_copy(update={'methods': ('fmr', 'icp')})
    df = rotation_sweep(small_model, dataset, protocol, reg_cfg=RegistrationConfig(max_iterations=2), threads=1)
    assert list(df['method']) == ['fmr', 'fmr', 'icp', 'icp']
    assert ((df['success_rate'] >= 0.0) & (df['success_rate'] <= 1.0)).all()


def test_residual_trace(dataset, small_model):
    P = dataset.clouds[0]
    g = se3.exp([0.0, 0.0, math.radians(20), 0.05, 0.0, 0.0])
    Q = se3.apply(g, P)
    cfg = RegistrationConfig(max_iterations=3, step_tolerance=0.0)
    df = residual_trace(small_model, P, Q, cfg, g_true=se3.inverse(g))
    assert list(df.columns) == TRACE_COLUMNS
    assert list(df['iteration']) == [0, 1, 2, 3]
    assert df['rot_err_deg'].iloc[0] == pytest.approx(20.0, abs=1e-9)
    assert residual_trace(small_model, P, Q, cfg)['rot_err_deg'].isna().all()


def test_timing_report(small_model):
    df = timing_report(small_model, sizes=(64,), trials=2, methods=('fmr', 'icp'),
                       reg_cfg=RegistrationConfig(max_iterations=2))
    assert list(df.columns) == TIMING_COLUMNS
    assert list(df['method']) == ['fmr', 'icp']
    fmr, icp = df.iloc[0], df.iloc[1]
    assert 8 <= fmr['encoder_passes'] <= 10
    assert icp['encoder_passes'] == 0
    assert (df['time_ms_median'] > 0).all()


def test_protocol_validation():
    with pytest.raises(ValidationError):
        BenchProtocol(init_rot_angles_deg=(180.0,))
    with pytest.raises(ValidationError):
        BenchProtocol(init_rot_angles_deg=())
    with pytest.raises(ValidationError):
        BenchProtocol(methods=('ndt',))


@pytest.mark.slow
def test_icp_sweep_is_reproducible_and_accurate_at_small_angles():
    dataset = synthesize_dataset(('box', 'composite'), 5, 512, 2)
    protocol = BenchProtocol(init_rot_angles_deg=(0.0, 5.0), init_trans_max=0.0, trials_per_cell=100,
                             methods=('icp',), seed=9)
    first = rotation_sweep(None, dataset, protocol, threads=4)
    second = rotation_sweep(None, dataset, protocol, threads=1)
    pd.testing.assert_frame_equal(without_timing(first), without_timing(second))
    assert first['success_rate'].iloc[0] == 1.0
