import math

import numpy as np
import pandas as pd
import pytest

from pipelines.p0_generate import synthesize_dataset
from pipelines.p1_train import (
    REPORT_COLUMNS,
    TrainConfig,
    evaluate,
    point_error_terms,
    reconstruction_terms,
    sample_training_pair,
    split_dataset,
    step_loss,
    train,
)
from pipelines.p3_bench import BenchProtocol
from utils.geometry_utils import se3
from utils.geometry_utils.cloud import PerturbationSpec, apply_perturbation
from utils.network_utils.model import ModelConfig, ModelParams, init_model
from utils.network_utils.tinynet import DenseLayer

TINY_MODEL = ModelConfig(feature_dim=8, encoder_widths=(6, 7), decoder_widths=(9, 5, 4), output_points=5)


def tiny_config(**update):
    base = dict(epochs=2, lr=1e-3, cloud_size=24, families=('box',), count_per_family=4,
                steps_per_epoch=2, val_pairs=1, register_iterations=2, seed=5, model=TINY_MODEL)
    base.update(update)
    return TrainConfig(**base)


@pytest.fixture
def dataset():
    return synthesize_dataset(('box', 'torus'), 3, 24, 1)


def layers_equal(a: ModelParams, b: ModelParams) -> bool:
    return all(np.array_equal(x.layer.W, y.layer.W) and np.array_equal(x.layer.b, y.layer.b)
               for x, y in zip(a.encoder + a.decoder, b.encoder + b.decoder))


def test_split_is_disjoint_and_covers_everything(dataset):
    train_set, val_set = split_dataset(dataset, 0.2, seed=0)
    assert len(train_set) > 0 and len(val_set) > 0
    assert set(train_set.names).isdisjoint(val_set.names)
    assert set(train_set.names) | set(val_set.names) == set(dataset.names)
    assert split_dataset(dataset, 0.2, seed=0)[1].names == val_set.names


def test_split_needs_two_clouds(dataset):
    with pytest.raises(ValueError):
        split_dataset(dataset.subset([0]), 0.5, seed=0)


def test_training_pair_without_motion_is_identical(dataset):
    cfg = tiny_config(rot_max_train_deg=0.0, trans_max_train=0.0)
    P, Q, g = sample_training_pair(dataset, cfg, np.random.default_rng(0))
    assert np.array_equal(P.points, Q.points)
    assert np.array_equal(g.as_matrix(), np.eye(4))
    assert P.n == 24


def test_training_pair_respects_ranges(dataset):
    cfg = tiny_config(rot_max_train_deg=30.0, trans_max_train=0.1)
    rng = np.random.default_rng(1)
    for _ in range(20):
        _, _, g = sample_training_pair(dataset, cfg, rng)
        assert se3.rotation_angle(g.R) <= math.radians(30.0) + 1e-12
        assert np.linalg.norm(g.t) <= 0.1 + 1e-12


def test_unsupervised_step_ignores_ground_truth(dataset):
    cfg = tiny_config(mode='unsupervised')
    params = init_model(TINY_MODEL, seed=0)
    P, Q, _ = sample_training_pair(dataset, cfg, np.random.default_rng(2))
    loss, enc, dec = step_loss(P, Q, None, params, cfg)
    assert loss.point_error == 0.0
    assert loss.total == loss.chamfer > 0.0
    assert enc.is_finite() and dec.is_finite()


AUGMENTATIONS = (PerturbationSpec(keep_fraction=0.5), PerturbationSpec(noise_sigma=0.01))


def test_augmented_copies_reconstruct_the_clean_source(dataset):
    params = init_model(TINY_MODEL, seed=0)
    P, Q, _ = sample_training_pair(dataset, tiny_config(), np.random.default_rng(2))
    plain, _, _ = step_loss(P, Q, None, params, tiny_config())
    augmented, enc, dec = step_loss(P, Q, None, params, tiny_config(augmentations=AUGMENTATIONS),
                                    np.random.default_rng(9))

    rng = np.random.default_rng(9)
    extra = [reconstruction_terms(apply_perturbation(Q, spec, rng), params, reference=Q)[0]
             for spec in AUGMENTATIONS]
    assert augmented.chamfer == pytest.approx(plain.chamfer + sum(extra), rel=1e-12)
    assert all(value > 0.0 for value in extra)
    assert enc.is_finite() and dec.is_finite()


def test_augmentation_needs_a_generator(dataset):
    cfg = tiny_config(augmentations=AUGMENTATIONS)
    P, Q, _ = sample_training_pair(dataset, cfg, np.random.default_rng(2))
    with pytest.raises(ValueError):
        step_loss(P, Q, None, init_model(TINY_MODEL, seed=0), cfg)


def test_augmented_training_is_deterministic(dataset):
    cfg = tiny_config(augmentations=AUGMENTATIONS)
    best_a, _ = train(cfg, dataset)
    best_b, _ = train(cfg, dataset)
    assert layers_equal(best_a, best_b)
    assert not layers_equal(best_a, train(tiny_config(), dataset)[0])


def test_held_out_families_never_reach_training(dataset):
    held_out = train(tiny_config(holdout_families=('torus',)), dataset)[1]
    reference = train(tiny_config(), dataset.without_families(('torus',)))[1]
    assert layers_equal(held_out.final_params, reference.final_params)
    with pytest.raises(ValueError):
        train(tiny_config(holdout_families=('box', 'torus')), dataset)


def test_zero_learning_rate_keeps_initial_parameters(dataset):
    cfg = tiny_config(lr=0.0)
    best, report = train(cfg, dataset)
    initial = init_model(TINY_MODEL, cfg.seed)
    assert layers_equal(best, initial)
    assert layers_equal(report.final_params, initial)


def test_training_is_deterministic(dataset):
    cfg = tiny_config()
    best_a, report_a = train(cfg, dataset)
    best_b, report_b = train(cfg, dataset)
    assert layers_equal(best_a, best_b)
    pd.testing.assert_frame_equal(report_a.to_frame().drop(columns=['seconds']),
                                  report_b.to_frame().drop(columns=['seconds']))


def test_training_changes_parameters(dataset):
    cfg = tiny_config(epochs=1)
    _, report = train(cfg, dataset)
    assert not layers_equal(report.final_params, init_model(TINY_MODEL, cfg.seed))


def test_report_layout(dataset, tmp_path):
    cfg = tiny_config(accumulate_steps=2)
    _, report = train(cfg, dataset)
    df = report.to_frame()
    assert list(df.columns) == REPORT_COLUMNS
    assert list(df['epoch']) == [1, 2]
    assert df['val_rot_err_deg'].isna().all()
    assert (df['loss_pe'] == 0.0).all()
    assert 1 <= report.best_epoch <= 2
    path = report.write_csv(tmp_path / 'train_report.csv')
    assert pd.read_csv(path).shape == (2, len(REPORT_COLUMNS))


def test_semi_training_reports_point_error(dataset):
    cfg = tiny_config(mode='semi', model=ModelConfig(feature_dim=16, encoder_widths=(8, 12),
                                                     decoder_widths=(9, 5, 4), output_points=5))
    _, report = train(cfg, dataset)
    df = report.to_frame()
    assert (df['loss_pe'] > 0.0).any()
    assert df['val_rot_err_deg'].notna().all()


def test_semi_gradient_matches_finite_differences(small_model, box_cloud):
    cfg = tiny_config(mode='semi', register_iterations=1, model=small_model.config)
    g_gt = se3.exp([0.002, -0.001, 0.0015, 0.001, 0.0005, -0.001])
    Q = se3.apply(g_gt, box_cloud)
    value, grads = point_error_terms(box_cloud, Q, g_gt, small_model, cfg)
    assert value > 0.0

    layer = small_model.encoder['enc_fc3'].layer
    analytic, numeric = [], []
    h = 1e-6
    for index in [(0, 0), (3, 5), (7, 11), (12, 2), (20, 23), (31, 9)]:
        values = []
        for delta in (h, -h):
            W = layer.W.copy()
            W[index] += delta
            encoder = small_model.encoder.with_layers({'enc_fc3': DenseLayer(W, layer.b)})
            params = ModelParams(encoder, small_model.decoder, small_model.config)
            values.append(point_error_terms(box_cloud, Q, g_gt, params, cfg)[0])
        numeric.append((values[0] - values[1]) / (2 * h))
        analytic.append(grads['enc_fc3'].dW[index])
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(analytic - numeric) <= 0.05 * np.linalg.norm(numeric) + 1e-12


def test_evaluate_with_perfect_estimator(dataset):
    protocol = BenchProtocol(init_rot_angles_deg=(0.0, 45.0), trials_per_cell=2, methods=('fmr',))
    df = evaluate(None, dataset, protocol, estimator=lambda trial: trial.g_true)
    assert len(df) == 2
    assert (df['success_rate'] == 1.0).all()
    assert (df['rmse_mean'] < 1e-9).all()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode='supervised')
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    assert TrainConfig(rot_max_train_deg=90.0).rot_max_train == pytest.approx(math.pi / 2)


@pytest.mark.slow
def test_unsupervised_reconstruction_improves(dataset):
    cfg = tiny_config(epochs=30, lr=1e-2, steps_per_epoch=4)
    _, report = train(cfg, dataset)
    df = report.to_frame()
    assert df['loss_total'].iloc[-5:].mean() < df['loss_total'].iloc[:5].mean()
