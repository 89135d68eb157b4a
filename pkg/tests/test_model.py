import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils.errors import ConfigError, ShapeMismatch
from utils.geometry_utils import se3
from utils.network_utils.model import (
    ENCODER_PASSES,
    ModelConfig,
    ModelParams,
    decode,
    decode_backward,
    encode,
    encode_backward,
    init_model,
    load_model,
    save_model,
)
from utils.network_utils.tinynet import DenseLayer, NamedLayer, ParamSet, save_checkpoint


def zeroed(params: ParamSet, bias_value: float) -> ParamSet:
    return ParamSet(tuple(NamedLayer(e.name, DenseLayer(np.zeros_like(e.layer.W),
                                                        np.full_like(e.layer.b, bias_value)),
                                     e.activation) for e in params))


def test_default_architecture():
    params = init_model(seed=0)
    assert params.encoder.names == ['enc_fc1', 'enc_fc2', 'enc_fc3']
    assert params.decoder.names == ['dec_fc1', 'dec_fc2', 'dec_fc3', 'dec_fc4']
    assert params.encoder['enc_fc3'].layer.W.shape == (1024, 128)
    assert params.decoder['dec_fc4'].layer.W.shape == (3 * 512, 128)
    assert params.encoder['enc_fc3'].activation.kind == 'none'
    assert params.decoder['dec_fc1'].activation.slope == 0.01


def test_init_is_seeded(toy_config):
    a, b = init_model(toy_config, seed=4), init_model(toy_config, seed=4)
    for x, y in zip(a.encoder + a.decoder, b.encoder + b.decoder):
        assert np.array_equal(x.layer.W, y.layer.W)


def test_params_reject_wrong_widths(toy_model, toy_config):
    with pytest.raises(ShapeMismatch):
        ModelParams(toy_model.encoder, toy_model.decoder, toy_config.model_copy(update={'feature_dim': 9}))


def test_encode_shape_and_permutation_invariance(small_model, box_cloud, rng):
    feature = encode(box_cloud, small_model)
    assert feature.shape == (32,)
    shuffled = box_cloud.points[rng.permutation(box_cloud.n)]
    assert np.array_equal(encode(shuffled, small_model), feature)


def test_encode_single_point(small_model):
    assert encode(np.array([[0.1, 0.2, 0.3]]), small_model).shape == (32,)


def test_encode_with_zero_weights_returns_final_bias(toy_model, random_cloud):
    params = ModelParams(zeroed(toy_model.encoder, 0.25), toy_model.decoder, toy_model.config)
    assert_allclose(encode(random_cloud, params), 0.25)


def test_encode_is_not_rotation_invariant(small_model, box_cloud):
    g = se3.exp([0, 0, math.pi / 2, 0, 0, 0])
    assert not np.allclose(encode(box_cloud, small_model), encode(se3.apply(g, box_cloud), small_model))


def test_encode_is_lipschitz_in_each_point(small_model, box_cloud):
    L = math.prod(np.linalg.norm(e.layer.W, 2) for e in small_model.encoder)
    base = encode(box_cloud, small_model)
    direction = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
    changes = []
    for delta in (1e-2, 1e-3, 1e-4, 1e-5):
        points = box_cloud.points.copy()
        points[17] += delta * direction
        change = np.linalg.norm(encode(points, small_model) - base)
        assert change <= L * delta * (1 + 1e-9)
        changes.append(change)
    assert changes[-1] <= changes[0]


def test_encode_counts_passes(toy_model, random_cloud):
    with ENCODER_PASSES.measure() as counted:
        encode(random_cloud, toy_model)
        encode(random_cloud, toy_model)
    assert counted['passes'] == 2


def test_encode_backward_matches_finite_differences(toy_model, random_cloud, rng):
    c = rng.normal(size=toy_model.feature_dim)
    grads = encode_backward(random_cloud, toy_model, c)
    h = 1e-6
    for entry in toy_model.encoder:
        for index in np.ndindex(entry.layer.W.shape):
            values = []
            for delta in (h, -h):
                W = entry.layer.W.copy()
                W[index] += delta
                enc = toy_model.encoder.with_layers({entry.name: DenseLayer(W, entry.layer.b)})
                values.append(encode(random_cloud, ModelParams(enc, toy_model.decoder, toy_model.config)) @ c)
            fd = (values[0] - values[1]) / (2 * h)
            assert fd == pytest.approx(grads[entry.name].dW[index], rel=1e-5, abs=1e-6)


def test_encode_backward_rejects_wrong_length(toy_model, random_cloud):
    with pytest.raises(ShapeMismatch):
        encode_backward(random_cloud, toy_model, np.zeros(3))


def test_decode_shape_and_zero_weights(toy_model):
    out = decode(np.ones(8), toy_model)
    assert out.n == 5
    params = ModelParams(toy_model.encoder, zeroed(toy_model.decoder, -0.5), toy_model.config)
    assert_allclose(decode(np.ones(8), params).points, -0.5)
    with pytest.raises(ShapeMismatch):
        decode(np.ones(7), toy_model)


def test_decode_backward_matches_finite_differences(toy_model, rng):
    feature = rng.normal(size=8)
    C = rng.normal(size=(5, 3))
    dFeature, grads = decode_backward(feature, toy_model, C)
    assert grads.entries[0].name == 'dec_fc1'
    h = 1e-6
    for k in range(8):
        fp, fm = feature.copy(), feature.copy()
        fp[k] += h
        fm[k] -= h
        fd = (np.sum(decode(fp, toy_model).points * C) - np.sum(decode(fm, toy_model).points * C)) / (2 * h)
        assert fd == pytest.approx(dFeature[k], rel=1e-5, abs=1e-6)


def test_save_and_load_model(tmp_path, toy_model, random_cloud):
    path = save_model(toy_model, tmp_path / 'm.fmr', extra={'epoch': 3})
    back = load_model(path)
    assert back.config == toy_model.config
    assert np.array_equal(encode(random_cloud, back), encode(random_cloud, toy_model))
    assert np.array_equal(decode(np.ones(8), back).points, decode(np.ones(8), toy_model).points)


def test_checkpoint_without_model_metadata_is_a_config_error(tmp_path, toy_model):
    path = save_checkpoint(toy_model.encoder, tmp_path / 'bare.fmr')
    with pytest.raises(ConfigError):
        load_model(path)
