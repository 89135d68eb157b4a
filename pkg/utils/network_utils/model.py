"""
Encoder / decoder feature network
=================================

DESCRIPTION:
The encoder maps a point cloud to a K-dimensional global feature with a
per-point shared dense stack followed by a per-channel max-pool. No input or
feature alignment sub-networks are used, so the feature changes when the cloud
is rotated; the registration residual relies on that.
The decoder maps a feature back to M points through four dense layers.

ARCHITECTURE (defaults):
    encoder  3 -> 64 -> 128 -> K   ReLU, ReLU, linear, then max-pool over points
    decoder  K -> 512 -> 256 -> 128 -> 3M   LeakyReLU(0.01) on all but the last layer
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from monitoring.performance_monitor import ForwardPassCounter
from utils.errors import ConfigError, ShapeMismatch
from utils.geometry_utils.cloud import PointCloud
from utils.network_utils.tinynet import (
    IDENTITY, RELU, GradSet, NamedLayer, ParamSet, init_dense, leaky_relu,
    maxpool_points_backward, maxpool_points_forward, read_checkpoint, save_checkpoint,
    stack_backward, stack_forward,
)


# Every encoder forward pass increments this counter.
ENCODER_PASSES = ForwardPassCounter()

CloudLike = Union[PointCloud, np.ndarray]


class ModelConfig(BaseModel):
    """Architecture hyperparameters; stored in every model checkpoint."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    feature_dim: int = Field(1024, ge=1, description='Global feature size K')
    encoder_widths: Tuple[int, ...] = Field((64, 128), description='Hidden widths before the K-wide layer')
    decoder_widths: Tuple[int, ...] = Field((512, 256, 128), description='Hidden widths of the decoder')
    output_points: int = Field(512, ge=1, description='Decoder output point count M')
    leaky_slope: float = Field(0.01, ge=0.0, lt=1.0)


@dataclass(frozen=True)
class ModelParams:
    encoder: ParamSet
    decoder: ParamSet
    config: ModelConfig

    def __post_init__(self):
        widths = [3, *self.config.encoder_widths, self.config.feature_dim]
        _check_widths(self.encoder, widths, 'encoder')
        widths = [self.config.feature_dim, *self.config.decoder_widths, 3 * self.config.output_points]
        _check_widths(self.decoder, widths, 'decoder')

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def output_points(self) -> int:
        return self.config.output_points


def _check_widths(params: ParamSet, widths, label: str) -> None:
    if len(params) != len(widths) - 1:
        raise ShapeMismatch(f'{label} has {len(params)} layers, expected {len(widths) - 1}')
    for entry, n_in, n_out in zip(params, widths[:-1], widths[1:]):
        if (entry.layer.in_features, entry.layer.out_features) != (n_in, n_out):
            raise ShapeMismatch(f'{label} layer {entry.name} is {entry.layer.in_features}->'
                                f'{entry.layer.out_features}, expected {n_in}->{n_out}')


def init_model(config: Optional[ModelConfig] = None, seed: int = 0) -> ModelParams:
    """Seeded fan-in uniform initialization of both networks."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)

    widths = [3, *config.encoder_widths, config.feature_dim]
    encoder = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:]), 1):
        act = RELU if i < len(widths) - 1 else IDENTITY
        encoder.append(NamedLayer(f'enc_fc{i}', init_dense(n_in, n_out, rng), act))

    widths = [config.feature_dim, *config.decoder_widths, 3 * config.output_points]
    decoder = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:]), 1):
        act = leaky_relu(config.leaky_slope) if i < len(widths) - 1 else IDENTITY
        decoder.append(NamedLayer(f'dec_fc{i}', init_dense(n_in, n_out, rng), act))

    return ModelParams(ParamSet(tuple(encoder)), ParamSet(tuple(decoder)), config)


def _points(cloud: CloudLike) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


# =============================================================================
# ENCODER
# =============================================================================
def encode(cloud: CloudLike, params: ModelParams) -> np.ndarray:
    """Global feature F(P): max over points of the shared per-point stack."""
    ENCODER_PASSES.increment()
    per_point, _ = stack_forward(params.encoder, _points(cloud))
    return maxpool_points_forward(per_point)[0]


def encode_backward(cloud: CloudLike, params: ModelParams, dFeature: np.ndarray) -> GradSet:
    """Encoder parameter gradients for an upstream gradient on the pooled feature."""
    dFeature = np.asarray(dFeature, dtype=np.float64).reshape(-1)
    if dFeature.shape[0] != params.feature_dim:
        raise ShapeMismatch(f'feature gradient has length {dFeature.shape[0]}, expected {params.feature_dim}')
    points = _points(cloud)
    per_point, cache = stack_forward(params.encoder, points)
    _, idx = maxpool_points_forward(per_point)
    dPerPoint = maxpool_points_backward(idx, dFeature, per_point.shape[0])
    return stack_backward(params.encoder, cache, dPerPoint)[1]


# =============================================================================
# DECODER
# =============================================================================
def decode(feature: np.ndarray, params: ModelParams) -> PointCloud:
    feature = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    if feature.shape[1] != params.feature_dim:
        raise ShapeMismatch(f'feature has length {feature.shape[1]}, expected {params.feature_dim}')
    out, _ = stack_forward(params.decoder, feature)
    return PointCloud(out.reshape(params.output_points, 3))


def decode_backward(feature: np.ndarray, params: ModelParams,
                    dPoints: np.ndarray) -> Tuple[np.ndarray, GradSet]:
    """(d loss / d feature, decoder GradSet) for an (M, 3) gradient on the decoded points."""
    feature = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    dPoints = np.asarray(dPoints, dtype=np.float64)
    if dPoints.shape != (params.output_points, 3):
        raise ShapeMismatch(f'point gradient must be {(params.output_points, 3)}, got {dPoints.shape}')
    _, cache = stack_forward(params.decoder, feature)
    dFeature, grads = stack_backward(params.decoder, cache, dPoints.reshape(1, -1))
    return dFeature.reshape(-1), grads


# =============================================================================
# CHECKPOINTS
# =============================================================================
def save_model(params: ModelParams, path, extra: Optional[dict] = None) -> Path:
    """Encoder then decoder layers in one checkpoint, architecture in the header."""
    metadata = {
        'architecture': params.config.model_dump(mode='json'),
        'K': params.feature_dim,
        'encoder_layers': params.encoder.names,
        'decoder_layers': params.decoder.names,
    }
    if extra:
        metadata['extra'] = extra
    return save_checkpoint(params.encoder + params.decoder, path, metadata)


def load_model(path) -> ModelParams:
    layers, metadata = read_checkpoint(path)
    try:
        config = ModelConfig(**metadata['architecture'])
        encoder = ParamSet(tuple(layers[name] for name in metadata['encoder_layers']))
        decoder = ParamSet(tuple(layers[name] for name in metadata['decoder_layers']))
    except (KeyError, TypeError, ValidationError) as e:
        raise ConfigError(f'{path} is a checkpoint without usable model metadata: {e!r}') from None
    return ModelParams(encoder, decoder, config)
