"""
Minimal neural-network kernels with hand-derived backpropagation
================================================================

DESCRIPTION:
Dense layers, ReLU / LeakyReLU, per-channel max-pool over points, a
moment-adaptive first-order optimizer and a checksummed checkpoint format.
One cloud per forward pass, float64 everywhere, no autodiff graph.

CHECKPOINT LAYOUT:
    b"FMRCKPT" + version byte (b"1")
    uint32 LE header length + UTF-8 JSON header (layers, widths, activations, metadata)
    per layer in declared order: W (out x in) then b, float64 LE row-major
    uint32 LE CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from utils.errors import BadMagic, ChecksumMismatch, IoError, ShapeMismatch, VersionMismatch
from utils.output_utils.OUTPUT_reports import atomic_write_bytes


CHECKPOINT_MAGIC = b'FMRCKPT'
CHECKPOINT_VERSION = 1


# =============================================================================
# ACTIVATIONS
# =============================================================================
@dataclass(frozen=True)
class Activation:
    """Elementwise activation tag: 'relu', 'leaky_relu' (with slope) or 'none'."""
    kind: str = 'none'
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in ('relu', 'leaky_relu', 'none'):
            raise ValueError(f'unknown activation {self.kind!r}')

    def forward(self, x: np.ndarray) -> np.ndarray:
        return activation_forward(self, x)

    def backward(self, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        return activation_backward(self, x, dy)


RELU = Activation('relu')
IDENTITY = Activation('none')


def leaky_relu(slope: float = 0.01) -> Activation:
    return Activation('leaky_relu', float(slope))


def activation_forward(act: Activation, x: np.ndarray) -> np.ndarray:
    if act.kind == 'relu':
        return np.where(x > 0, x, 0.0)
    if act.kind == 'leaky_relu':
        return np.where(x > 0, x, act.slope * x)
    return x


def activation_backward(act: Activation, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation; at x == 0 the positive branch applies."""
    if act.kind == 'relu':
        return np.where(x >= 0, dy, 0.0)
    if act.kind == 'leaky_relu':
        return np.where(x >= 0, dy, act.slope * dy)
    return dy


# =============================================================================
# DENSE LAYERS
# =============================================================================
@dataclass(frozen=True)
class DenseLayer:
    """y = x W^T + b with W of shape (out, in)."""
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeMismatch(f'DenseLayer needs W (out, in) and b (out,), got {W.shape} and {b.shape}')
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, 'W', W)
        object.__setattr__(self, 'b', b)

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[0]


def init_dense(in_features: int, out_features: int, rng: np.random.Generator) -> DenseLayer:
    """Uniform in [-s, s], s = sqrt(1 / fan_in); zero bias."""
    s = np.sqrt(1.0 / in_features)
    return DenseLayer(rng.uniform(-s, s, size=(out_features, in_features)), np.zeros(out_features))


def _check_input(layer: DenseLayer, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layer.in_features:
        raise ShapeMismatch(f'layer expects (n, {layer.in_features}) input, got {X.shape}')
    return X


def dense_forward(layer: DenseLayer, X: np.ndarray) -> np.ndarray:
    X = _check_input(layer, X)
    return X @ layer.W.T + layer.b


def dense_backward(layer: DenseLayer, X: np.ndarray, dY: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dX, dW, db) for upstream gradient dY of shape (n, out)."""
    X = _check_input(layer, X)
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != (X.shape[0], layer.out_features):
        raise ShapeMismatch(f'upstream gradient must be {(X.shape[0], layer.out_features)}, got {dY.shape}')
    return dY @ layer.W, dY.T @ X, dY.sum(axis=0)


# =============================================================================
# MAX-POOL OVER POINTS
# =============================================================================
def maxpool_points_forward(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel max over rows and the winning row per channel (lowest index on ties)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeMismatch(f'max-pool needs an (n_points >= 1, C) array, got {X.shape}')
    idx = np.argmax(X, axis=0)
    return X[idx, np.arange(X.shape[1])], idx


def maxpool_points_backward(indices: np.ndarray, dY: np.ndarray, n_points: int) -> np.ndarray:
    """Route each channel's gradient to its argmax row."""
    dY = np.asarray(dY, dtype=np.float64).reshape(-1)
    if dY.shape[0] != len(indices):
        raise ShapeMismatch(f'pooled gradient has {dY.shape[0]} channels, indices have {len(indices)}')
    dX = np.zeros((n_points, dY.shape[0]))
    dX[indices, np.arange(dY.shape[0])] = dY
    return dX


# =============================================================================
# PARAMETER AND GRADIENT SETS
# =============================================================================
@dataclass(frozen=True)
class NamedLayer:
    name: str
    layer: DenseLayer
    activation: Activation = IDENTITY


@dataclass(frozen=True)
class ParamSet:
    """Ordered named layers; the order is the forward order and the serialization order."""
    entries: Tuple[NamedLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, 'entries', tuple(self.entries))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f'layer names must be unique, got {names}')

    def __iter__(self) -> Iterator[NamedLayer]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> NamedLayer:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def with_layers(self, layers: Mapping[str, DenseLayer]) -> 'ParamSet':
        return ParamSet(tuple(NamedLayer(e.name, layers.get(e.name, e.layer), e.activation)
                              for e in self.entries))

    def __add__(self, other: 'ParamSet') -> 'ParamSet':
        return ParamSet(self.entries + other.entries)


@dataclass(frozen=True)
class LayerGrad:
    name: str
    dW: np.ndarray
    db: np.ndarray


@dataclass(frozen=True)
class GradSet:
    """d loss / d parameter, shape-congruent with a ParamSet."""
    entries: Tuple[LayerGrad, ...]

    def __post_init__(self):
        object.__setattr__(self, 'entries', tuple(self.entries))

    @classmethod
    def zeros_like(cls, params: ParamSet) -> 'GradSet':
        return cls(tuple(LayerGrad(e.name, np.zeros_like(e.layer.W), np.zeros_like(e.layer.b))
                         for e in params))

    def __iter__(self) -> Iterator[LayerGrad]:
        return iter(self.entries)

    def __getitem__(self, name: str) -> LayerGrad:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def __add__(self, other: 'GradSet') -> 'GradSet':
        if [g.name for g in self] != [g.name for g in other]:
            raise ShapeMismatch('cannot add gradient sets of different layers')
        return GradSet(tuple(LayerGrad(a.name, a.dW + b.dW, a.db + b.db) for a, b in zip(self, other)))

    def scale(self, c: float) -> 'GradSet':
        return GradSet(tuple(LayerGrad(g.name, g.dW * c, g.db * c) for g in self))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g.dW)) and np.all(np.isfinite(g.db)) for g in self)

    def check_congruent(self, params: ParamSet) -> None:
        if [g.name for g in self] != params.names:
            raise ShapeMismatch(f'gradient layers {[g.name for g in self]} do not match {params.names}')
        for g, p in zip(self, params):
            if g.dW.shape != p.layer.W.shape or g.db.shape != p.layer.b.shape:
                raise ShapeMismatch(f'gradient for {g.name} has shapes {g.dW.shape}/{g.db.shape}, '
                                    f'parameters {p.layer.W.shape}/{p.layer.b.shape}')


# =============================================================================
# STACK FORWARD / BACKWARD
# =============================================================================
@dataclass
class StackCache:
    """Inputs and pre-activations of every layer of one forward pass."""
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def stack_forward(params: ParamSet, X: np.ndarray) -> Tuple[np.ndarray, StackCache]:
    cache = StackCache()
    h = X
    for entry in params:
        cache.inputs.append(h)
        z = dense_forward(entry.layer, h)
        cache.pre_activations.append(z)
        h = activation_forward(entry.activation, z)
    return h, cache


def stack_backward(params: ParamSet, cache: StackCache, dOut: np.ndarray) -> Tuple[np.ndarray, GradSet]:
    grads = []
    d = dOut
    for entry, X, z in zip(reversed(params.entries), reversed(cache.inputs), reversed(cache.pre_activations)):
        dz = activation_backward(entry.activation, z, d)
        d, dW, db = dense_backward(entry.layer, X, dz)
        grads.append(LayerGrad(entry.name, dW, db))
    return d, GradSet(tuple(reversed(grads)))


# =============================================================================
# OPTIMIZER
# =============================================================================
@dataclass(frozen=True)
class OptimizerState:
    """First/second moment accumulators per layer plus the step count."""
    m: Dict[str, Tuple[np.ndarray, np.ndarray]]
    v: Dict[str, Tuple[np.ndarray, np.ndarray]]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> 'OptimizerState':
        zeros = {e.name: (np.zeros_like(e.layer.W), np.zeros_like(e.layer.b)) for e in params}
        return cls(m=dict(zeros), v={k: (a.copy(), b.copy()) for k, (a, b) in zeros.items()},
                   step=0, beta1=beta1, beta2=beta2, eps=eps)


def opt_step(params: ParamSet, grads: GradSet, state: OptimizerState,
             lr: float) -> Tuple[ParamSet, OptimizerState]:
    """One bias-corrected moment-adaptive update; returns new params and state."""
    if lr <= 0:
        raise ValueError(f'learning rate must be > 0, got {lr}')
    grads.check_congruent(params)
    if set(state.m) != set(params.names):
        raise ShapeMismatch(f'optimizer state layers {sorted(state.m)} do not match {params.names}')
    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_layers, new_m, new_v = {}, {}, {}
    for entry, g in zip(params, grads):
        updated = []
        moments_m, moments_v = [], []
        for p, dp, m, v in zip((entry.layer.W, entry.layer.b), (g.dW, g.db),
                               state.m[entry.name], state.v[entry.name]):
            m = b1 * m + (1.0 - b1) * dp
            v = b2 * v + (1.0 - b2) * dp * dp
            updated.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
            moments_m.append(m)
            moments_v.append(v)
        new_layers[entry.name] = DenseLayer(*updated)
        new_m[entry.name] = tuple(moments_m)
        new_v[entry.name] = tuple(moments_v)
    new_state = OptimizerState(m=new_m, v=new_v, step=step, beta1=b1, beta2=b2, eps=eps)
    return params.with_layers(new_layers), new_state


# =============================================================================
# CHECKPOINTS
# =============================================================================
def checkpoint_bytes(params: ParamSet, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    header = {
        'format_version': CHECKPOINT_VERSION,
        'layers': [{'name': e.name, 'in': e.layer.in_features, 'out': e.layer.out_features,
                    'activation': e.activation.kind, 'slope': e.activation.slope} for e in params],
        'metadata': metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION).encode('ascii'),
             struct.pack('<I', len(header_bytes)), header_bytes]
    for e in params:
        parts.append(np.ascontiguousarray(e.layer.W, dtype='<f8').tobytes())
        parts.append(np.ascontiguousarray(e.layer.b, dtype='<f8').tobytes())
    payload = b''.join(parts)
    return payload + struct.pack('<I', zlib.crc32(payload) & 0xFFFFFFFF)


def save_checkpoint(params: ParamSet, path, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write params (and architecture metadata) atomically."""
    atomic_write_bytes(path, checkpoint_bytes(params, metadata))
    return Path(path)


def parse_checkpoint(data: bytes) -> Tuple[ParamSet, Dict[str, Any]]:
    """Validate magic, version and CRC before touching the payload."""
    if len(data) < len(CHECKPOINT_MAGIC) + 1 or data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagic('not a checkpoint file (bad magic)')
    version_byte = data[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 1]
    if version_byte != str(CHECKPOINT_VERSION).encode('ascii'):
        raise VersionMismatch(f'checkpoint format version {version_byte!r}, expected {CHECKPOINT_VERSION}')
    if len(data) < 8 + 4 + 4:
        raise ChecksumMismatch('checkpoint truncated')
    payload, stored = data[:-4], struct.unpack('<I', data[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise ChecksumMismatch('checkpoint CRC mismatch (corrupt or truncated file)')

    (header_len,) = struct.unpack('<I', payload[8:12])
    header = json.loads(payload[12:12 + header_len].decode('utf-8'))
    if header.get('format_version') != CHECKPOINT_VERSION:
        raise VersionMismatch(f'checkpoint header version {header.get("format_version")}, '
                              f'expected {CHECKPOINT_VERSION}')
    offset = 12 + header_len
    entries = []
    for layer_info in header['layers']:
        n_w, n_b = layer_info['out'] * layer_info['in'], layer_info['out']
        end = offset + 8 * (n_w + n_b)
        if end > len(payload):
            raise ChecksumMismatch(f'checkpoint payload too short for layer {layer_info["name"]}')
        W = np.frombuffer(payload[offset:offset + 8 * n_w], dtype='<f8').reshape(layer_info['out'], layer_info['in'])
        b = np.frombuffer(payload[offset + 8 * n_w:end], dtype='<f8')
        act = Activation(layer_info['activation'], layer_info['slope'])
        entries.append(NamedLayer(layer_info['name'], DenseLayer(W.astype(np.float64), b.astype(np.float64)), act))
        offset = end
    if offset != len(payload):
        raise ChecksumMismatch('checkpoint has trailing bytes after the declared layers')
    return ParamSet(tuple(entries)), header['metadata']


def read_checkpoint(path) -> Tuple[ParamSet, Dict[str, Any]]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f'Cannot read checkpoint {path}: {e}') from e
    return parse_checkpoint(data)


def load_checkpoint(path) -> ParamSet:
    return read_checkpoint(path)[0]
