"""
Feature Network Training
========================

DESCRIPTION:
Fits the encoder/decoder on synthetic training pairs (P, Q = g P).

MODES:
    unsupervised   Chamfer(decode(encode(X)), X) for X in {P, Q}; ground truth is never read
    semi           the same reconstruction terms plus the point error between the
                   registration estimate for (P, Q) and the true inverse motion

AUGMENTATION:
Every entry of `augmentations` adds Chamfer(decode(encode(Q')), Q), where Q' is
Q degraded by that perturbation: the decoder must recover the clean cloud from
a sparse or noisy copy. Families in `holdout_families` never reach training
or validation; `bench category` scores them as unseen families.

SEMI-SUPERVISED GRADIENT:
Registration runs with constants for all iterates but the last. The last
Gauss-Newton step is unrolled by hand:

    J   = (F(exp(xi e_i) P) - F(P)) / xi            (one column per twist axis)
    r   = F(P) - F(g_prev Q)
    A   = J^T J + lambda I,  dtheta = A^-1 J^T r
    g   = exp(dtheta) g_prev

With u = A^-1 dL/dtheta the loss flows back as
dL/dr = J u and dL/dJ = r u^T - J (dtheta u^T + u dtheta^T), then into
the encoder through every feature evaluation above. dL/dtheta is taken as the
gradient of the point error under a left perturbation of g.

USAGE:
    python run_pipeline.py train data/ --mode semi --epochs 20 --seed 1 --out models/

OUTPUT:
    <out>/model_best.fmr, <out>/model_final.fmr, <out>/train_report.csv
"""

import math
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import cho_factor, cho_solve

from monitoring.performance_monitor import PerformanceMonitor
from pipelines.p0_generate import Dataset, synthesize_dataset
from pipelines.p3_bench import (
    BenchProtocol, Estimator, build_estimators, run_sweep,
)
from utils.errors import AngleNearPi, NonFiniteLoss, SingularNormalEquations
from utils.geometry_utils import se3
from utils.geometry_utils.cloud import PerturbationSpec, PointCloud, apply_perturbation
from utils.network_utils.losses import (
    LossValue, chamfer, chamfer_backward, combined_loss, point_error_gradient,
)
from utils.network_utils.model import (
    ModelConfig, ModelParams, decode, decode_backward, encode, encode_backward, init_model,
)
from utils.network_utils.tinynet import GradSet, OptimizerState, opt_step
from utils.output_utils.OUTPUT_reports import write_csv
from utils.registration_utils.feature_metric import (
    RegistrationConfig, register, solve_normal_equations,
)


REPORT_COLUMNS = ['epoch', 'loss_total', 'loss_cf', 'loss_pe', 'val_chamfer', 'val_rot_err_deg', 'seconds']


# =============================================================================
# CONFIGURATION
# =============================================================================
class TrainConfig(BaseModel):
    """Training run settings; defaults train a desk-scale model."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    mode: Literal['semi', 'unsupervised'] = 'unsupervised'
    epochs: int = Field(10, ge=1)
    lr: float = Field(1e-3, ge=0.0, description='0 leaves the parameters untouched')
    cloud_size: int = Field(512, ge=1, description='Points per training cloud')
    families: Tuple[str, ...] = ('box', 'torus', 'composite')
    count_per_family: int = Field(64, ge=1, description='Clouds per family when no dataset is given')
    rot_max_train_deg: float = Field(45.0, ge=0.0, lt=180.0)
    trans_max_train: float = Field(0.8, ge=0.0)
    seed: int = 0
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    steps_per_epoch: Optional[int] = Field(None, ge=1, description='Defaults to the training split size')
    accumulate_steps: int = Field(1, ge=1, description='Steps whose gradients are averaged per update')
    register_iterations: int = Field(3, ge=1, description='Gauss-Newton budget inside a semi step')
    perturbation_xi: float = Field(0.02, gt=0.0)
    val_pairs: int = Field(8, ge=1, description='Registration pairs for the semi validation metric')
    augmentations: Tuple[PerturbationSpec, ...] = Field(
        (), description='Degraded copies of Q that must reconstruct the clean Q')
    holdout_families: Tuple[str, ...] = Field((), description='Families kept out of training and validation')
    model: ModelConfig = Field(default_factory=ModelConfig)

    @property
    def rot_max_train(self) -> float:
        return math.radians(self.rot_max_train_deg)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_cf: float
    loss_pe: float
    val_chamfer: float
    val_rot_err_deg: float
    seconds: float


@dataclass
class TrainReport:
    """One record per epoch plus the epoch whose parameters were kept."""
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    final_params: Optional[ModelParams] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.records], columns=REPORT_COLUMNS)

    def write_csv(self, path):
        return write_csv(self.to_frame(), path)


# =============================================================================
# DATA
# =============================================================================
def split_dataset(dataset: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded disjoint train/validation split; both parts nonempty."""
    n = len(dataset)
    if n < 2:
        raise ValueError(f'need at least 2 clouds to split into train and validation, got {n}')
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    perm = np.random.default_rng([seed, 0]).permutation(n)
    return dataset.subset(sorted(perm[n_val:].tolist())), dataset.subset(sorted(perm[:n_val].tolist()))


def fit_size(cloud: PointCloud, size: int, rng: np.random.Generator) -> PointCloud:
    if cloud.n <= size:
        return cloud
    return PointCloud(cloud.points[np.sort(rng.choice(cloud.n, size=size, replace=False))])


def sample_training_pair(dataset: Dataset, cfg: TrainConfig,
                         rng: np.random.Generator) -> Tuple[PointCloud, PointCloud, se3.RigidTransform]:
    """(P, Q = g_gt P, g_gt) with g_gt drawn from the training motion ranges."""
    if len(dataset) == 0:
        raise ValueError('training dataset is empty')
    P = fit_size(dataset.clouds[int(rng.integers(len(dataset)))], cfg.cloud_size, rng)
    g_gt = se3.random_transform(cfg.rot_max_train, cfg.trans_max_train, rng)
    return P, se3.apply(g_gt, P), g_gt


# =============================================================================
# LOSS AND GRADIENTS
# =============================================================================
def reconstruction_terms(X: PointCloud, params: ModelParams,
                         reference: Optional[PointCloud] = None) -> Tuple[float, GradSet, GradSet]:
    """Chamfer(decode(encode(X)), reference or X) with encoder and decoder gradients."""
    reference = X if reference is None else reference
    feature = encode(X, params)
    recon = decode(feature, params)
    value = chamfer(recon, reference)
    d_recon, _ = chamfer_backward(recon, reference)
    d_feature, dec_grads = decode_backward(feature, params, d_recon)
    return value, encode_backward(X, params, d_feature), dec_grads


def point_error_terms(P: PointCloud, Q: PointCloud, g_gt: se3.RigidTransform, params: ModelParams,
                      cfg: TrainConfig) -> Optional[Tuple[float, GradSet]]:
    """Point error of the registration estimate and its encoder gradient; None when unsolvable."""
    reg_cfg = RegistrationConfig(max_iterations=max(1, cfg.register_iterations - 1),
                                 perturbation_xi=cfg.perturbation_xi)
    g_prev = se3.RigidTransform.identity()
    if cfg.register_iterations > 1:
        try:
            g_prev = register(P, Q, params, reg_cfg).g_est
        except SingularNormalEquations:
            return None

    xi = cfg.perturbation_xi
    perturbed = [se3.apply(se3.exp(np.eye(6)[i] * xi), P) for i in range(6)]
    moved = se3.apply(g_prev, Q)
    f_p = encode(P, params)
    f_q = encode(moved, params)
    f_i = [encode(c, params) for c in perturbed]
    J = np.stack([(f - f_p) / xi for f in f_i], axis=1)
    r = f_p - f_q

    try:
        dtheta, lam = solve_normal_equations(J, r, 0.0)
        factor = cho_factor(J.T @ J + lam * np.eye(6))
    except (SingularNormalEquations, np.linalg.LinAlgError):
        return None

    g_est = se3.compose(se3.exp(dtheta), g_prev)
    value, grad_theta = point_error_gradient(g_est, se3.inverse(g_gt), P)
    u = cho_solve(factor, grad_theta)
    d_r = J @ u
    d_J = np.outer(r, u) - J @ (np.outer(dtheta, u) + np.outer(u, dtheta))

    d_fp = d_r - d_J.sum(axis=1) / xi
    grads = encode_backward(P, params, d_fp) + encode_backward(moved, params, -d_r)
    for i, cloud in enumerate(perturbed):
        grads = grads + encode_backward(cloud, params, d_J[:, i] / xi)
    return value, grads


def step_loss(P: PointCloud, Q: PointCloud, g_gt: Optional[se3.RigidTransform], params: ModelParams,
              cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> Tuple[LossValue, GradSet, GradSet]:
    """Loss of one training pair with (encoder, decoder) gradients; rng drives the augmentations."""
    cf_terms = []
    enc = GradSet.zeros_like(params.encoder)
    dec = GradSet.zeros_like(params.decoder)
    for X in (P, Q):
        value, e, d = reconstruction_terms(X, params)
        cf_terms.append(value)
        enc, dec = enc + e, dec + d
    if cfg.augmentations and rng is None:
        raise ValueError('augmented training needs a random generator')
    for spec in cfg.augmentations:
        value, e, d = reconstruction_terms(apply_perturbation(Q, spec, rng), params, reference=Q)
        cf_terms.append(value)
        enc, dec = enc + e, dec + d

    pe_terms = None
    if cfg.mode == 'semi':
        pe_terms = []
        pe = point_error_terms(P, Q, g_gt, params, cfg)
        if pe is None:
            print("  WARNING: normal equations singular, point-error term skipped for this step")
        else:
            pe_terms.append(pe[0])
            enc = enc + pe[1]
    return combined_loss(cfg.mode, cf_terms, pe_terms), enc, dec


# =============================================================================
# VALIDATION
# =============================================================================
def validation_chamfer(params: ModelParams, val: Dataset, cfg: TrainConfig) -> float:
    values = []
    for i, cloud in enumerate(val.clouds):
        X = fit_size(cloud, cfg.cloud_size, np.random.default_rng([cfg.seed, 2, i]))
        values.append(chamfer(decode(encode(X, params), params), X))
    return float(np.mean(values))


def validation_rotation_error(params: ModelParams, val: Dataset, cfg: TrainConfig) -> float:
    """Mean rotation error (degrees) of full registrations on seeded validation pairs."""
    reg_cfg = RegistrationConfig(perturbation_xi=cfg.perturbation_xi)
    errors = []
    for j in range(cfg.val_pairs):
        P, Q, g_gt = sample_training_pair(val, cfg, np.random.default_rng([cfg.seed, 3, j]))
        try:
            g_est = register(P, Q, params, reg_cfg).g_est
            errors.append(math.degrees(se3.angular_error(g_est, se3.inverse(g_gt))))
        except (SingularNormalEquations, AngleNearPi):
            errors.append(180.0)
    return float(np.mean(errors))


# =============================================================================
# TRAINING LOOP
# =============================================================================
def train(cfg: TrainConfig, dataset: Optional[Dataset] = None,
          monitor: Optional[PerformanceMonitor] = None) -> Tuple[ModelParams, TrainReport]:
    """Best-validation parameters and the per-epoch report (final parameters ride on the report)."""
    if dataset is None:
        dataset = synthesize_dataset(cfg.families, cfg.count_per_family, cfg.cloud_size, cfg.seed)
    dataset = dataset.without_families(cfg.holdout_families)
    train_set, val_set = split_dataset(dataset, cfg.val_fraction, cfg.seed)
    params = init_model(cfg.model, cfg.seed)
    enc_state = OptimizerState.zeros_like(params.encoder)
    dec_state = OptimizerState.zeros_like(params.decoder)
    steps_per_epoch = cfg.steps_per_epoch or len(train_set)

    print(f"\n{'=' * 60}")
    print(f"TRAINING ({cfg.mode}): {len(train_set)} train / {len(val_set)} val clouds, "
          f"{cfg.epochs} epochs x {steps_per_epoch} steps, K={cfg.model.feature_dim}")
    print(f"{'=' * 60}")

    report = TrainReport()
    best_params, best_score = params, math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        aug_rng = np.random.default_rng([cfg.seed, 4, epoch])
        totals = np.zeros(3)
        enc_acc = GradSet.zeros_like(params.encoder)
        dec_acc = GradSet.zeros_like(params.decoder)
        pending = 0
        for _ in range(steps_per_epoch):
            P, Q, g_gt = sample_training_pair(train_set, cfg, rng)
            loss, enc, dec = step_loss(P, Q, g_gt if cfg.mode == 'semi' else None, params, cfg, aug_rng)
            if not math.isfinite(loss.total) or not (enc.is_finite() and dec.is_finite()):
                raise NonFiniteLoss(step, loss.total)
            totals += (loss.total, loss.chamfer, loss.point_error)
            enc_acc, dec_acc = enc_acc + enc, dec_acc + dec
            pending += 1
            step += 1
            if pending == cfg.accumulate_steps:
                params, enc_state, dec_state = _apply_update(params, enc_acc, dec_acc, pending,
                                                             enc_state, dec_state, cfg.lr)
                enc_acc = GradSet.zeros_like(params.encoder)
                dec_acc = GradSet.zeros_like(params.decoder)
                pending = 0
        if pending:
            params, enc_state, dec_state = _apply_update(params, enc_acc, dec_acc, pending,
                                                         enc_state, dec_state, cfg.lr)

        val_cf = validation_chamfer(params, val_set, cfg)
        val_rot = validation_rotation_error(params, val_set, cfg) if cfg.mode == 'semi' else math.nan
        means = totals / steps_per_epoch
        record = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]),
                             val_cf, val_rot, time.perf_counter() - start)
        report.records.append(record)

        score = val_rot if cfg.mode == 'semi' else val_cf
        if score < best_score:
            best_params, best_score, report.best_epoch = params, score, epoch

        print(f"  INFO: epoch {epoch}/{cfg.epochs} loss={record.loss_total:.6g} "
              f"(cf={record.loss_cf:.6g}, pe={record.loss_pe:.6g}) val_chamfer={val_cf:.6g}"
              + (f" val_rot_err={val_rot:.3f}deg" if cfg.mode == 'semi' else '')
              + f" [{record.seconds:.1f}s]")
        if monitor is not None:
            monitor.log_record(stage='train', name=f'epoch_{epoch}', seconds=record.seconds, success=True,
                               metrics={k: v for k, v in vars(record).items() if k not in ('epoch', 'seconds')},
                               parameters={'mode': cfg.mode, 'seed': cfg.seed, 'lr': cfg.lr})

    if report.best_epoch == 0:
        # every validation score was NaN/inf; keep the last epoch
        best_params, report.best_epoch = params, cfg.epochs
    report.final_params = params
    print(f"  INFO: best epoch {report.best_epoch} (validation {'rotation error' if cfg.mode == 'semi' else 'Chamfer'})")
    return best_params, report


def _apply_update(params, enc_acc, dec_acc, pending, enc_state, dec_state, lr):
    if lr == 0:
        return params, enc_state, dec_state
    scale = 1.0 / pending
    encoder, enc_state = opt_step(params.encoder, enc_acc.scale(scale), enc_state, lr)
    decoder, dec_state = opt_step(params.decoder, dec_acc.scale(scale), dec_state, lr)
    return ModelParams(encoder, decoder, params.config), enc_state, dec_state


# =============================================================================
# EVALUATION
# =============================================================================
def evaluate(params: Optional[ModelParams], dataset: Dataset, protocol: BenchProtocol,
             estimator: Optional[Estimator] = None,
             reg_cfg: Optional[RegistrationConfig] = None) -> pd.DataFrame:
    """Error statistics per protocol angle bin for one estimator (feature-metric registration by default)."""
    if estimator is None:
        estimator = build_estimators(params, ('fmr',), reg_cfg)['fmr']
    return run_sweep({'fmr': estimator}, dataset, protocol, label='evaluate')
