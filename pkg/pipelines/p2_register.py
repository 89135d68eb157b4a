"""
One-shot Registration of Two Cloud Files
========================================

DESCRIPTION:
Loads a source and a target cloud, normalizes both with one shared
scale/offset, registers the source onto the target and reports the motion in
the original units of the files.

USAGE:
    python run_pipeline.py register --model models/model_best.fmr --source q.xyz --target p.xyz
    python run_pipeline.py register --method icp --source q.ply --target p.ply --out aligned.xyz

OUTPUT (stdout):
    three rows of the 3x4 [R|t] matrix, 9 significant digits
    r_est=<final error>
    iterations=<iterations run>
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from utils.geometry_utils import se3
from utils.geometry_utils.cloud import PointCloud, RigidScaleRecord, normalize_jointly
from utils.input_utils.INPUT_cloud_files import load, save
from utils.network_utils.model import load_model
from utils.registration_utils.feature_metric import RegistrationConfig, RegistrationResult, register
from utils.registration_utils.icp import IcpConfig, icp_register


@dataclass(frozen=True)
class FileRegistration:
    g_est: se3.RigidTransform         # in the files' original units
    result: RegistrationResult        # in normalized units
    record: RigidScaleRecord


def denormalize_transform(g: se3.RigidTransform, record: RigidScaleRecord) -> se3.RigidTransform:
    """Motion between normalized clouds expressed between the original clouds."""
    t = g.t / record.scale + record.offset - g.R @ record.offset
    return se3.RigidTransform(g.R, t)


def register_clouds(source: PointCloud, target: PointCloud, method: str = 'fmr', model_path=None,
                    reg_cfg: Optional[RegistrationConfig] = None,
                    icp_cfg: Optional[IcpConfig] = None) -> FileRegistration:
    (P, Q), record = normalize_jointly(target, source)
    if method == 'icp':
        result = icp_register(P, Q, icp_cfg)
    elif method == 'fmr':
        if model_path is None:
            raise ValueError('method fmr needs a model checkpoint')
        result = register(P, Q, load_model(model_path), reg_cfg)
    else:
        raise ValueError(f"unknown method {method!r}; expected 'fmr' or 'icp'")
    return FileRegistration(denormalize_transform(result.g_est, record), result, record)


def format_report(reg: FileRegistration) -> List[str]:
    lines = [' '.join(f'{v:.9g}' for v in row) for row in reg.g_est.as_3x4()]
    lines.append(f'r_est={reg.result.r_est:.9g}')
    lines.append(f'iterations={reg.result.iterations_run}')
    return lines


def run_register(source_path, target_path, method: str = 'fmr', model_path=None,
                 reg_cfg: Optional[RegistrationConfig] = None, icp_cfg: Optional[IcpConfig] = None,
                 out_path=None) -> FileRegistration:
    """Register two files, print the report, optionally write g_est applied to the source."""
    source = load(source_path)
    target = load(target_path)
    reg = register_clouds(source, target, method, model_path, reg_cfg, icp_cfg)
    for line in format_report(reg):
        print(line)
    if out_path is not None:
        save(se3.apply(reg.g_est, source), Path(out_path))
    return reg
