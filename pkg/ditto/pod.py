"""
Proper orthogonal decomposition and the reduced-coefficient pipeline:
fit a basis on training snapshots, train a 1-D model on modal coefficient
series with temporal bundling, roll out past the training horizon, lift
back to fields and score there.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import torch

from ditto.datagen import split_chronological
from ditto.errors import ConfigError
from ditto.schema import (
    SCHEMA_VERSION, BundlingConfig, DatasetBundle, EvalReport, ModelConfig, OptimizerConfig,
    RolloutConfig, TrainingSchedule, Trajectory, _rule,
)

logger = logging.getLogger(__name__)

DEFAULT_MODES = 5
CHRONOLOGICAL_RATIOS = (0.3, 0.2, 0.5)


@dataclass
class PodBasis:
    """Mean field plus r orthonormal spatial modes (rows of ``modes``).

    Energies are squared singular values of the mean-centered snapshot
    matrix; ``total_energy`` counts every mode, retained or not.
    """
    mean: np.ndarray            # (S,)
    modes: np.ndarray           # (r, S)
    eigenvalues: np.ndarray     # (r,), nonincreasing
    total_energy: float
    spatial_shape: Tuple[int, ...]

    @property
    def r(self) -> int:
        return self.modes.shape[0]

    @property
    def size(self) -> int:
        return self.modes.shape[1]

    def print_cli(self) -> None:
        """Print the PodBasis in an easy-to-read CLI format."""
        _rule(f"POD BASIS: {self.r} modes")
        print(f"  Field shape: {' x '.join(str(n) for n in self.spatial_shape)}")
        for i, fraction in enumerate(energy_fraction(self), start=1):
            print(f"  r={i:<3} energy {fraction:.6f}")
        print(f"{'='*60}\n")


def compute_pod(snapshots: np.ndarray, r: int = DEFAULT_MODES) -> PodBasis:
    """Thin SVD of the mean-centered (time x space) matrix, top-r right singular vectors kept.

    An r above the numerical rank is reduced to the rank with a warning.
    """
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim < 2 or snapshots.shape[0] < 2:
        raise ConfigError(f"need at least two snapshots shaped (time, *space), got {snapshots.shape}")
    if r < 1:
        raise ConfigError(f"r must be >= 1, got {r}")
    spatial_shape = tuple(snapshots.shape[1:])
    X = snapshots.reshape(snapshots.shape[0], -1)
    mean = X.mean(axis=0)
    _, s, vt = scipy.linalg.svd(X - mean, full_matrices=False)
    tol = max(X.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    if rank == 0:
        raise ConfigError("snapshots are constant in time; POD has no modes")
    if r > rank:
        logger.warning("requested r=%d exceeds the snapshot rank %d; keeping %d modes", r, rank, rank)
        r = rank
    modes = vt[:r]
    # sign convention: largest-magnitude entry of every mode is positive
    signs = np.sign(modes[np.arange(r), np.argmax(np.abs(modes), axis=1)])
    modes = modes * signs[:, None]
    energies = s ** 2
    return PodBasis(mean=mean, modes=modes, eigenvalues=energies[:r], total_energy=float(energies.sum()),
                    spatial_shape=spatial_shape)


def _flat(basis: PodBasis, values: np.ndarray) -> Tuple[np.ndarray, bool]:
    values = np.asarray(values, dtype=np.float64)
    if values.shape in (basis.spatial_shape, (basis.size,)):
        return values.reshape(1, -1), False
    if values.shape[1:] in (basis.spatial_shape, (basis.size,)):
        return values.reshape(values.shape[0], -1), True
    raise ConfigError(f"field shape {values.shape} does not match basis field shape {basis.spatial_shape}")


def project(basis: PodBasis, values: np.ndarray) -> np.ndarray:
    """Modal coefficients of one field (-> (r,)) or a batch (-> (n, r))."""
    flat, batched = _flat(basis, values)
    coeffs = (flat - basis.mean) @ basis.modes.T
    return coeffs if batched else coeffs[0]


def lift(basis: PodBasis, coefficients: np.ndarray) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape[-1] != basis.r or coefficients.ndim > 2:
        raise ConfigError(f"coefficients of shape {coefficients.shape} do not match r={basis.r}")
    fields = basis.mean + coefficients @ basis.modes
    return fields.reshape(coefficients.shape[:-1] + basis.spatial_shape)


def energy_fraction(basis: PodBasis, r: Optional[int] = None) -> np.ndarray:
    """Cumulative captured energy for 1..r modes."""
    r = basis.r if r is None else r
    if not 1 <= r <= basis.r:
        raise ConfigError(f"r must lie in 1..{basis.r}, got {r}")
    return np.cumsum(basis.eigenvalues[:r]) / basis.total_energy


# ============================================================================
# BASIS CONTAINER
# ============================================================================

def save_basis(basis: PodBasis, directory: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    from ditto.storage import MANIFEST, dumps_json, staged_directory, write_payload

    with staged_directory(directory) as stage:
        manifest = {
            "container": "pod_basis",
            "schema_version": SCHEMA_VERSION,
            "r": basis.r,
            "spatial_shape": list(basis.spatial_shape),
            "eigenvalues": basis.eigenvalues.tolist(),
            "total_energy": basis.total_energy,
            "mean": write_payload(stage, "mean.bin", basis.mean, "<f4"),
            "modes": write_payload(stage, "modes.bin", basis.modes, "<f4"),
            "extra": extra or {},
        }
        (stage / MANIFEST).write_text(dumps_json(manifest), encoding="utf-8")
    logger.info("saved POD basis %s (r=%d)", directory, basis.r)
    return Path(directory)


def load_basis(directory: Union[str, Path]) -> PodBasis:
    from ditto.storage import read_manifest, read_payload

    directory = Path(directory)
    manifest = read_manifest(directory, "pod_basis")
    return PodBasis(
        mean=read_payload(directory, manifest["mean"]).astype(np.float64),
        modes=read_payload(directory, manifest["modes"]).astype(np.float64),
        eigenvalues=np.asarray(manifest["eigenvalues"], dtype=np.float64),
        total_energy=float(manifest["total_energy"]),
        spatial_shape=tuple(manifest["spatial_shape"]),
    )


# ============================================================================
# PIPELINE
# ============================================================================

@dataclass
class PodResult:
    basis: PodBasis
    model: torch.nn.Module
    coefficient_scale: np.ndarray
    report: EvalReport
    predictions: List[np.ndarray] = field(default_factory=list)
    errors: List[np.ndarray] = field(default_factory=list)              # per test series, per step
    projection_errors: List[np.ndarray] = field(default_factory=list)   # r-mode floor, same layout
    sub_trajectories: int = 0

    def print_cli(self) -> None:
        """Print the PodResult in an easy-to-read CLI format."""
        _rule("POD PIPELINE")
        print(f"  Modes:             {self.basis.r}")
        print(f"  Energy captured:   {energy_fraction(self.basis)[-1]:.6f}")
        print(f"  Sub-trajectories:  {self.sub_trajectories}")
        for row in self.report.select("horizon"):
            print(f"  Field rel-L2:      {row.mean:.4e} +- {row.std:.2e} over {int(row.value)} steps")
        print(f"{'='*60}\n")


def _segments(data: Union[DatasetBundle, Trajectory],
              ratios: Sequence[float]) -> Tuple[List[Trajectory], List[Trajectory], List[Trajectory]]:
    """Train/val/test series: chronological cuts of a single series, split tags otherwise."""
    if isinstance(data, Trajectory) or data.M == 1:
        series = data if isinstance(data, Trajectory) else data.trajectory(0)
        train, val, test = split_chronological(series, ratios)
        return [train], [val], [test]
    parts = tuple([data.trajectory(m) for m in data.indices(tag)] for tag in ("train", "val", "test"))
    if not all(parts):
        raise ConfigError(f"pod pipeline needs non-empty train/val/test splits, got {data.split_counts()}")
    return parts


def _coefficient_bundle(basis: PodBasis, series: List[Trajectory], scale: np.ndarray, tag: str) -> DatasetBundle:
    trajectories = [
        Trajectory(grid=[np.arange(basis.r, dtype=np.float64)], times=traj.times,
                   fields=project(basis, traj.fields) / scale)
        for traj in series
    ]
    return DatasetBundle.from_trajectories("pod_coefficients", trajectories, seeds=range(len(trajectories)),
                                           splits=[tag] * len(trajectories))


def default_reduced_model(r: int, lf: int, dt: float) -> ModelConfig:
    """Single-level 1-D model over r coefficients, lf*dt scaled to an O(100) embedding argument."""
    return ModelConfig(variant="ditto", dimension=1, grid_shape=(r,), base_channels=32, channel_mults=(1,),
                       time_scale=100.0 / (lf * dt))


def pod_pipeline(data: Union[DatasetBundle, Trajectory], r: int = DEFAULT_MODES, lf: int = 1,
                 model_cfg: Optional[ModelConfig] = None, opt_cfg: Optional[OptimizerConfig] = None,
                 horizon: Optional[int] = None, ratios: Sequence[float] = CHRONOLOGICAL_RATIOS,
                 condition_on_offset: bool = True, progress: bool = True, scenario: str = "pod") -> PodResult:
    """Basis on the train split only, bundled training on normalized coefficients,
    rollout over each test series and scoring in field space.

    Bundling drops the final window (nt - lf sub-trajectories per series).
    """
    from ditto.network import build_model
    from ditto.rollout import rel_l2_error, rollout_bundled
    from ditto.training import bundle_starts, train

    train_series, val_series, test_series = _segments(data, ratios)
    basis = compute_pod(np.concatenate([traj.fields for traj in train_series]), r)
    if basis.r < 2:
        raise ConfigError(f"the reduced model needs at least 2 modes, the training snapshots support {basis.r}")
    train_coeffs = np.concatenate([project(basis, traj.fields) for traj in train_series])
    scale = train_coeffs.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)

    train_bundle = _coefficient_bundle(basis, train_series, scale, "train")
    val_bundle = _coefficient_bundle(basis, val_series, scale, "val")
    nt = train_bundle.T
    bundling = BundlingConfig(lf=lf, nt=nt, condition_on_offset=condition_on_offset, exclude_final_window=True)
    sub_trajectories = len(bundle_starts(nt, lf, exclude_final_window=True)) * train_bundle.M
    dt = float(train_bundle.times[1] - train_bundle.times[0])

    model_cfg = default_reduced_model(basis.r, lf, dt) if model_cfg is None else \
        replace(model_cfg, dimension=1, grid_shape=(basis.r,))
    model = build_model(model_cfg)
    schedule = TrainingSchedule(strategy="bundled", bundling=bundling)
    logger.info("pod pipeline: r=%d, lf=%d, %d sub-trajectories", basis.r, lf, sub_trajectories)
    train(model, train_bundle, schedule, opt_cfg=opt_cfg or OptimizerConfig(), progress=progress,
          val_bundle=val_bundle)

    result = PodResult(basis=basis, model=model, coefficient_scale=scale, report=EvalReport(),
                       sub_trajectories=sub_trajectories)
    summary = []
    for traj in test_series:
        steps = traj.T if horizon is None else horizon
        if steps > traj.T:
            raise ConfigError(f"horizon {steps} exceeds the {traj.T}-step test reference")
        if steps < lf:
            raise ConfigError(f"test reference of {steps} steps is shorter than lf={lf}")
        rollout = rollout_bundled(model, project(basis, traj.fields[0]) / scale,
                                  RolloutConfig(lf=lf, horizon=steps, condition_on_offset=condition_on_offset), dt)
        predicted = lift(basis, rollout.fields * scale)
        n = len(predicted)
        errors = np.array([rel_l2_error(predicted[i], traj.fields[i]) for i in range(n)])
        floor = np.array([rel_l2_error(lift(basis, project(basis, traj.fields[i])), traj.fields[i])
                          for i in range(n)])
        result.predictions.append(predicted)
        result.errors.append(errors)
        result.projection_errors.append(floor)
        summary.append(errors[1:].mean() if n > 1 else math.nan)

    longest = max(len(e) for e in result.errors)
    for step in range(longest):
        column = np.array([e[step] for e in result.errors if len(e) > step])
        result.report.add(scenario, "ditto_pod", "step", step, column)
    result.report.add(scenario, "ditto_pod", "horizon", longest - 1, np.asarray(summary))
    return result
