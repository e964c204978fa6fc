"""
Inference and evaluation: continuous-time queries, bundled rollouts,
temporal super-resolution, extrapolation curves and noise sweeps.
"""

import csv
import io
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from ditto.datagen import dataset_std, inject_noise
from ditto.errors import ConfigError
from ditto.network import flatten_field, unflatten_field
from ditto.schema import DatasetBundle, EvalReport, EvalRow, NoiseConfig, RolloutConfig, Trajectory

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("scenario", "variant", "axis", "value", "mean", "std")


# ============================================================================
# QUERIES AND ROLLOUTS
# ============================================================================

def query(model: torch.nn.Module, x0: np.ndarray, t) -> np.ndarray:
    """u(., t) for one initial state and one or many times, in a single forward pass.

    A scalar ``t`` returns one field, an array of K times returns (K, *grid).
    The baseline has no time input and is discrete in time: the k-th requested
    time is answered by k applications of its one-step map.
    """
    cfg = model.config
    times = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(times)):
        raise ConfigError("query time must be finite")
    x0 = np.asarray(x0)
    if not np.all(np.isfinite(x0)):
        raise ConfigError("initial state contains NaN or Inf")
    if cfg.variant == "baseline_unet":
        return _step_baseline(model, x0, times)
    point = cfg.variant == "ditto_point"
    values = flatten_field(x0, cfg.point_flatten_order) if point else x0
    batch = np.broadcast_to(values, (max(times.size, 1),) + values.shape)
    param = next(model.parameters())
    with torch.no_grad():
        out = model(torch.as_tensor(np.ascontiguousarray(batch), dtype=param.dtype, device=param.device),
                    torch.as_tensor(times.reshape(-1), dtype=param.dtype, device=param.device))
    out = out.cpu().numpy()
    if point:
        out = unflatten_field(out, x0.shape, cfg.point_flatten_order)
    return out[0] if times.ndim == 0 else out


def _step_baseline(model: torch.nn.Module, x0: np.ndarray, times: np.ndarray) -> np.ndarray:
    param = next(model.parameters())
    state = torch.as_tensor(np.ascontiguousarray(x0)[None], dtype=param.dtype, device=param.device)
    states = []
    with torch.no_grad():
        for _ in range(max(times.size, 1)):
            state = model(state)
            states.append(state[0])
    out = torch.stack(states).cpu().numpy()
    return out[0] if times.ndim == 0 else out


def count_leaps(horizon: int, lf: int) -> int:
    """Feedback steps of a bundled rollout: ceil(horizon / lf)."""
    if not 1 <= lf <= horizon:
        raise ConfigError(f"rollout needs horizon >= lf >= 1, got lf={lf}, horizon={horizon}")
    return math.ceil(horizon / lf)


def rollout_bundled(model: torch.nn.Module, x0: np.ndarray, cfg: RolloutConfig, dt: float,
                    grid: Optional[Sequence[np.ndarray]] = None) -> Trajectory:
    """Leap lf steps at a time, feeding the last prediction of each leap back as input.

    The final leap is shortened to land exactly on ``horizon``. A non-finite
    prediction truncates the trajectory at the last finite step and records
    the diagnostic in ``metadata``.
    """
    cfg.validate()
    if not dt > 0:
        raise ConfigError(f"dt must be > 0, got {dt}")
    x0 = np.asarray(x0)
    states = [x0]
    metadata = {"lf": cfg.lf, "horizon": cfg.horizon, "leaps": 0, "truncated_at": None}
    produced = 0
    state = x0
    while produced < cfg.horizon:
        k = min(cfg.lf, cfg.horizon - produced)
        steps = np.arange(1, k + 1)
        scalars = steps * dt if cfg.condition_on_offset else (produced + steps) * dt
        preds = query(model, state, scalars)
        metadata["leaps"] += 1
        finite = np.array([np.all(np.isfinite(p)) for p in preds])
        if not finite.all():
            bad = int(np.argmin(finite))
            states.extend(preds[:bad])
            metadata["truncated_at"] = produced + bad + 1
            logger.warning("rollout truncated: non-finite state at step %d (t=%.6g)",
                           produced + bad + 1, (produced + bad + 1) * dt)
            break
        states.extend(preds)
        state = preds[-1]
        produced += k
    fields = np.stack(states)
    if grid is None:
        grid = [np.arange(n, dtype=np.float64) for n in x0.shape]
    return Trajectory(grid=list(grid), times=dt * np.arange(len(fields)), fields=fields, metadata=metadata)


# ============================================================================
# METRICS
# ============================================================================

def rel_l2_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """||truth - pred||_2 / ||truth||_2."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction shape {pred.shape} != reference shape {truth.shape}")
    norm = np.linalg.norm(truth.ravel())
    if norm == 0:
        raise ConfigError("relative L2 error is undefined for a zero reference field")
    return float(np.linalg.norm((truth - pred).ravel()) / norm)


def evaluate_trajectories(model: torch.nn.Module, inputs: np.ndarray, references: np.ndarray,
                          times: Sequence[float], progress: bool = False) -> np.ndarray:
    """Per-trajectory rel-L2, averaged over the snapshots at ``times``.

    inputs: (K, *grid), references: (K, len(times), *grid).
    """
    inputs = np.asarray(inputs)
    references = np.asarray(references)
    times = np.asarray(times, dtype=np.float64)
    if len(inputs) == 0:
        raise ConfigError("no trajectories to evaluate")
    if references.shape[:2] != (len(inputs), len(times)):
        raise ConfigError(f"references {references.shape[:2]} do not match {len(inputs)} inputs x {len(times)} times")
    errors = np.empty(len(inputs))
    for k in tqdm(range(len(inputs)), desc="eval", disable=not progress):
        preds = query(model, inputs[k], times)
        errors[k] = np.mean([rel_l2_error(preds[i], references[k, i]) for i in range(len(times))])
    return errors


def _test_split(bundle: DatasetBundle) -> DatasetBundle:
    test = bundle.subset("test")
    if test.M == 0:
        raise ConfigError("evaluation needs a non-empty test split")
    return test


def evaluate_clean(model: torch.nn.Module, bundle: DatasetBundle) -> np.ndarray:
    """Errors on the test split at every stored snapshot after t=0."""
    test = _test_split(bundle)
    return evaluate_trajectories(model, test.fields[:, 0], test.fields[:, 1:], test.times[1:])


# ============================================================================
# EVALUATION PROTOCOLS
# ============================================================================

def superresolution_stride(stored_steps: int, nt_test: int) -> int:
    if nt_test < 1:
        raise ConfigError(f"N_t^test must be >= 1, got {nt_test}")
    if nt_test > stored_steps or stored_steps % nt_test:
        raise ConfigError(
            f"N_t^test={nt_test} is not a subsampling of the stored {stored_steps}-step reference; "
            f"regeneration required at a resolution divisible by {nt_test}"
        )
    return stored_steps // nt_test


def eval_superresolution(model: torch.nn.Module, bundle: DatasetBundle, resolutions: Sequence[int],
                         scenario: str = "", variant: Optional[str] = None) -> EvalReport:
    """One row per N_t^test, the reference subsampled from the finest stored trajectory."""
    test = _test_split(bundle)
    variant = variant or model.config.variant
    report = EvalReport()
    for nt_test in resolutions:
        stride = superresolution_stride(test.T, nt_test)
        errors = evaluate_trajectories(model, test.fields[:, 0], test.fields[:, stride::stride],
                                       test.times[stride::stride])
        row = report.add(scenario, variant, "nt_test", nt_test, errors)
        logger.info("superres N_t=%d rel-L2 %.4e +- %.2e", nt_test, row.mean, row.std)
    return report


def eval_extrapolation(model: torch.nn.Module, bundle: DatasetBundle, cfg: RolloutConfig,
                       scenario: str = "", variant: Optional[str] = None) -> EvalReport:
    """Error-vs-step curve of bundled rollouts on the test split.

    Step rows are labelled ``<variant>@lf=<lf>`` so an lf sweep yields one curve
    per window; the final-step summary is a single row on the ``lf`` axis.
    """
    cfg.validate()
    test = _test_split(bundle)
    if test.T < cfg.horizon:
        raise ConfigError(f"reference trajectories end at step {test.T}, shorter than horizon {cfg.horizon}")
    variant = variant or model.config.variant
    dt = float(test.times[1] - test.times[0])
    errors = np.full((test.M, cfg.horizon + 1), np.nan)
    for k in range(test.M):
        traj = rollout_bundled(model, test.fields[k, 0], cfg, dt, test.grid)
        for n in range(len(traj.times)):
            errors[k, n] = rel_l2_error(traj.fields[n], test.fields[k, n])
    mean = np.nanmean(errors, axis=0)
    std = np.nanstd(errors, axis=0)
    report = EvalReport()
    label = f"{variant}@lf={cfg.lf}"
    report.curves[label] = np.stack([mean, std], axis=1)
    for n in range(cfg.horizon + 1):
        column = errors[:, n]
        column = column[np.isfinite(column)]
        if len(column):
            report.add(scenario, label, "step", n, column)
    final = errors[:, -1][np.isfinite(errors[:, -1])]
    if len(final):
        report.add(scenario, variant, "lf", cfg.lf, final)
    else:
        logger.warning("every rollout with lf=%d was truncated before step %d", cfg.lf, cfg.horizon)
    return report


def noise_sweep(model: torch.nn.Module, bundle: DatasetBundle, gammas: Sequence[float],
                seeds: Sequence[int] = (0,), sigma_D: Optional[float] = None, scenario: str = "",
                variant: Optional[str] = None) -> EvalReport:
    """Perturb only the test inputs by gamma * sigma_D Gaussian noise and score against clean targets.

    Each row pools the test trajectories of every noise seed.
    """
    test = _test_split(bundle)
    if any(g < 0 for g in gammas):
        raise ConfigError(f"noise levels must be >= 0, got {list(gammas)}")
    if sigma_D is None:
        sigma_D = dataset_std(bundle, "train" if bundle.indices("train") else None)
    variant = variant or model.config.variant
    report = EvalReport()
    for gamma in gammas:
        errors = []
        for seed in seeds:
            noise = NoiseConfig(gamma=float(gamma), sigma_D=sigma_D, seed=int(seed))
            inputs = inject_noise(test.fields[:, 0], noise, seeds=test.seeds)
            errors.append(evaluate_trajectories(model, inputs, test.fields[:, 1:], test.times[1:]))
        row = report.add(scenario, variant, "gamma", gamma, np.concatenate(errors))
        logger.info("noise gamma=%g rel-L2 %.4e", gamma, row.mean)
    return report


# ============================================================================
# REPORT FILES
# ============================================================================

def report_csv(report: EvalReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in report.rows:
        writer.writerow([row.scenario, row.variant, row.axis, repr(row.value), repr(row.mean), repr(row.std)])
    return buffer.getvalue()


def parse_report_csv(text: str) -> EvalReport:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise ConfigError(f"report header must be {','.join(REPORT_COLUMNS)}, got {reader.fieldnames}")
    rows = [EvalRow(scenario=r["scenario"], variant=r["variant"], axis=r["axis"], value=float(r["value"]),
                    mean=float(r["mean"]), std=float(r["std"])) for r in reader]
    return EvalReport(rows=rows)


def group_rows(rows: Sequence[EvalRow]) -> Dict[str, List[EvalRow]]:
    """Rows keyed by "scenario/variant", each list sorted by axis value."""
    groups: Dict[str, List[EvalRow]] = {}
    for row in rows:
        key = f"{row.scenario}/{row.variant}" if row.scenario else row.variant
        groups.setdefault(key, []).append(row)
    return {key: sorted(group, key=lambda r: r.value) for key, group in groups.items()}
