"""
Losses, pair sampling strategies and the training loop.

Three strategies decide which (source, scalar, target) triples an epoch sees:
  full       every (x_0, t_n) -> x_n pair
  subsample  a fresh alpha-fraction of those pairs per epoch
  bundled    windows of lf steps from every start state, scalar = offset (or absolute time)
"""

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from ditto.errors import ConfigError, NumericalError
from ditto.network import flatten_field
from ditto.schema import (
    BundlingConfig, DatasetBundle, LossConfig, OptimizerConfig, TrainingSchedule, Trajectory, _rule,
)

logger = logging.getLogger(__name__)


# ============================================================================
# LOSS AND SCHEDULES
# ============================================================================

def relative_l2_loss(pred: torch.Tensor, target: torch.Tensor,
                     loss_cfg: Union[LossConfig, float, None] = None) -> torch.Tensor:
    """mean_b ||pred_b - target_b||_2 / (eps + ||target_b||_2), samples flattened column-wise."""
    eps = loss_cfg.epsilon if isinstance(loss_cfg, LossConfig) else (1e-8 if loss_cfg is None else float(loss_cfg))
    if not eps > 0:
        raise ConfigError(f"epsilon must be > 0, got {eps}")
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    if pred.shape != target.shape:
        raise ConfigError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.dim() <= 1:
        pred, target = pred.reshape(1, -1), target.reshape(1, -1)
    pred = pred.reshape(pred.shape[0], -1)
    target = target.reshape(target.shape[0], -1)
    numerator = torch.linalg.vector_norm(pred - target, dim=1)
    denominator = eps + torch.linalg.vector_norm(target, dim=1)
    return torch.mean(numerator / denominator)


def subsample_total(M: int, T: int, alpha: float) -> int:
    """round(alpha * M * T), halves rounded up."""
    return int(math.floor(alpha * M * T + 0.5))


def subsample_epoch(M: int, T: int, alpha: float, seed: int, epoch: int = 0) -> List[np.ndarray]:
    """Draw S_m subset of {1..T} for every trajectory m, without replacement.

    Sizes differ by at most one across m and sum to round(alpha*M*T). The draw
    depends on (seed, epoch) only, so every epoch resamples.
    """
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must satisfy 0 < alpha <= 1, got {alpha}")
    if M < 1 or T < 1:
        raise ConfigError(f"need M >= 1 and T >= 1, got M={M}, T={T}")
    total = subsample_total(M, T, alpha)
    if total < 1:
        raise ConfigError(f"round(alpha*M*T) = {total}; alpha={alpha} selects no pairs for M={M}, T={T}")
    rng = np.random.default_rng([seed, epoch])
    sizes = np.full(M, total // M, dtype=int)
    sizes[rng.permutation(M)[: total % M]] += 1
    return [np.sort(rng.choice(T, size=int(size), replace=False)) + 1 for size in sizes]


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    if total <= 0:
        raise ConfigError(f"total steps must be > 0, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step must lie in [0, {total}], got {step}")
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


# ============================================================================
# PAIR CONSTRUCTION
# ============================================================================

@dataclass
class BundledPairs:
    """Sub-trajectories of one trajectory: an input state and its next lf states."""
    starts: np.ndarray        # (K,)
    inputs: np.ndarray        # (K, *grid)
    targets: np.ndarray       # (K, lf, *grid)
    scalars: np.ndarray       # (K, lf) offsets or absolute times

    def __len__(self) -> int:
        return len(self.starts)


def bundle_starts(nt: int, lf: int, exclude_final_window: bool = False) -> np.ndarray:
    if not 1 <= lf <= nt:
        raise ConfigError(f"look-forward window must satisfy 1 <= lf <= nt, got lf={lf}, nt={nt}")
    count = nt - lf + (0 if exclude_final_window else 1)
    if count < 1:
        raise ConfigError(f"lf={lf} leaves no sub-trajectory in nt={nt} steps once the final window is excluded")
    return np.arange(count)


def make_bundled_pairs(traj: Trajectory, lf: Union[int, BundlingConfig],
                       condition_on_offset: bool = True, exclude_final_window: bool = False) -> BundledPairs:
    """Split ``traj`` into nt-lf+1 windows (nt-lf with ``exclude_final_window``)."""
    if isinstance(lf, BundlingConfig):
        condition_on_offset = lf.condition_on_offset
        exclude_final_window = lf.exclude_final_window
        lf = lf.lf
    times = np.asarray(traj.times)
    starts = bundle_starts(traj.T, lf, exclude_final_window)
    steps = starts[:, None] + np.arange(1, lf + 1)[None, :]
    scalars = times[steps] - times[starts][:, None] if condition_on_offset else times[steps]
    return BundledPairs(starts=starts, inputs=traj.fields[starts], targets=traj.fields[steps], scalars=scalars)


def build_pair_index(bundle: DatasetBundle, schedule: TrainingSchedule, epoch: int = 0,
                     seed: int = 0) -> np.ndarray:
    """Ordered (trajectory, source step, target step) rows for one epoch of ``schedule``.

    Trajectory indices refer to ``bundle`` itself; pass a split subset.
    """
    schedule.validate()
    M, T = bundle.M, bundle.T
    if M < 1:
        raise ConfigError("cannot build pairs from an empty bundle")
    rows = []
    if schedule.strategy == "full":
        for m in range(M):
            rows.extend((m, 0, n) for n in range(1, T + 1))
    elif schedule.strategy == "subsample":
        for m, subset in enumerate(subsample_epoch(M, T, schedule.alpha, seed, epoch)):
            rows.extend((m, 0, int(n)) for n in subset)
    else:
        cfg = schedule.bundling
        if cfg.nt > T:
            raise ConfigError(f"bundling horizon nt={cfg.nt} exceeds the bundle's T={T}")
        starts = bundle_starts(cfg.nt, cfg.lf, cfg.exclude_final_window)
        for m in range(M):
            rows.extend((m, int(s), int(s) + j) for s in starts for j in range(1, cfg.lf + 1))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def pair_scalars(bundle: DatasetBundle, index: np.ndarray, schedule: TrainingSchedule) -> np.ndarray:
    times = np.asarray(bundle.times, dtype=np.float64)
    offset = schedule.strategy == "bundled" and schedule.bundling.condition_on_offset
    return times[index[:, 2]] - times[index[:, 1]] if offset else times[index[:, 2]]


class PairDataset(Dataset):
    """Materializes (source, scalar, target) for rows of a pair index.

    With ``flatten_order`` set, fields come out as flat point vectors for the point variant.
    """

    def __init__(self, bundle: DatasetBundle, index: np.ndarray, scalars: np.ndarray,
                 dtype: torch.dtype = torch.float32, flatten_order: Optional[str] = None):
        self.fields = bundle.fields
        self.index = index
        self.scalars = scalars
        self.dtype = dtype
        self.flatten_order = flatten_order

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i):
        m, source, target = self.index[i]
        return (torch.as_tensor(self._field(m, source), dtype=self.dtype),
                torch.as_tensor(self.scalars[i], dtype=self.dtype),
                torch.as_tensor(self._field(m, target), dtype=self.dtype))

    def _field(self, m: int, step: int) -> np.ndarray:
        field = self.fields[m, step]
        if self.flatten_order is None:
            return field
        return flatten_field(field, self.flatten_order)


def pair_dataset(model: torch.nn.Module, bundle: DatasetBundle, index: np.ndarray, scalars: np.ndarray,
                 dtype: torch.dtype = torch.float32) -> PairDataset:
    """PairDataset shaped for ``model``: point variants see flattened fields."""
    cfg = model.config
    order = cfg.point_flatten_order if cfg.variant == "ditto_point" else None
    return PairDataset(bundle, index, scalars, dtype, flatten_order=order)


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def to_manifest_properties(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    total_steps: int = 0

    def print_cli(self) -> None:
        """Print the TrainResult in an easy-to-read CLI format."""
        _rule("TRAINING")
        print(f"  Epochs:        {len(self.history)}")
        print(f"  Steps:         {self.total_steps}")
        if self.history:
            print(f"  Final train:   {self.history[-1].train_loss:.4e}")
        print(f"  Best val:      {self.best_val_loss:.4e} (epoch {self.best_epoch})")
        print(f"{'='*60}\n")


def history_csv(history: Sequence[EpochRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
    for record in history:
        writer.writerow([record.epoch, repr(record.train_loss), repr(record.val_loss), repr(record.lr)])
    return buffer.getvalue()


def _model_device_dtype(model: torch.nn.Module):
    param = next(model.parameters())
    return param.device, param.dtype


def evaluate_pairs(model: torch.nn.Module, bundle: DatasetBundle, index: np.ndarray, scalars: np.ndarray,
                   loss_cfg: Optional[LossConfig] = None, batch_size: int = 64) -> float:
    """Pair-weighted mean rel-L2 over ``index`` in its stored order."""
    if len(index) == 0:
        raise ConfigError("cannot evaluate an empty pair set")
    device, dtype = _model_device_dtype(model)
    loader = DataLoader(pair_dataset(model, bundle, index, scalars, dtype), batch_size=batch_size, shuffle=False)
    was_training = model.training
    model.eval()
    total = 0.0
    with torch.no_grad():
        for source, scalar, target in loader:
            loss = relative_l2_loss(model(source.to(device), scalar.to(device)), target.to(device), loss_cfg)
            total += float(loss) * len(source)
    model.train(was_training)
    return total / len(index)


def _validation_schedule(schedule: TrainingSchedule, val_steps: int) -> TrainingSchedule:
    """Every pair for sub-sampling; bundled windows clipped to the validation length."""
    if schedule.strategy == "subsample":
        return replace(schedule, strategy="full", alpha=1.0)
    if schedule.strategy == "bundled":
        cfg = schedule.bundling
        nt = min(cfg.nt, val_steps)
        return replace(schedule, bundling=replace(cfg, nt=nt, lf=min(cfg.lf, nt), exclude_final_window=False))
    return schedule


def _steps_per_epoch(pairs: int, batch_size: int) -> int:
    return math.ceil(pairs / batch_size)


def train(model: torch.nn.Module, bundle: DatasetBundle, schedule: TrainingSchedule,
          loss_cfg: Optional[LossConfig] = None, opt_cfg: Optional[OptimizerConfig] = None,
          progress: bool = True, output_dir: Optional[Union[str, Path]] = None,
          val_bundle: Optional[DatasetBundle] = None) -> TrainResult:
    """Adam + cosine annealing over the train split, keeping the best-validation state.

    Validation uses the val split, or all of ``val_bundle`` when given (series
    cut chronologically cannot share one time axis). A non-finite training loss
    restores the last good state (and writes it when ``output_dir`` is given)
    before raising NumericalError.
    """
    from ditto.storage import save_checkpoint, write_text_atomic

    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    loss_cfg.validate()
    opt_cfg.validate()
    schedule.validate()
    if model.config.variant == "baseline_unet" and not (schedule.strategy == "bundled" and schedule.bundling.lf == 1):
        raise ConfigError("baseline_unet has no time input and learns one stored step; "
                          "train it with strategy 'bundled' and lf=1")
    train_bundle = bundle.subset("train")
    val_bundle = val_bundle if val_bundle is not None else bundle.subset("val")
    if train_bundle.M == 0 or val_bundle.M == 0:
        raise ConfigError(f"training needs non-empty train and val splits, got {bundle.split_counts()}")

    device, dtype = _model_device_dtype(model)
    val_schedule = _validation_schedule(schedule, val_bundle.T)
    val_index = build_pair_index(val_bundle, val_schedule)
    val_scalars = pair_scalars(val_bundle, val_index, val_schedule)

    pairs_per_epoch = len(build_pair_index(train_bundle, schedule, 0, opt_cfg.seed))
    total_steps = opt_cfg.total_steps or opt_cfg.epochs * _steps_per_epoch(pairs_per_epoch, opt_cfg.batch_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=opt_cfg.lr0, betas=(opt_cfg.beta1, opt_cfg.beta2),
                                 weight_decay=opt_cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: cosine_lr(min(step, total_steps), total_steps, 1.0))

    result = TrainResult(model=model, total_steps=total_steps)
    best_state = copy.deepcopy(model.state_dict())
    output_dir = Path(output_dir) if output_dir else None

    def persist() -> None:
        if output_dir is None:
            return
        write_text_atomic(output_dir / "history.csv", history_csv(result.history))
        save_checkpoint(model, output_dir / "checkpoint",
                        extra={"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                               "schedule": schedule.strategy,
                               "lf": schedule.bundling.lf if schedule.strategy == "bundled" else None,
                               "condition_on_offset": schedule.bundling.condition_on_offset
                               if schedule.strategy == "bundled" else True})

    logger.info("training %s on %d trajectories, %d pairs/epoch, %d steps",
                schedule.strategy, train_bundle.M, pairs_per_epoch, total_steps)
    step = 0
    epochs = tqdm(range(opt_cfg.epochs), desc="train", disable=not progress)
    for epoch in epochs:
        index = build_pair_index(train_bundle, schedule, epoch, opt_cfg.seed)
        scalars = pair_scalars(train_bundle, index, schedule)
        generator = torch.Generator().manual_seed(opt_cfg.seed * 100_003 + epoch)
        loader = DataLoader(pair_dataset(model, train_bundle, index, scalars, dtype), batch_size=opt_cfg.batch_size,
                            shuffle=True, generator=generator)
        model.train()
        running = 0.0
        for source, scalar, target in loader:
            optimizer.zero_grad()
            loss = relative_l2_loss(model(source.to(device), scalar.to(device)), target.to(device), loss_cfg)
            if not torch.isfinite(loss):
                model.load_state_dict(best_state)
                persist()
                raise NumericalError("non-finite training loss; restored the last good state", step=step)
            loss.backward()
            if opt_cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), opt_cfg.grad_clip)
            optimizer.step()
            if step < total_steps:
                scheduler.step()
            step += 1
            running += float(loss) * len(source)

        val_loss = evaluate_pairs(model, val_bundle, val_index, val_scalars, loss_cfg, opt_cfg.batch_size)
        record = EpochRecord(epoch=epoch, train_loss=running / len(index), val_loss=val_loss,
                             lr=optimizer.param_groups[0]["lr"])
        result.history.append(record)
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        epochs.set_postfix(train=f"{record.train_loss:.3e}", val=f"{val_loss:.3e}")
        logger.debug("epoch %d train %.4e val %.4e lr %.3e", epoch, record.train_loss, val_loss, record.lr)

    model.load_state_dict(best_state)
    model.eval()
    persist()
    return result
