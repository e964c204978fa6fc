"""
Dataclasses shared by every ditto module.
Each type exports its fields for JSON manifests (to_manifest_properties) and
prints a boxed summary for the CLI (print_cli).
"""

import math
from dataclasses import dataclass, asdict, field, replace
from typing import Optional, List, Dict, Any, Tuple, Sequence

import numpy as np

from ditto.errors import ConfigError


SCHEMA_VERSION = 1

PDE_KINDS = ("burgers", "navier_stokes", "wave2d", "wave3d")
PDE_DIMENSION = {"burgers": 1, "navier_stokes": 2, "wave2d": 2, "wave3d": 3}
FORCING_IDS = ("none", "diagonal_sincos")
WAVE_SPEED_IDS = ("unit", "sin_product", "sin_product_3d")
VARIANTS = ("ditto", "ditto_point", "ditto_gate", "baseline_unet")
SPLIT_TAGS = ("train", "val", "test")
STRATEGIES = ("full", "subsample", "bundled")


def _rule(title: str) -> None:
    print(f"\n{'='*60}")
    print(title)
    print(f"{'='*60}")


# ============================================================================
# DATA GENERATION
# ============================================================================

@dataclass
class GrfSpec:
    """Gaussian random field on the periodic unit box [0,1)^d.

    Fourier mode k carries variance sigma * ((2 pi |k|)^2 + tau^2)^(-alpha_exp).
    """
    dimension: int
    sigma: float
    tau: float
    alpha_exp: float
    grid_points: int
    zero_mean: bool = False

    def validate(self) -> None:
        errors = []
        if self.dimension not in (1, 2, 3):
            errors.append(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if not self.sigma > 0:
            errors.append(f"sigma must be > 0, got {self.sigma}")
        if not self.tau > 0:
            errors.append(f"tau must be > 0, got {self.tau}")
        if not self.alpha_exp > self.dimension / 2:
            errors.append(
                f"alpha_exp must exceed dimension/2 = {self.dimension / 2} for finite variance, got {self.alpha_exp}"
            )
        if self.grid_points < 4 or self.grid_points % 2:
            errors.append(f"grid_points must be even and >= 4, got {self.grid_points}")
        if errors:
            raise ConfigError("invalid GrfSpec", errors)

    def mode_variance(self, k_norm: np.ndarray) -> np.ndarray:
        """Closed-form variance of the Fourier mode with integer wavenumber norm |k|."""
        return self.sigma * ((2.0 * np.pi * np.asarray(k_norm, dtype=np.float64)) ** 2 + self.tau ** 2) ** (-self.alpha_exp)

    def to_manifest_properties(self) -> Dict[str, Any]:
        return asdict(self)


# N(0, 625 (-Laplacian + 25 I)^-2)
BURGERS_GRF = GrfSpec(dimension=1, sigma=625.0, tau=5.0, alpha_exp=2.0, grid_points=128)
# N(0, 7^(3/2) (-Laplacian + 49 I)^(-5/2)), periodic vorticity has no mean mode
NAVIER_STOKES_GRF = GrfSpec(dimension=2, sigma=7.0 ** 1.5, tau=7.0, alpha_exp=2.5, grid_points=64, zero_mean=True)


@dataclass
class PdeConfig:
    """Reference-solver configuration for one scenario."""
    kind: str
    viscosity: float = 0.0
    t_final: float = 1.0
    n_steps: int = 50          # T, stored snapshots after t=0
    grid: Tuple[int, ...] = (128,)
    forcing_id: str = "none"
    wave_speed_id: str = "unit"
    cfl_safety: float = 0.5
    max_dt: Optional[float] = None

    @property
    def dimension(self) -> int:
        return PDE_DIMENSION[self.kind]

    @property
    def domain_length(self) -> float:
        """Periodic problems live on [0,1)^d, wave problems on [0,pi]^d."""
        return math.pi if self.kind.startswith("wave") else 1.0

    def validate(self) -> None:
        errors = []
        if self.kind not in PDE_KINDS:
            errors.append(f"kind must be one of {PDE_KINDS}, got {self.kind!r}")
        else:
            if len(self.grid) != self.dimension:
                errors.append(f"{self.kind} needs {self.dimension} grid sizes, got {tuple(self.grid)}")
            if self.kind in ("burgers", "navier_stokes") and not self.viscosity > 0:
                errors.append(f"{self.kind} needs viscosity > 0, got {self.viscosity}")
        if self.viscosity < 0:
            errors.append(f"viscosity must be >= 0, got {self.viscosity}")
        if not self.t_final > 0:
            errors.append(f"t_final must be > 0, got {self.t_final}")
        if self.n_steps < 1:
            errors.append(f"n_steps must be >= 1, got {self.n_steps}")
        if any(n < 4 for n in self.grid):
            errors.append(f"every grid size must be >= 4, got {tuple(self.grid)}")
        if self.forcing_id not in FORCING_IDS:
            errors.append(f"forcing_id must be one of {FORCING_IDS}, got {self.forcing_id!r}")
        if self.wave_speed_id not in WAVE_SPEED_IDS:
            errors.append(f"wave_speed_id must be one of {WAVE_SPEED_IDS}, got {self.wave_speed_id!r}")
        if not 0 < self.cfl_safety <= 1:
            errors.append(f"cfl_safety must lie in (0, 1], got {self.cfl_safety}")
        if self.max_dt is not None and not self.max_dt > 0:
            errors.append(f"max_dt must be > 0, got {self.max_dt}")
        if errors:
            raise ConfigError("invalid PdeConfig", errors)

    def snapshot_times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_steps + 1)

    def to_manifest_properties(self) -> Dict[str, Any]:
        props = asdict(self)
        props["grid"] = list(self.grid)
        return props

    def print_cli(self) -> None:
        """Print the PdeConfig in an easy-to-read CLI format."""
        _rule(f"PDE: {self.kind}")
        print(f"  Grid:        {' x '.join(str(n) for n in self.grid)}")
        print(f"  Viscosity:   {self.viscosity}")
        print(f"  t_final:     {self.t_final}")
        print(f"  Snapshots:   {self.n_steps + 1}")
        print(f"  Forcing:     {self.forcing_id}")
        print(f"  Wave speed:  {self.wave_speed_id}")
        print(f"{'='*60}\n")


@dataclass
class Trajectory:
    """One solution u(x, t): axis coordinates, T+1 timestamps and the (T+1, *grid) field tensor."""
    grid: List[np.ndarray]
    times: np.ndarray
    fields: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.times) - 1

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return tuple(self.fields.shape[1:])

    def x_n(self, n: int) -> np.ndarray:
        return self.fields[n]

    def validate(self) -> None:
        errors = []
        times = np.asarray(self.times)
        if times.ndim != 1 or len(times) < 1:
            errors.append("times must be a non-empty 1-D array")
        else:
            if times[0] != 0.0:
                errors.append(f"first time must be exactly 0, got {times[0]}")
            if np.any(np.diff(times) <= 0):
                errors.append("times must be strictly increasing")
            if self.fields.shape[0] != len(times):
                errors.append(f"fields hold {self.fields.shape[0]} snapshots for {len(times)} times")
        if tuple(len(axis) for axis in self.grid) != self.spatial_shape:
            errors.append(f"grid {tuple(len(a) for a in self.grid)} does not match fields {self.spatial_shape}")
        if not np.all(np.isfinite(self.fields)):
            errors.append("fields contain NaN or Inf")
        if errors:
            raise ConfigError("invalid Trajectory", errors)


@dataclass
class DatasetBundle:
    """M trajectories sharing one grid and one time axis.

    ``fields`` is stacked as (M, T+1, *grid). ``splits`` tags each trajectory
    train/val/test and ``seeds`` is the per-trajectory RNG ledger.
    """
    kind: str
    grid: List[np.ndarray]
    times: np.ndarray
    fields: np.ndarray
    splits: List[str]
    seeds: List[int]
    conditioning_scalar_name: str = "time"
    pde: Dict[str, Any] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.fields.shape[0]

    @property
    def T(self) -> int:
        return len(self.times) - 1

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return tuple(self.fields.shape[2:])

    @property
    def trajectories(self) -> List[Trajectory]:
        return [self.trajectory(m) for m in range(self.M)]

    def trajectory(self, m: int) -> Trajectory:
        return Trajectory(grid=self.grid, times=self.times, fields=self.fields[m],
                          metadata={"seed": self.seeds[m], "split": self.splits[m]})

    def indices(self, split: str) -> List[int]:
        return [m for m, tag in enumerate(self.splits) if tag == split]

    def subset(self, split: str) -> "DatasetBundle":
        """Trajectories tagged ``split`` as a new bundle (arrays are views where numpy allows)."""
        idx = self.indices(split)
        return replace(self, fields=self.fields[idx], splits=[split] * len(idx),
                       seeds=[self.seeds[m] for m in idx])

    def validate(self) -> None:
        errors = []
        if self.fields.ndim < 3:
            errors.append(f"fields must be (M, T+1, *grid), got shape {self.fields.shape}")
        if len(self.splits) != self.M or len(self.seeds) != self.M:
            errors.append(f"{self.M} trajectories but {len(self.splits)} split tags and {len(self.seeds)} seeds")
        unknown = sorted(set(self.splits) - set(SPLIT_TAGS))
        if unknown:
            errors.append(f"unknown split tags {unknown}")
        if self.fields.ndim >= 2 and self.fields.shape[1] != len(self.times):
            errors.append(f"fields hold {self.fields.shape[1]} snapshots for {len(self.times)} times")
        if tuple(len(axis) for axis in self.grid) != self.spatial_shape:
            errors.append("grid does not match the field tensor")
        times = np.asarray(self.times)
        if len(times) and (times[0] != 0.0 or np.any(np.diff(times) <= 0)):
            errors.append("times must start at 0 and increase strictly")
        if errors:
            raise ConfigError("invalid DatasetBundle", errors)

    @classmethod
    def from_trajectories(cls, kind: str, trajectories: Sequence[Trajectory], seeds: Sequence[int],
                          splits: Optional[Sequence[str]] = None, **kwargs) -> "DatasetBundle":
        if not trajectories:
            raise ConfigError("cannot build a bundle from zero trajectories")
        first = trajectories[0]
        for traj in trajectories[1:]:
            if traj.fields.shape != first.fields.shape or not np.array_equal(traj.times, first.times):
                raise ConfigError("all trajectories of a bundle must share grid and times")
        fields = np.stack([traj.fields for traj in trajectories])
        tags = list(splits) if splits is not None else ["train"] * len(trajectories)
        return cls(kind=kind, grid=first.grid, times=np.asarray(first.times), fields=fields,
                   splits=tags, seeds=[int(s) for s in seeds], **kwargs)

    def split_counts(self) -> Dict[str, int]:
        return {tag: self.splits.count(tag) for tag in SPLIT_TAGS}

    def print_cli(self) -> None:
        """Print the DatasetBundle in an easy-to-read CLI format."""
        counts = self.split_counts()
        _rule(f"DATASET: {self.kind}")
        print(f"  Trajectories: {self.M}")
        print(f"  Snapshots:    {self.T + 1} (t_final={float(self.times[-1]):g})")
        print(f"  Grid:         {' x '.join(str(n) for n in self.spatial_shape)}")
        print(f"  Splits:       train={counts['train']} val={counts['val']} test={counts['test']}")
        print(f"{'='*60}\n")


@dataclass
class NoiseConfig:
    """Additive Gaussian perturbation of standard deviation gamma * sigma_D."""
    gamma: float
    sigma_D: float
    seed: int = 0

    def validate(self) -> None:
        errors = []
        if not self.gamma >= 0:
            errors.append(f"gamma must be >= 0, got {self.gamma}")
        if not self.sigma_D >= 0:
            errors.append(f"sigma_D must be >= 0, got {self.sigma_D}")
        if errors:
            raise ConfigError("invalid NoiseConfig", errors)


# ============================================================================
# MODEL
# ============================================================================

@dataclass
class EmbeddingSpec:
    """Sinusoidal scalar embedding followed by a Linear-GELU-Linear head."""
    d_emb: int = 64
    mlp_hidden: int = 128

    def validate(self) -> None:
        errors = []
        if self.d_emb < 2 or self.d_emb % 2:
            errors.append(f"d_emb must be an even integer >= 2, got {self.d_emb}")
        if self.mlp_hidden < 2:
            errors.append(f"mlp_hidden must be >= 2, got {self.mlp_hidden}")
        if errors:
            raise ConfigError("invalid EmbeddingSpec", errors)


@dataclass
class ModelConfig:
    """Hyperparameters of the conditioned U-Net and its variants.

    ``grid_shape`` is the physical grid. The point variant flattens it into
    N = prod(grid_shape) tokens using ``point_flatten_order``.
    """
    variant: str = "ditto"
    dimension: int = 1
    grid_shape: Tuple[int, ...] = (128,)
    in_channels: int = 1
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2, 4)
    attention_levels: Optional[Tuple[int, ...]] = None
    use_attention: bool = True
    attention_softmax: bool = True
    conditioning_mode: str = "one_plus"     # h * (1 + s); "product" gives h * s
    norm_groups: int = 8
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    time_scale: float = 1.0
    conditioning_scalar_name: Optional[str] = "time"
    point_flatten_order: str = "C"
    point_coord_scale: float = 100.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.grid_shape = tuple(int(n) for n in self.grid_shape)
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        if isinstance(self.embedding, dict):
            self.embedding = EmbeddingSpec(**self.embedding)
        if self.attention_levels is not None:
            self.attention_levels = tuple(int(level) for level in self.attention_levels)

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def conditioned(self) -> bool:
        return self.variant != "baseline_unet"

    @property
    def resolved_attention_levels(self) -> Tuple[int, ...]:
        """Levels that carry spatial + channel attention; defaults to the coarsest level."""
        if not self.use_attention:
            return ()
        if self.attention_levels is None:
            return (self.levels - 1,)
        return self.attention_levels

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def validate(self) -> None:
        errors = []
        if self.variant not in VARIANTS:
            errors.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dimension not in (1, 2, 3):
            errors.append(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if len(self.grid_shape) != self.dimension:
            errors.append(f"grid_shape {self.grid_shape} does not have {self.dimension} axes")
        if self.levels < 1:
            errors.append("levels must be >= 1 (channel_mults is empty)")
        if self.base_channels < 1 or any(m < 1 for m in self.channel_mults):
            errors.append("base_channels and channel_mults must be positive")
        if self.in_channels < 1:
            errors.append(f"in_channels must be >= 1, got {self.in_channels}")
        factor = 2 ** max(self.levels - 1, 0)
        if self.variant != "ditto_point":
            for n in self.grid_shape:
                if n % factor or n // factor < 2:
                    errors.append(
                        f"grid axis {n} must be divisible by 2^(levels-1) = {factor} "
                        f"and keep >= 2 nodes at the coarsest level"
                    )
        for level in self.attention_levels or ():
            if not 0 <= level < self.levels:
                errors.append(f"attention level {level} outside 0..{self.levels - 1}")
        if self.conditioning_mode not in ("one_plus", "product"):
            errors.append(f"conditioning_mode must be 'one_plus' or 'product', got {self.conditioning_mode!r}")
        if self.variant == "baseline_unet" and self.conditioning_scalar_name is not None:
            errors.append("baseline_unet takes no conditioning input; set conditioning_scalar_name to null")
        if self.conditioned and not self.conditioning_scalar_name:
            errors.append(f"{self.variant} needs a conditioning_scalar_name")
        if self.point_flatten_order not in ("C", "F"):
            errors.append(f"point_flatten_order must be 'C' or 'F', got {self.point_flatten_order!r}")
        if not self.time_scale > 0:
            errors.append(f"time_scale must be > 0, got {self.time_scale}")
        if self.norm_groups < 1:
            errors.append(f"norm_groups must be >= 1, got {self.norm_groups}")
        if self.dtype not in ("float32", "float64"):
            errors.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        try:
            self.embedding.validate()
        except ConfigError as exc:
            errors.extend(exc.errors)
        if errors:
            raise ConfigError("invalid ModelConfig", errors)

    def to_manifest_properties(self) -> Dict[str, Any]:
        props = asdict(self)
        props["grid_shape"] = list(self.grid_shape)
        props["channel_mults"] = list(self.channel_mults)
        if self.attention_levels is not None:
            props["attention_levels"] = list(self.attention_levels)
        return props

    @classmethod
    def from_properties(cls, props: Dict[str, Any]) -> "ModelConfig":
        return cls(**props)

    def print_cli(self) -> None:
        """Print the ModelConfig in an easy-to-read CLI format."""
        _rule(f"MODEL: {self.variant} ({self.dimension}D)")
        print(f"  Grid:        {' x '.join(str(n) for n in self.grid_shape)}")
        print(f"  Channels:    {self.level_channels}")
        print(f"  Attention:   {list(self.resolved_attention_levels) if self.use_attention else 'off'}")
        print(f"  Softmax:     {self.attention_softmax}")
        print(f"  Embedding:   d_emb={self.embedding.d_emb} hidden={self.embedding.mlp_hidden}")
        print(f"  Conditioned: {self.conditioning_scalar_name or 'no'}")
        print(f"{'='*60}\n")


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class LossConfig:
    epsilon: float = 1e-8

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class BundlingConfig:
    """Look-forward window lf over a training horizon of nt steps.

    lf=1 is autoregression, lf=nt is the direct mapping, anything in between bundles.
    """
    lf: int
    nt: int
    condition_on_offset: bool = True
    exclude_final_window: bool = False

    @property
    def strategy_name(self) -> str:
        if self.lf == 1:
            return "autoregressive"
        if self.lf == self.nt:
            return "mapping"
        return "bundling"

    @property
    def sub_trajectory_count(self) -> int:
        return self.nt - self.lf + (0 if self.exclude_final_window else 1)

    def validate(self) -> None:
        if not 1 <= self.lf <= self.nt:
            raise ConfigError(f"look-forward window must satisfy 1 <= lf <= nt, got lf={self.lf}, nt={self.nt}")


@dataclass
class TrainingSchedule:
    """Strategy selector: full pairs, alpha sub-sampling, or lf bundling."""
    strategy: str = "full"
    alpha: float = 1.0
    bundling: Optional[BundlingConfig] = None

    def __post_init__(self):
        if isinstance(self.bundling, dict):
            self.bundling = BundlingConfig(**self.bundling)

    def validate(self) -> None:
        errors = []
        if self.strategy not in STRATEGIES:
            errors.append(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0 < self.alpha <= 1:
            errors.append(f"alpha must satisfy 0 < alpha <= 1 (sub-sampling for some alpha < 1, "
                          f"alpha = 1 is the full-data case), got {self.alpha}")
        if self.strategy == "bundled":
            if self.bundling is None:
                errors.append("bundled strategy needs a bundling block")
            else:
                try:
                    self.bundling.validate()
                except ConfigError as exc:
                    errors.extend(exc.errors)
        if errors:
            raise ConfigError("invalid TrainingSchedule", errors)


@dataclass
class OptimizerConfig:
    """Adam with cosine annealing from lr0 to 0 over total_steps."""
    lr0: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip: Optional[float] = 1.0
    total_steps: Optional[int] = None
    seed: int = 0

    def validate(self) -> None:
        errors = []
        if not self.lr0 > 0:
            errors.append(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append(f"adam moments must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0:
            errors.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            errors.append(f"grad_clip must be > 0 or null, got {self.grad_clip}")
        if self.total_steps is not None and self.total_steps < 1:
            errors.append(f"total_steps must be >= 1, got {self.total_steps}")
        if errors:
            raise ConfigError("invalid OptimizerConfig", errors)


# ============================================================================
# ROLLOUT / EVALUATION
# ============================================================================

@dataclass
class RolloutConfig:
    lf: int
    horizon: int
    train_horizon: Optional[int] = None
    condition_on_offset: bool = True

    def validate(self) -> None:
        if not 1 <= self.lf <= self.horizon:
            raise ConfigError(f"rollout needs horizon >= lf >= 1, got lf={self.lf}, horizon={self.horizon}")


@dataclass
class EvalRow:
    """One report line: mean +- std of rel-L2 over test trajectories at one axis value."""
    scenario: str
    variant: str
    axis: str
    value: float
    mean: float
    std: float

    def to_manifest_properties(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    curves: Dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, scenario: str, variant: str, axis: str, value: float, errors: np.ndarray) -> EvalRow:
        errors = np.asarray(errors, dtype=np.float64)
        row = EvalRow(scenario=scenario, variant=variant, axis=axis, value=float(value),
                      mean=float(errors.mean()), std=float(errors.std()))
        self.rows.append(row)
        return row

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        self.curves.update(other.curves)
        return self

    def select(self, axis: str) -> List[EvalRow]:
        return [row for row in self.rows if row.axis == axis]

    def print_cli(self) -> None:
        """Print the EvalReport in an easy-to-read CLI format."""
        _rule("EVALUATION REPORT")
        for row in self.rows:
            print(f"  {row.scenario:<20} {row.variant:<14} {row.axis}={row.value:<8g} "
                  f"rel-L2 {row.mean:.4e} +- {row.std:.2e}")
        print(f"{'='*60}\n")
