"""
Named experiment presets.

A recipe bundles the reference-solver setup, the model, the training
schedule and the evaluation plan of one experiment. Config files start
from a recipe and override individual keys.
"""

from dataclasses import dataclass, asdict, field, replace
from typing import Any, Dict, List, Optional, Tuple

from ditto.errors import ConfigError
from ditto.schema import (
    SCHEMA_VERSION, BundlingConfig, LossConfig, ModelConfig, OptimizerConfig, PdeConfig, TrainingSchedule, _rule,
)

EVAL_MODES = ("superres", "extrap", "noise")
DEFAULT_RECIPE = "burgers-nu0.01"


@dataclass
class DataPlan:
    """How many trajectories to generate and how to feed them to training.

    Data is generated at the finest evaluation resolution; ``train_steps``
    subsamples it to N_t^train for training.
    """
    count: int = 320
    seed: int = 0
    ratios: Tuple[float, ...] = (0.8, 0.1, 0.1)
    workers: int = 1
    train_steps: Optional[int] = None

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)

    def validate(self) -> None:
        errors = []
        if self.count < 1:
            errors.append(f"count must be >= 1, got {self.count}")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            errors.append(f"ratios must be three non-negative numbers summing to 1, got {list(self.ratios)}")
        if self.workers < 1:
            errors.append(f"workers must be >= 1, got {self.workers}")
        if self.train_steps is not None and self.train_steps < 1:
            errors.append(f"train_steps must be >= 1, got {self.train_steps}")
        if errors:
            raise ConfigError("invalid DataPlan", errors)


@dataclass
class EvalPlan:
    modes: Tuple[str, ...] = ("superres",)
    resolutions: Tuple[int, ...] = (10, 20, 50, 100, 200)
    gammas: Tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.5, 1.0)
    noise_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    lf_sweep: Tuple[int, ...] = ()
    horizon: Optional[int] = None
    train_horizon: Optional[int] = None

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.resolutions = tuple(int(n) for n in self.resolutions)
        self.gammas = tuple(float(g) for g in self.gammas)
        self.noise_seeds = tuple(int(s) for s in self.noise_seeds)
        self.lf_sweep = tuple(int(lf) for lf in self.lf_sweep)

    def validate(self) -> None:
        errors = []
        unknown = [m for m in self.modes if m not in EVAL_MODES]
        if unknown:
            errors.append(f"eval modes must be among {EVAL_MODES}, got {unknown}")
        if any(n < 1 for n in self.resolutions):
            errors.append(f"every N_t^test must be >= 1, got {list(self.resolutions)}")
        if any(g < 0 for g in self.gammas):
            errors.append(f"noise levels must be >= 0, got {list(self.gammas)}")
        if any(lf < 1 for lf in self.lf_sweep):
            errors.append(f"look-forward windows must be >= 1, got {list(self.lf_sweep)}")
        if self.horizon is not None and self.train_horizon is not None and self.train_horizon > self.horizon:
            errors.append(f"train_horizon {self.train_horizon} exceeds horizon {self.horizon}")
        if errors:
            raise ConfigError("invalid EvalPlan", errors)


@dataclass
class ExperimentRecipe:
    name: str
    description: str
    pde: PdeConfig
    model: ModelConfig
    training: TrainingSchedule = field(default_factory=TrainingSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataPlan = field(default_factory=DataPlan)
    eval: EvalPlan = field(default_factory=EvalPlan)
    dataset_path: Optional[str] = None
    output_dir: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        """Validate every section plus the cross-section constraints; all problems in one ConfigError."""
        errors = []
        for section in ("pde", "model", "training", "optimizer", "loss", "data", "eval"):
            try:
                getattr(self, section).validate()
            except ConfigError as exc:
                errors.extend(f"{section}: {message}" for message in exc.errors)
        if not errors:
            errors.extend(self._cross_checks())
        if errors:
            raise ConfigError(f"invalid experiment {self.name!r}", errors)

    def _cross_checks(self) -> List[str]:
        errors = []
        if self.model.dimension != self.pde.dimension:
            errors.append(f"model.dimension {self.model.dimension} != {self.pde.kind} dimension {self.pde.dimension}")
        if tuple(self.model.grid_shape) != tuple(self.pde.grid):
            errors.append(f"model.grid_shape {self.model.grid_shape} != pde.grid {tuple(self.pde.grid)}")
        if self.data.train_steps is not None and self.pde.n_steps % self.data.train_steps:
            errors.append(f"data.train_steps {self.data.train_steps} must divide pde.n_steps {self.pde.n_steps}")
        available = self.eval.train_horizon or self.data.train_steps or self.pde.n_steps
        if self.training.strategy == "bundled" and self.training.bundling.nt > available:
            errors.append(f"training.bundling.nt {self.training.bundling.nt} exceeds the {available} training steps")
        if "superres" in self.eval.modes:
            too_fine = [n for n in self.eval.resolutions if self.pde.n_steps % n]
            if too_fine:
                errors.append(f"eval.resolutions {too_fine} do not divide pde.n_steps {self.pde.n_steps}")
        if self.eval.horizon is not None and self.eval.horizon > self.pde.n_steps:
            errors.append(f"eval.horizon {self.eval.horizon} exceeds pde.n_steps {self.pde.n_steps}")
        return errors

    def to_manifest_properties(self) -> Dict[str, Any]:
        props = asdict(self)
        props["pde"] = self.pde.to_manifest_properties()
        props["model"] = self.model.to_manifest_properties()
        return _lists(props)

    def print_cli(self) -> None:
        """Print the ExperimentRecipe in an easy-to-read CLI format."""
        _rule(f"RECIPE: {self.name}")
        print(f"  {self.description}")
        print(f"  PDE:        {self.pde.kind} grid={'x'.join(str(n) for n in self.pde.grid)} "
              f"nu={self.pde.viscosity} t_final={self.pde.t_final} steps={self.pde.n_steps}")
        print(f"  Model:      {self.model.variant} attention={'on' if self.model.use_attention else 'off'}")
        strategy = self.training.strategy
        if strategy == "subsample":
            strategy += f" alpha={self.training.alpha}"
        elif strategy == "bundled":
            strategy += f" lf={self.training.bundling.lf} nt={self.training.bundling.nt}"
        print(f"  Training:   {strategy}, {self.optimizer.epochs} epochs")
        print(f"  Evaluation: {', '.join(self.eval.modes)}")
        print(f"{'='*60}\n")


def _lists(value):
    if isinstance(value, dict):
        return {key: _lists(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_lists(item) for item in value]
    return value


# ============================================================================
# PRESETS
# ============================================================================

def _burgers(name: str, description: str, viscosity: float, t_final: float, nx: int, **overrides) -> ExperimentRecipe:
    recipe = ExperimentRecipe(
        name=name,
        description=description,
        pde=PdeConfig(kind="burgers", viscosity=viscosity, t_final=t_final, n_steps=200, grid=(nx,)),
        model=ModelConfig(variant="ditto", dimension=1, grid_shape=(nx,), time_scale=100.0 / t_final),
        training=TrainingSchedule(strategy="subsample", alpha=0.1),
        optimizer=OptimizerConfig(epochs=100, batch_size=32),
        data=DataPlan(count=320, train_steps=50),
        eval=EvalPlan(modes=("superres",)),
    )
    return replace(recipe, **overrides)


def _navier_stokes(name: str, description: str, viscosity: float, t_final: float, **overrides) -> ExperimentRecipe:
    recipe = ExperimentRecipe(
        name=name,
        description=description,
        pde=PdeConfig(kind="navier_stokes", viscosity=viscosity, t_final=t_final, n_steps=200, grid=(64, 64),
                      forcing_id="diagonal_sincos"),
        model=ModelConfig(variant="ditto", dimension=2, grid_shape=(64, 64), time_scale=100.0 / t_final),
        training=TrainingSchedule(strategy="subsample", alpha=0.1),
        optimizer=OptimizerConfig(epochs=60, batch_size=16),
        data=DataPlan(count=64, train_steps=50),
        eval=EvalPlan(modes=("superres",)),
    )
    return replace(recipe, **overrides)


def _wave(name: str, description: str, grid: Tuple[int, ...], speed: str) -> ExperimentRecipe:
    kind = "wave2d" if len(grid) == 2 else "wave3d"
    return ExperimentRecipe(
        name=name,
        description=description,
        pde=PdeConfig(kind=kind, t_final=2.0, n_steps=200, grid=grid, wave_speed_id=speed),
        model=ModelConfig(variant="ditto", dimension=len(grid), grid_shape=grid, time_scale=50.0,
                          base_channels=16 if len(grid) == 3 else 32),
        training=TrainingSchedule(strategy="subsample", alpha=0.1),
        optimizer=OptimizerConfig(epochs=60, batch_size=8 if len(grid) == 3 else 16),
        data=DataPlan(count=64 if len(grid) == 3 else 128, train_steps=50),
        eval=EvalPlan(modes=("superres",)),
    )


def _build_recipes() -> Dict[str, ExperimentRecipe]:
    base = _burgers(DEFAULT_RECIPE, "1D Burgers, nu=0.01, t_final=1, N_x=128, alpha=0.1 sub-sampling",
                    0.01, 1.0, 128)
    ns20 = _navier_stokes("ns-re20", "2D Navier-Stokes vorticity, nu=1e-3 (Re~20), t_final=50", 1e-3, 50.0)
    recipes = [
        base,
        _burgers("burgers-nu0.001", "1D Burgers, nu=0.001, t_final=1, N_x=256", 0.001, 1.0, 256),
        _burgers("burgers-nu0.001-t2", "1D Burgers, nu=0.001, t_final=2, N_x=256", 0.001, 2.0, 256),
        ns20,
        _navier_stokes("ns-re2000", "2D Navier-Stokes vorticity, nu=1e-5 (Re~2000), t_final=20", 1e-5, 20.0),
        _wave("wave2d", "2D acoustic wave, c = 1 + sin(x) sin(y), 64x64, t_final=2", (64, 64), "sin_product"),
        _wave("wave3d", "3D acoustic wave, c = 1 + sin(2x) sin(y) sin(z), 32^3, t_final=2", (32, 32, 32),
              "sin_product_3d"),
        replace(
            ns20,
            name="extrap-ns-lf-sweep",
            description="NS Re~20, train on steps 0-100 with bundling, roll out to 200; lf in {1,5,10,20,50,100}",
            pde=replace(ns20.pde, t_final=20.0),
            # offsets reach lf * dt = 10 for lf=100
            model=replace(ns20.model, time_scale=10.0),
            training=TrainingSchedule(strategy="bundled", bundling=BundlingConfig(lf=20, nt=100)),
            data=replace(ns20.data, train_steps=None),
            eval=EvalPlan(modes=("extrap",), lf_sweep=(1, 5, 10, 20, 50, 100), horizon=200, train_horizon=100),
        ),
        replace(
            base,
            name="noise-sweep",
            description="Point variant on 1D Burgers, test inputs perturbed by gamma * sigma_D noise",
            model=replace(base.model, variant="ditto_point"),
            eval=EvalPlan(modes=("noise",)),
        ),
        replace(base, name="ablation-attention", description="1D Burgers with every attention layer removed",
                model=replace(base.model, use_attention=False)),
    ]
    for alpha in (0.05, 0.2, 1.0):
        recipes.append(replace(base, name=f"ablation-alpha-{alpha:g}",
                               description=f"1D Burgers, alpha={alpha:g} sub-sampling",
                               training=TrainingSchedule(strategy="subsample", alpha=alpha)))
    return {recipe.name: recipe for recipe in recipes}


RECIPES = _build_recipes()


def get_recipe(name: str) -> ExperimentRecipe:
    """A fresh copy of the preset, safe to modify."""
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; available: {', '.join(sorted(RECIPES))}")
    recipe = RECIPES[name]
    return replace(
        recipe,
        pde=replace(recipe.pde),
        model=replace(recipe.model, embedding=replace(recipe.model.embedding)),
        training=replace(recipe.training,
                         bundling=replace(recipe.training.bundling) if recipe.training.bundling else None),
        optimizer=replace(recipe.optimizer),
        loss=replace(recipe.loss),
        data=replace(recipe.data),
        eval=replace(recipe.eval),
    )


def recipe_for_kind(kind: str) -> ExperimentRecipe:
    """Default preset of a PDE kind, used by gen-data when only --pde is given."""
    return get_recipe({"burgers": DEFAULT_RECIPE, "navier_stokes": "ns-re20", "wave2d": "wave2d",
                       "wave3d": "wave3d"}[kind])
