"""
Desk-scale reproduction runs. Minutes to an hour each on a workstation, so
they only run with DITTO_RUN_SLOW=1.
"""

from dataclasses import replace

import numpy as np
import pytest

from ditto.datagen import generate_bundle, subsample_times, truncate_times
from ditto.network import build_model
from ditto.pod import pod_pipeline
from ditto.recipes import get_recipe
from ditto.rollout import eval_extrapolation, eval_superresolution, evaluate_clean, noise_sweep
from ditto.schema import BundlingConfig, OptimizerConfig, RolloutConfig, TrainingSchedule, Trajectory
from ditto.training import train

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def burgers_data():
    recipe = get_recipe("burgers-nu0.01")
    full = generate_bundle(recipe.pde, recipe.data.count, recipe.data.seed, ratios=recipe.data.ratios,
                           workers=4, progress=False)
    return recipe, full


def _train_burgers(recipe, full, schedule=None, **model_overrides):
    model = build_model(replace(recipe.model, **model_overrides))
    train(model, subsample_times(full, recipe.data.train_steps), schedule or recipe.training, recipe.loss,
          recipe.optimizer, progress=False)
    return model


@pytest.fixture(scope="module")
def burgers_model(burgers_data):
    recipe, full = burgers_data
    return _train_burgers(recipe, full)


def test_burgers_reproduction(burgers_data, burgers_model):
    recipe, full = burgers_data
    errors = evaluate_clean(burgers_model, subsample_times(full, recipe.data.train_steps))
    assert errors.mean() <= 0.05
    rows = eval_superresolution(burgers_model, full, [10, 50, 200]).rows
    means = [row.mean for row in rows]
    assert max(means) / min(means) <= 2.0
    print(f"✓ Burgers test rel-L2 {errors.mean():.4f}, super-resolution spread {max(means) / min(means):.2f}")


def test_baseline_degrades_off_the_training_resolution(burgers_data, burgers_model):
    """The fixed-step baseline is only right at N_t^train=50; ditto stays flat across resolutions."""
    recipe, full = burgers_data
    one_step = TrainingSchedule("bundled", bundling=BundlingConfig(lf=1, nt=recipe.data.train_steps))
    baseline = _train_burgers(recipe, full, schedule=one_step, variant="baseline_unet",
                              conditioning_scalar_name=None)
    base = {row.value: row.mean for row in eval_superresolution(baseline, full, [50, 200]).rows}
    assert base[200] >= 2.0 * base[50]
    means = [row.mean for row in eval_superresolution(burgers_model, full, [50, 200]).rows]
    assert max(means) / min(means) <= 2.0
    print(f"✓ Baseline rel-L2 {base[50]:.4f} at N_t=50, {base[200]:.4f} at N_t=200")


def test_attention_ablation_direction(burgers_data, burgers_model):
    recipe, full = burgers_data
    ablated = _train_burgers(recipe, full, use_attention=False)
    data = subsample_times(full, recipe.data.train_steps)
    assert evaluate_clean(ablated, data).mean() > evaluate_clean(burgers_model, data).mean()


def test_noise_error_grows_with_gamma(burgers_data, burgers_model):
    _, full = burgers_data
    report = noise_sweep(burgers_model, full, [0.0, 0.1, 0.2, 0.3, 0.5, 1.0], seeds=(0, 1, 2, 3, 4))
    means = [row.mean for row in report.rows]
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_navier_stokes_lf_sweep_has_interior_minimum():
    recipe = get_recipe("extrap-ns-lf-sweep")
    full = generate_bundle(recipe.pde, recipe.data.count, recipe.data.seed, ratios=recipe.data.ratios,
                           workers=4, progress=False)
    train_data = truncate_times(full, recipe.eval.train_horizon)
    finals = {}
    sweep = recipe.eval.lf_sweep
    for lf in sweep:
        model = build_model(recipe.model)
        schedule = TrainingSchedule("bundled", bundling=BundlingConfig(lf=lf, nt=recipe.eval.train_horizon))
        train(model, train_data, schedule, recipe.loss, replace(recipe.optimizer, epochs=30), progress=False)
        report = eval_extrapolation(model, full, RolloutConfig(lf=lf, horizon=recipe.eval.horizon,
                                                               train_horizon=recipe.eval.train_horizon))
        finals[lf] = report.select("lf")[0].mean
    ends = min(finals[sweep[0]], finals[sweep[-1]])
    assert any(finals[lf] <= ends for lf in sweep[1:-1])
    print("✓ lf sweep final errors " + ", ".join(f"{lf}: {finals[lf]:.4f}" for lf in sweep))


def test_planted_seasonal_forecast():
    """Five orthonormal modes with yearly coefficients, forecast over one period from the test start."""
    period, size, years = 73, 256, 6
    rng = np.random.default_rng(0)
    modes, _ = np.linalg.qr(rng.standard_normal((size, 5)))
    t = np.arange(period * years)
    coefficients = np.stack([(5.0 - k) * np.sin(2 * np.pi * (k % 2 + 1) * t / period + k) for k in range(5)], axis=1)
    series = Trajectory(grid=[np.arange(float(size))], times=t / period, fields=10.0 + coefficients @ modes.T)
    result = pod_pipeline(series, r=5, lf=period // 2, horizon=period,
                          opt_cfg=OptimizerConfig(epochs=300, batch_size=32, lr0=2e-3), progress=False)
    assert result.errors[0][1:].mean() <= 0.05
    print(f"✓ Seasonal forecast rel-L2 {result.errors[0][1:].mean():.4f}")
