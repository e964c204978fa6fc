"""
Loss, sampling strategies and the training loop on toy bundles.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from ditto.conftest import make_toy_bundle, small_config
from ditto.errors import ConfigError, NumericalError
from ditto.network import build_model
from ditto.schema import BundlingConfig, DatasetBundle, LossConfig, OptimizerConfig, TrainingSchedule, Trajectory
from ditto.training import (
    bundle_starts, build_pair_index, cosine_lr, evaluate_pairs, make_bundled_pairs, pair_dataset, pair_scalars,
    relative_l2_loss, subsample_epoch, subsample_total, train,
)


# ============================================================================
# LOSS
# ============================================================================

def test_relative_l2_loss_examples():
    pred = torch.tensor([[1.0, 0.0], [3.0, 4.0]], dtype=torch.float64)
    target = torch.tensor([[0.0, 1.0], [3.0, 4.0]], dtype=torch.float64)
    loss = relative_l2_loss(pred, target, LossConfig(epsilon=1e-12))
    assert math.isclose(float(loss), math.sqrt(2.0) / 2.0, rel_tol=1e-9)
    single = relative_l2_loss(torch.tensor([2.0, 0.0]), torch.tensor([1.0, 0.0]))
    assert math.isclose(float(single), 1.0, rel_tol=1e-6)
    print("✓ Relative L2 loss examples")


def test_relative_l2_loss_is_zero_only_at_target():
    target = torch.randn(4, 3, 5)
    assert float(relative_l2_loss(target.clone(), target)) == 0.0
    assert float(relative_l2_loss(target + 0.01, target)) > 0.0
    assert float(relative_l2_loss(torch.zeros(3), torch.zeros(3))) == 0.0


def test_relative_l2_loss_rejects_bad_input():
    with pytest.raises(ConfigError):
        relative_l2_loss(torch.zeros(2, 3), torch.zeros(3, 2))
    with pytest.raises(ConfigError):
        relative_l2_loss(torch.zeros(2), torch.zeros(2), 0.0)


# ============================================================================
# SUB-SAMPLING
# ============================================================================

def test_subsample_totals():
    for alpha, expected in ((0.05, 250), (0.1, 500), (0.2, 1000), (1.0, 5000)):
        subsets = subsample_epoch(100, 50, alpha, seed=1)
        sizes = [len(s) for s in subsets]
        assert sum(sizes) == expected == subsample_total(100, 50, alpha)
        assert max(sizes) - min(sizes) <= 1
        for subset in subsets:
            assert len(set(subset.tolist())) == len(subset)
            assert subset.min() >= 1 and subset.max() <= 50
    print("✓ Sub-sampling totals")


def test_subsample_full_alpha_selects_everything():
    subsets = subsample_epoch(3, 7, 1.0, seed=0)
    for subset in subsets:
        np.testing.assert_array_equal(subset, np.arange(1, 8))


def test_subsample_resamples_each_epoch_and_covers_all_pairs():
    first = subsample_epoch(4, 50, 0.1, seed=2, epoch=0)
    second = subsample_epoch(4, 50, 0.1, seed=2, epoch=1)
    assert any(not np.array_equal(a, b) for a, b in zip(first, second))
    again = subsample_epoch(4, 50, 0.1, seed=2, epoch=0)
    assert all(np.array_equal(a, b) for a, b in zip(first, again))
    seen = [set() for _ in range(4)]
    for epoch in range(200):
        for m, subset in enumerate(subsample_epoch(4, 50, 0.1, seed=2, epoch=epoch)):
            seen[m].update(subset.tolist())
    assert all(s == set(range(1, 51)) for s in seen)


def test_subsample_rejects_empty_selection():
    with pytest.raises(ConfigError):
        subsample_epoch(1, 10, 0.001, seed=0)
    with pytest.raises(ConfigError):
        subsample_epoch(2, 10, 1.5, seed=0)


def test_subsample_loss_is_unbiased():
    """Averaging the sub-sampled epoch loss over 1000 draws recovers the full-pair loss."""
    rng = np.random.default_rng(0)
    M, T, alpha = 6, 20, 0.1
    per_pair = rng.gamma(2.0, 0.5, size=(M, T))
    draws = []
    for epoch in range(1000):
        subsets = subsample_epoch(M, T, alpha, seed=9, epoch=epoch)
        picked = np.concatenate([per_pair[m, s - 1] for m, s in enumerate(subsets)])
        draws.append(picked.mean())
    draws = np.array(draws)
    sigma = draws.std() / math.sqrt(len(draws))
    assert abs(draws.mean() - per_pair.mean()) < 4 * sigma + 1e-12


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert math.isclose(cosine_lr(50, 100, 1e-3), 5e-4)
    assert abs(cosine_lr(100, 100, 1e-3)) < 1e-18
    with pytest.raises(ConfigError):
        cosine_lr(101, 100, 1e-3)


# ============================================================================
# BUNDLING
# ============================================================================

def test_bundled_sub_trajectory_counts():
    assert [len(bundle_starts(100, lf)) for lf in (1, 20, 100)] == [100, 81, 1]
    assert len(bundle_starts(1095, 365, exclude_final_window=True)) == 730
    assert len(bundle_starts(1095, 365)) == 731
    assert BundlingConfig(lf=20, nt=100).sub_trajectory_count == 81
    with pytest.raises(ConfigError):
        bundle_starts(10, 11)
    with pytest.raises(ConfigError) as excinfo:
        BundlingConfig(lf=0, nt=10).validate()
    assert "1 <= lf <= nt" in str(excinfo.value)


def test_bundling_strategy_names():
    assert BundlingConfig(lf=1, nt=10).strategy_name == "autoregressive"
    assert BundlingConfig(lf=10, nt=10).strategy_name == "mapping"
    assert BundlingConfig(lf=4, nt=10).strategy_name == "bundling"


def test_make_bundled_pairs_offsets_and_absolute_times():
    times = np.linspace(0.0, 1.0, 11)
    traj = Trajectory(grid=[np.arange(3.0)], times=times, fields=np.arange(33.0).reshape(11, 3))
    pairs = make_bundled_pairs(traj, 4)
    assert len(pairs) == 7
    np.testing.assert_allclose(pairs.scalars[2], [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(pairs.inputs[2], traj.fields[2])
    np.testing.assert_array_equal(pairs.targets[2, -1], traj.fields[6])
    absolute = make_bundled_pairs(traj, BundlingConfig(lf=4, nt=10, condition_on_offset=False))
    np.testing.assert_allclose(absolute.scalars[2], times[3:7])


def test_extreme_windows_recover_autoregression_and_mapping():
    bundle = make_toy_bundle(M=3, T=6)
    auto = build_pair_index(bundle, TrainingSchedule("bundled", bundling=BundlingConfig(lf=1, nt=6)))
    assert {(int(s), int(t)) for _, s, t in auto} == {(s, s + 1) for s in range(6)}
    mapping = build_pair_index(bundle, TrainingSchedule("bundled", bundling=BundlingConfig(lf=6, nt=6)))
    full = build_pair_index(bundle, TrainingSchedule("full"))
    np.testing.assert_array_equal(mapping, full)
    scalars = pair_scalars(bundle, mapping, TrainingSchedule("bundled", bundling=BundlingConfig(lf=6, nt=6)))
    np.testing.assert_allclose(scalars, pair_scalars(bundle, full, TrainingSchedule("full")))


def test_schedule_validation_messages():
    with pytest.raises(ConfigError) as excinfo:
        TrainingSchedule("subsample", alpha=1.5).validate()
    assert "for some alpha < 1" in str(excinfo.value)
    with pytest.raises(ConfigError):
        TrainingSchedule("bundled").validate()
    with pytest.raises(ConfigError):
        build_pair_index(make_toy_bundle(M=2, T=4),
                         TrainingSchedule("bundled", bundling=BundlingConfig(lf=2, nt=8)))


# ============================================================================
# TRAINING LOOP
# ============================================================================

def _quick_optimizer(**overrides) -> OptimizerConfig:
    props = dict(lr0=1e-3, epochs=2, batch_size=4, seed=0)
    props.update(overrides)
    return OptimizerConfig(**props)


def test_full_alpha_epoch_equals_full_loss():
    bundle = make_toy_bundle(M=4, T=6)
    model = build_model(small_config())
    full_schedule = TrainingSchedule("full")
    full = build_pair_index(bundle, full_schedule)
    sampled_schedule = TrainingSchedule("subsample", alpha=1.0)
    sampled = build_pair_index(bundle, sampled_schedule, epoch=3, seed=5)
    a = evaluate_pairs(model, bundle, full, pair_scalars(bundle, full, full_schedule))
    b = evaluate_pairs(model, bundle, sampled, pair_scalars(bundle, sampled, sampled_schedule))
    assert abs(a - b) < 1e-6


def test_adam_with_zero_gradient_keeps_parameters():
    model = build_model(small_config())
    before = [p.detach().clone() for p in model.parameters()]
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-2)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    optimizer.step()
    assert all(torch.equal(a, p) for a, p in zip(before, model.parameters()))


def test_train_is_reproducible_and_keeps_best_state(tmp_path):
    bundle = make_toy_bundle(M=6, T=4)
    results = []
    for run in range(2):
        model = build_model(small_config())
        result = train(model, bundle, TrainingSchedule("subsample", alpha=0.5), opt_cfg=_quick_optimizer(),
                       progress=False, output_dir=tmp_path / f"run{run}")
        results.append(result)
    a, b = results
    assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]
    assert [r.val_loss for r in a.history] == [r.val_loss for r in b.history]
    assert a.best_val_loss == min(r.val_loss for r in a.history)
    history = (tmp_path / "run0" / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_loss,lr"
    assert len(history) == 3
    assert (tmp_path / "run0" / "checkpoint" / "manifest.json").exists()
    print("✓ Training is reproducible")


def test_train_reduces_loss_with_bundling():
    bundle = make_toy_bundle(M=6, T=4)
    model = build_model(small_config())
    schedule = TrainingSchedule("bundled", bundling=BundlingConfig(lf=2, nt=4))
    result = train(model, bundle, schedule, opt_cfg=_quick_optimizer(epochs=15, lr0=5e-3), progress=False)
    assert result.history[-1].train_loss < result.history[0].train_loss
    assert result.total_steps == 15 * math.ceil(4 * 3 * 2 / 4)
    assert result.history[-1].lr < 5e-3


def test_train_needs_train_and_val_splits():
    bundle = make_toy_bundle(M=3, T=4, splits=["train", "train", "test"])
    with pytest.raises(ConfigError):
        train(build_model(small_config()), bundle, TrainingSchedule("full"), progress=False)


def test_non_finite_loss_restores_state(tmp_path):
    bundle = make_toy_bundle(M=4, T=4)
    fields = bundle.fields.copy()
    fields[bundle.indices("train")] = np.inf
    bundle = replace(bundle, fields=fields)
    model = build_model(small_config())
    before = {k: v.clone() for k, v in model.state_dict().items()}
    with pytest.raises(NumericalError):
        train(model, bundle, TrainingSchedule("full"), opt_cfg=_quick_optimizer(), progress=False,
              output_dir=tmp_path)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert (tmp_path / "checkpoint" / "manifest.json").exists()




def test_baseline_trains_only_as_a_one_step_map():
    bundle = make_toy_bundle(M=4, T=4)
    config = small_config(variant="baseline_unet", conditioning_scalar_name=None)
    with pytest.raises(ConfigError, match="lf=1"):
        train(build_model(config), bundle, TrainingSchedule("full"), progress=False)
    schedule = TrainingSchedule("bundled", bundling=BundlingConfig(lf=1, nt=4))
    result = train(build_model(config), bundle, schedule, opt_cfg=_quick_optimizer(), progress=False)
    assert len(result.history) == 2


def _grid_bundle_2d(M: int = 4, T: int = 3, shape=(4, 6)) -> DatasetBundle:
    axes = [np.arange(n) / n for n in shape]
    times = np.linspace(0.0, 1.0, T + 1)
    x, y = np.meshgrid(*axes, indexing="ij")
    fields = np.stack([np.stack([np.sin(2 * np.pi * (x + m * 0.1)) * np.cos(2 * np.pi * y) * np.exp(-t)
                                 for t in times]) for m in range(M)])
    return DatasetBundle(kind="navier_stokes", grid=axes, times=times, fields=fields,
                         splits=["train", "train", "val", "test"][:M], seeds=list(range(M)))


def test_point_variant_trains_on_a_2d_grid():
    """Point models see flattened (N,) fields in training, matching what query() feeds them."""
    bundle = _grid_bundle_2d()
    model = build_model(small_config(variant="ditto_point", dimension=2, grid_shape=(4, 6)))
    schedule = TrainingSchedule("full")
    index = build_pair_index(bundle, schedule)
    source, scalar, target = pair_dataset(model, bundle, index, pair_scalars(bundle, index, schedule))[0]
    assert source.shape == (24,) and target.shape == (24,) and scalar.shape == ()
    result = train(model, bundle, schedule, opt_cfg=_quick_optimizer(), progress=False)
    assert len(result.history) == 2
    assert all(np.isfinite(r.train_loss) and np.isfinite(r.val_loss) for r in result.history)
    print("✓ Point variant trains on a 4x6 grid")


if __name__ == "__main__":
    print("Running training tests...\n")
    test_relative_l2_loss_examples()
    test_subsample_totals()
    test_bundled_sub_trajectory_counts()
    test_cosine_lr()
    print("\n✅ Training tests passed")
