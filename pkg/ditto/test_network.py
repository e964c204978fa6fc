"""
Network building blocks and the assembled variants.
Gradient checks run in float64 against central finite differences.
"""

import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from ditto.conftest import small_config
from ditto.errors import ConfigError
from ditto.network import (
    Attention, ConditionedResBlock, ConditioningHead, SkipGate, build_model, conditioning_head, embed_scalar,
    flatten_field, forward, gates, grid_coordinate_matrix, parameter_count, point_forward, unflatten_field,
)
from ditto.schema import EmbeddingSpec, ModelConfig


def _parameter_gradcheck(module, *args) -> bool:
    names = [name for name, _ in module.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())

    def fn(*values):
        return functional_call(module, dict(zip(names, values)), args)

    return gradcheck(fn, params, eps=1e-6, atol=1e-8, rtol=1e-4)


# ============================================================================
# EMBEDDING AND HEAD
# ============================================================================

def test_embedding_values():
    """t=0 gives sin slots 0 and cos slots 1; slot 0 of t=1 is sin(1)."""
    zero = embed_scalar(0.0, 8)
    assert torch.equal(zero[0::2], torch.zeros(4))
    assert torch.equal(zero[1::2], torch.ones(4))
    one = embed_scalar(torch.tensor(1.0, dtype=torch.float64), 4)
    expected = [math.sin(1.0), math.cos(1.0), math.sin(0.01), math.cos(0.01)]
    np.testing.assert_allclose(one.numpy(), expected, rtol=1e-12)
    print("✓ Sinusoidal embedding values")


def test_embedding_is_lipschitz():
    t = torch.linspace(0.0, 50.0, 200, dtype=torch.float64)
    codes = embed_scalar(t, 64)
    step = (codes[1:] - codes[:-1]).norm(dim=1)
    assert torch.all(step <= (t[1] - t[0]) * math.sqrt(32) + 1e-12)


def test_embedding_batches_and_rejects_bad_input():
    codes = embed_scalar(torch.tensor([0.5, 1.5]), EmbeddingSpec(d_emb=6))
    assert codes.shape == (2, 6)
    with pytest.raises(ConfigError):
        embed_scalar(-0.1, 8)
    with pytest.raises(ConfigError):
        embed_scalar(float("nan"), 8)
    with pytest.raises(ConfigError):
        embed_scalar(1.0, 7)


def test_conditioning_head_with_zero_weights_returns_biases(float64):
    model = build_model(small_config(dtype="float64"))
    with torch.no_grad():
        for module in [model.head.fc1, model.head.fc2] + [b.cond_proj for b in model.resnet_blocks().values()]:
            module.weight.zero_()
    e = embed_scalar(torch.tensor([0.7]), model.config.embedding)
    coefficients = conditioning_head(model, e)
    for name, block in model.resnet_blocks().items():
        assert coefficients[name].shape == (1, block.out_channels)
        assert torch.equal(coefficients[name][0], block.cond_proj.bias)


def test_conditioning_head_gradients(float64):
    torch.manual_seed(0)
    head = ConditioningHead(EmbeddingSpec(d_emb=8, mlp_hidden=6))
    e = torch.randn(3, 8, requires_grad=True)
    assert gradcheck(head, (e,), eps=1e-6, atol=1e-8, rtol=1e-4)
    assert _parameter_gradcheck(head, e.detach())


# ============================================================================
# RESNET BLOCK
# ============================================================================

def test_block_with_zero_coefficients_is_unconditioned(float64):
    torch.manual_seed(1)
    block = ConditionedResBlock(2, 4, 8, cond_width=5)
    h = torch.randn(2, 4, 6, 6)
    assert torch.equal(block(h, torch.zeros(2, 8)), block(h, None))


def test_block_conditioning_is_linear_in_one_plus_s(float64):
    """With norms and activations stripped, doubling (1+s) doubles the conditioned branch."""
    torch.manual_seed(2)
    block = ConditionedResBlock(1, 4, 4, cond_width=3)
    for name in ("norm1", "act1", "norm2", "act2"):
        setattr(block, name, torch.nn.Identity())
    with torch.no_grad():
        block.conv2.bias.zero_()
    h = torch.randn(2, 4, 10)
    s1 = torch.randn(2, 4)
    s2 = 2.0 * (1.0 + s1) - 1.0
    branch1 = block(h, s1) - block.skip(h)
    branch2 = block(h, s2) - block.skip(h)
    torch.testing.assert_close(branch2, 2.0 * branch1, rtol=1e-12, atol=1e-12)


def test_block_rejects_channel_mismatch():
    block = ConditionedResBlock(1, 4, 8, cond_width=3)
    with pytest.raises(ConfigError):
        block(torch.randn(1, 4, 8), torch.randn(1, 5))


def test_block_gradients(float64):
    torch.manual_seed(3)
    block = ConditionedResBlock(2, 3, 4, cond_width=2, max_groups=2)
    h = torch.randn(1, 3, 4, 4, requires_grad=True)
    s = torch.randn(1, 4, requires_grad=True)
    assert gradcheck(block, (h, s), eps=1e-6, atol=1e-8, rtol=1e-4)
    assert _parameter_gradcheck(block, h.detach(), s.detach())


# ============================================================================
# ATTENTION
# ============================================================================

def test_attention_preserves_shape():
    torch.manual_seed(4)
    for dim, shape in ((1, (2, 8, 12)), (2, (2, 8, 4, 6)), (3, (1, 8, 2, 3, 4))):
        for mode in ("spatial", "channel"):
            for softmax in (True, False):
                layer = Attention(dim, 8, mode, softmax)
                assert layer(torch.randn(*shape)).shape == shape


def test_single_token_attention_returns_values(float64):
    torch.manual_seed(5)
    layer = Attention(1, 8, "spatial", max_groups=2)
    h = torch.randn(3, 8, 1)
    _, _, v = layer.projections(h)
    torch.testing.assert_close(layer.attend(h), v.transpose(1, 2))


def test_zero_queries_average_the_values(float64):
    torch.manual_seed(6)
    layer = Attention(2, 8, "spatial")
    with torch.no_grad():
        layer.q.weight.zero_()
        layer.q.bias.zero_()
    h = torch.randn(2, 8, 3, 5)
    _, _, v = layer.projections(h)
    out = layer.attend(h).flatten(2)
    expected = v.mean(dim=1).unsqueeze(-1).expand_as(out)
    torch.testing.assert_close(out, expected)


def test_attention_needs_tokens():
    layer = Attention(1, 4, "spatial")
    with pytest.raises(ConfigError):
        layer(torch.randn(1, 4, 0))
    with pytest.raises(ConfigError):
        Attention(1, 4, "temporal")


def test_attention_gradients(float64):
    torch.manual_seed(7)
    for mode in ("spatial", "channel"):
        layer = Attention(2, 4, mode, max_groups=2)
        h = torch.randn(1, 4, 3, 3, requires_grad=True)
        assert gradcheck(layer, (h,), eps=1e-6, atol=1e-8, rtol=1e-4)
        assert _parameter_gradcheck(layer, h.detach())


# ============================================================================
# SKIP GATE
# ============================================================================

def test_gate_starts_as_identity():
    gate = SkipGate(2, 8)
    skip = torch.randn(2, 8, 4, 4)
    assert torch.equal(gate(skip), skip)
    gate.enabled = False
    assert gate(skip) is skip


# ============================================================================
# ASSEMBLED MODELS
# ============================================================================

def _toy_config(**overrides) -> ModelConfig:
    props = dict(variant="ditto", dimension=1, grid_shape=(8,), base_channels=4, channel_mults=(1,),
                 use_attention=False, embedding=EmbeddingSpec(d_emb=4, mlp_hidden=4))
    props.update(overrides)
    return ModelConfig(**props)


def test_parameter_count_matches_hand_count():
    """head 40, stem 28, encoder 140, middle 280, decoder 224, output 13."""
    assert parameter_count(_toy_config()) == 725
    assert parameter_count(_toy_config()) == parameter_count(_toy_config())
    print("✓ Parameter count matches the hand count")


def test_forward_shapes_for_each_dimension():
    for dimension, grid in ((1, (16,)), (2, (8, 8)), (3, (4, 4, 4))):
        config = small_config(dimension=dimension, grid_shape=grid, base_channels=4)
        model = build_model(config)
        x0 = torch.randn(3, *grid)
        assert model(x0, torch.tensor([0.1, 0.2, 0.3])).shape == (3, *grid)
        assert model(x0.unsqueeze(1), 0.5).shape == (3, 1, *grid)


def test_build_model_is_deterministic():
    a = build_model(small_config(), seed=3)
    b = build_model(small_config(), seed=3)
    c = build_model(small_config(), seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))
    x0 = torch.randn(2, 16)
    assert torch.equal(a(x0, 0.4), b(x0, 0.4))


def test_forward_depends_on_time():
    model = build_model(small_config())
    x0 = torch.randn(1, 16)
    with torch.no_grad():
        assert not torch.allclose(model(x0, 0.1), model(x0, 0.9))


def test_conditioning_projections_use_default_init():
    """cond_proj is not zero-initialized, so a fresh model already reacts to the scalar."""
    model = build_model(small_config())
    for block in model.resnet_blocks().values():
        assert block.cond_proj.weight.abs().sum() > 0


def test_forward_is_continuous_in_time(float64):
    model = build_model(small_config(dtype="float64"))
    x0 = torch.randn(1, 16)
    with torch.no_grad():
        base = model(x0, 0.5)
        gaps = [float((model(x0, 0.5 + d) - base).norm() / base.norm()) for d in (1e-2, 1e-3, 1e-4)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[0] / gaps[2] > 50
    assert gaps[2] < 1e-2


def test_baseline_ignores_time():
    model = build_model(small_config(variant="baseline_unet", conditioning_scalar_name=None))
    assert model.head is None
    x0 = torch.randn(2, 16)
    with torch.no_grad():
        assert torch.equal(model(x0, 0.3), model(x0, 7.0))
        assert torch.equal(model(x0), model(x0, 0.3))


def test_conditioned_model_needs_scalar():
    model = build_model(small_config())
    with pytest.raises(ConfigError):
        model(torch.randn(1, 16))


def test_forward_rejects_bad_inputs():
    model = build_model(small_config())
    with pytest.raises(ConfigError):
        forward(model, np.zeros((1, 16)), [np.arange(12.0)], 0.1)
    bad = np.zeros((1, 16))
    bad[0, 3] = np.nan
    with pytest.raises(ConfigError):
        forward(model, bad, None, 0.1)
    with pytest.raises(ConfigError):
        forward(model, np.zeros((1, 16)), None, float("inf"))
    with pytest.raises(ConfigError):
        model(torch.zeros(1, 12), 0.1)


def test_attention_ablation_has_no_attention_parameters():
    with_attention = build_model(small_config())
    without = build_model(small_config(use_attention=False))
    assert any("attn" in name for name, _ in with_attention.named_parameters())
    assert not any("attn" in name for name, _ in without.named_parameters())


def test_attention_ablation_shares_remaining_weights():
    """Zeroed attention output projections make the full model equal the ablated one."""
    full = build_model(small_config())
    ablated = build_model(small_config(use_attention=False))
    with torch.no_grad():
        for name, module in full.named_modules():
            if isinstance(module, Attention):
                module.proj.weight.zero_()
                module.proj.bias.zero_()
    result = full.load_state_dict(ablated.state_dict(), strict=False)
    assert not result.unexpected_keys
    assert all("attn" in key for key in result.missing_keys)
    x0 = torch.randn(2, 16)
    with torch.no_grad():
        torch.testing.assert_close(full(x0, 0.3), ablated(x0, 0.3))


def test_disabled_gates_reduce_to_ditto():
    plain = build_model(small_config())
    gated = build_model(small_config(variant="ditto_gate"))
    result = gated.load_state_dict(plain.state_dict(), strict=False)
    assert not result.unexpected_keys
    assert result.missing_keys and all(".gate." in key for key in result.missing_keys)
    x0 = torch.randn(2, 16)
    with torch.no_grad():
        expected = plain(x0, 0.2)
        assert torch.equal(gated(x0, 0.2), expected)
        for gate in gates(gated):
            torch.nn.init.normal_(gate.conv2.weight)
        assert not torch.allclose(gated(x0, 0.2), expected)
        gated.gates_enabled = False
        assert torch.equal(gated(x0, 0.2), expected)


def test_toy_model_gradients(float64):
    """Input, time and parameter gradients of the whole 1-level, 4-channel model on an 8x8 grid."""
    config = _toy_config(dimension=2, grid_shape=(8, 8), dtype="float64")
    model = build_model(config)
    x0 = torch.randn(1, 8, 8, requires_grad=True)
    t = torch.tensor([0.4], requires_grad=True)
    assert gradcheck(model, (x0, t), eps=1e-6, atol=1e-8, rtol=1e-4)
    assert _parameter_gradcheck(model, x0.detach(), t.detach())
    print("✓ Toy model gradients match finite differences")


# ============================================================================
# POINT VARIANT
# ============================================================================

def test_flatten_round_trip():
    field = np.arange(24.0).reshape(4, 6)
    for order in ("C", "F"):
        flat = flatten_field(field, order)
        assert flat.shape == (24,)
        np.testing.assert_array_equal(unflatten_field(flat, (4, 6), order), field)
    batch = flatten_field(np.stack([field, field + 1]), "F", batch=True)
    np.testing.assert_array_equal(unflatten_field(batch, (4, 6), "F")[1], field + 1)
    coords = grid_coordinate_matrix((4, 6), "F")
    assert coords.shape == (24, 2)
    assert tuple(coords[1]) == (1 / 3, 0.0)


def test_point_codes_are_distinct(float64):
    config = small_config(variant="ditto_point", dimension=2, grid_shape=(64, 64),
                          embedding=EmbeddingSpec(d_emb=64, mlp_hidden=16))
    model = build_model(config)
    coords = torch.as_tensor(grid_coordinate_matrix((64, 64)))
    codes = model._point_code(coords).transpose(0, 1)
    distances = torch.cdist(codes, codes)
    distances.fill_diagonal_(float("inf"))
    assert float(distances.min()) > 1e-6


def test_point_forward_pads_and_crops():
    config = small_config(variant="ditto_point", dimension=2, grid_shape=(5, 3))
    model = build_model(config)
    coords = grid_coordinate_matrix((5, 3))
    values = np.random.default_rng(0).standard_normal((2, 15))
    out = point_forward(model, values, coords, 0.25)
    assert out.shape == (2, 15)
    with pytest.raises(ConfigError):
        point_forward(model, values, coords[:10], 0.25)
    with pytest.raises(ConfigError):
        point_forward(build_model(small_config()), values, coords, 0.25)


if __name__ == "__main__":
    print("Running network tests...\n")
    test_embedding_values()
    test_parameter_count_matches_hand_count()
    test_attention_preserves_shape()
    test_gate_starts_as_identity()
    print("\n✅ Network tests passed")
