"""
The conditioned U-Net and its variants.

ditto          structured d-dimensional U-Net, every ResNet block conditioned on a scalar
ditto_point    same topology over a flattened point set with 1-D convolutions
ditto_gate     ditto with a convolutional gate on every decoder skip connection
baseline_unet  same U-Net without any conditioning path, used as a fixed-step map
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ditto.errors import ConfigError
from ditto.schema import EmbeddingSpec, ModelConfig

logger = logging.getLogger(__name__)

_CONV = {1: nn.Conv1d, 2: nn.Conv2d, 3: nn.Conv3d}
# per-axis stretch of point coordinates; distinct factors keep sum-of-axis codes injective
_AXIS_STRETCH = (1.0, 1.618, 2.236)


def _group_count(channels: int, max_groups: int) -> int:
    groups = min(max_groups, channels)
    while channels % groups:
        groups -= 1
    return groups


def _as_tensor(value, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else torch.get_default_dtype()
    device = like.device if like is not None else None
    tensor = torch.as_tensor(value, device=device)
    if not torch.is_floating_point(tensor):
        tensor = tensor.to(dtype)
    return tensor.to(device=device, dtype=dtype) if like is not None else tensor


# ============================================================================
# SCALAR EMBEDDING
# ============================================================================

def embed_scalar(t, spec: Union[EmbeddingSpec, int]) -> torch.Tensor:
    """Sinusoidal code of a nonnegative scalar (or batch of scalars).

    Slot 2i holds sin(t / 10000^(2i/d_emb)), slot 2i+1 the matching cosine.
    """
    d_emb = spec.d_emb if isinstance(spec, EmbeddingSpec) else int(spec)
    if d_emb < 2 or d_emb % 2:
        raise ConfigError(f"d_emb must be an even integer >= 2, got {d_emb}")
    t = _as_tensor(t)
    if not torch.all(torch.isfinite(t)):
        raise ConfigError("conditioning scalar must be finite")
    if torch.any(t < 0):
        raise ConfigError("conditioning scalar must be >= 0")
    i = torch.arange(d_emb // 2, dtype=t.dtype, device=t.device)
    frequencies = torch.pow(torch.tensor(10000.0, dtype=t.dtype, device=t.device), -2.0 * i / d_emb)
    angles = t.unsqueeze(-1) * frequencies
    return torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1).reshape(*t.shape, d_emb)


class ConditioningHead(nn.Module):
    """Linear -> GELU -> Linear over the scalar embedding."""

    def __init__(self, spec: EmbeddingSpec):
        super().__init__()
        self.spec = spec
        self.fc1 = nn.Linear(spec.d_emb, spec.mlp_hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(spec.mlp_hidden, spec.mlp_hidden)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.spec.d_emb:
            raise ConfigError(f"embedding width {e.shape[-1]} != d_emb {self.spec.d_emb}")
        return self.fc2(self.act(self.fc1(e)))


# ============================================================================
# BUILDING BLOCKS
# ============================================================================

class ConditionedResBlock(nn.Module):
    """Two conv-norm-activate stages with channel-wise scaling in between and a residual skip."""

    def __init__(self, dim: int, in_channels: int, out_channels: int, cond_width: Optional[int],
                 max_groups: int = 8, conditioning_mode: str = "one_plus"):
        super().__init__()
        conv = _CONV[dim]
        self.out_channels = out_channels
        self.conditioning_mode = conditioning_mode
        self.conv1 = conv(in_channels, out_channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(_group_count(out_channels, max_groups), out_channels)
        self.act1 = nn.SiLU()
        self.conv2 = conv(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_group_count(out_channels, max_groups), out_channels)
        self.act2 = nn.SiLU()
        self.skip = conv(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        self.cond_proj = nn.Linear(cond_width, out_channels) if cond_width else None

    def coefficients(self, cond: torch.Tensor) -> torch.Tensor:
        """Project the shared conditioning vector onto this block's channels."""
        if self.cond_proj is None:
            raise ConfigError("block was built without a conditioning path")
        return self.cond_proj(cond)

    def forward(self, h: torch.Tensor, s: Optional[torch.Tensor] = None) -> torch.Tensor:
        y = self.act1(self.norm1(self.conv1(h)))
        if s is not None:
            if s.shape[-1] != self.out_channels:
                raise ConfigError(f"conditioning has {s.shape[-1]} channels, block has {self.out_channels}")
            s = s.reshape(s.shape[0], self.out_channels, *([1] * (y.dim() - 2)))
            y = y * (1.0 + s) if self.conditioning_mode == "one_plus" else y * s
        y = self.act2(self.norm2(self.conv2(y)))
        return y + self.skip(h)


class Attention(nn.Module):
    """Scaled dot-product attention over pixels (spatial) or channels (channel).

    Q, K and V come from separate 1x1 convolutions. Spatial mode builds an
    n_pixels x n_pixels matrix, channel mode an n_channels x n_channels one.
    """

    def __init__(self, dim: int, channels: int, mode: str, softmax: bool = True, max_groups: int = 8):
        super().__init__()
        if mode not in ("spatial", "channel"):
            raise ConfigError(f"attention mode must be 'spatial' or 'channel', got {mode!r}")
        conv = _CONV[dim]
        self.mode = mode
        self.softmax = softmax
        self.norm = nn.GroupNorm(_group_count(channels, max_groups), channels)
        self.q = conv(channels, channels, 1)
        self.k = conv(channels, channels, 1)
        self.v = conv(channels, channels, 1)
        self.proj = conv(channels, channels, 1)

    def projections(self, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Token matrices (B, tokens, width) for the configured mode."""
        if h.shape[1] == 0 or h[0, 0].numel() == 0:
            raise ConfigError("attention needs at least one token")
        x = self.norm(h)
        q, k, v = (layer(x).flatten(2) for layer in (self.q, self.k, self.v))
        if self.mode == "spatial":
            q, k, v = (m.transpose(1, 2) for m in (q, k, v))
        return q, k, v

    def attend(self, h: torch.Tensor) -> torch.Tensor:
        q, k, v = self.projections(h)
        scores = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
        if self.softmax:
            scores = torch.softmax(scores, dim=-1)
        out = scores @ v
        if self.mode == "spatial":
            out = out.transpose(1, 2)
        return out.reshape(h.shape)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.proj(self.attend(h))


class SkipGate(nn.Module):
    """Conv block on a decoder skip tensor; the zero-initialized last conv makes it start as identity."""

    def __init__(self, dim: int, channels: int, max_groups: int = 8):
        super().__init__()
        conv = _CONV[dim]
        self.enabled = True
        self.conv1 = conv(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(_group_count(channels, max_groups), channels)
        self.act = nn.SiLU()
        self.conv2 = conv(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, skip: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return skip
        return skip + self.conv2(self.act(self.norm(self.conv1(skip))))


class Upsample(nn.Module):
    def __init__(self, dim: int, channels: int):
        super().__init__()
        self.conv = _CONV[dim](channels, channels, 3, padding=1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(h, scale_factor=2, mode="nearest"))


# ============================================================================
# GRID HELPERS
# ============================================================================

def normalized_grid(grid_shape: Sequence[int]) -> torch.Tensor:
    """(d, *grid) tensor of per-axis coordinates scaled to [0, 1]."""
    axes = [torch.linspace(0.0, 1.0, n) if n > 1 else torch.zeros(1) for n in grid_shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def grid_coordinate_matrix(grid_shape: Sequence[int], order: str = "C") -> np.ndarray:
    """N x d coordinates of the grid nodes, rows in ``order`` flattening order."""
    mesh = np.meshgrid(*[np.linspace(0.0, 1.0, n) for n in grid_shape], indexing="ij")
    return np.stack([m.ravel(order=order) for m in mesh], axis=1)


def flatten_field(field: np.ndarray, order: str = "C", batch: bool = False) -> np.ndarray:
    """*grid -> N, or (B, *grid) -> (B, N) when ``batch``."""
    field = np.asarray(field)
    if batch:
        return np.stack([f.ravel(order=order) for f in field])
    return field.ravel(order=order)


def unflatten_field(values: np.ndarray, grid_shape: Sequence[int], order: str = "C") -> np.ndarray:
    values = np.asarray(values)
    if values.ndim == 1:
        return values.reshape(tuple(grid_shape), order=order)
    return np.stack([v.reshape(tuple(grid_shape), order=order) for v in values])


# ============================================================================
# NETWORK
# ============================================================================

class DittoNet(nn.Module):
    """U-Net with scalar conditioning in every ResNet block.

    Call as ``net(x0, t)`` for structured variants and ``net(values, t, coords=...)``
    for the point variant; the baseline ignores ``t`` and advances one stored step.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        point = config.variant == "ditto_point"
        dim = 1 if point else config.dimension
        self.conv_dim = dim
        groups = config.norm_groups
        channels = config.level_channels
        attn_levels = set(config.resolved_attention_levels)

        self.head = ConditioningHead(config.embedding) if config.conditioned else None
        cond_width = config.embedding.mlp_hidden if config.conditioned else None

        def res_block(cin, cout):
            return ConditionedResBlock(dim, cin, cout, cond_width, groups, config.conditioning_mode)

        def attention_pair(ch):
            return {
                "attn_spatial": Attention(dim, ch, "spatial", config.attention_softmax, groups),
                "attn_channel": Attention(dim, ch, "channel", config.attention_softmax, groups),
            }

        stem_in = config.in_channels + (config.embedding.d_emb if point else config.dimension)
        self.stem = _CONV[dim](stem_in, config.base_channels, 3, padding=1)

        self.encoder = nn.ModuleList()
        prev = config.base_channels
        for level, ch in enumerate(channels):
            modules = {"block": res_block(prev, ch)}
            if level in attn_levels:
                modules.update(attention_pair(ch))
            if level < config.levels - 1:
                modules["down"] = _CONV[dim](ch, ch, 3, stride=2, padding=1)
            self.encoder.append(nn.ModuleDict(modules))
            prev = ch

        mid = {"block1": res_block(prev, prev), "block2": res_block(prev, prev)}
        if config.use_attention:
            mid.update(attention_pair(prev))
        self.middle = nn.ModuleDict(mid)

        self.decoder = nn.ModuleList()
        for level in reversed(range(config.levels)):
            ch = channels[level]
            modules = {}
            if level < config.levels - 1:
                modules["up"] = Upsample(dim, prev)
            if config.variant == "ditto_gate":
                modules["gate"] = SkipGate(dim, ch, groups)
            modules["block"] = res_block(prev + ch, ch)
            if level in attn_levels:
                modules.update(attention_pair(ch))
            self.decoder.append(nn.ModuleDict(modules))
            prev = ch

        self.out_norm = nn.GroupNorm(_group_count(prev, groups), prev)
        self.out_act = nn.SiLU()
        self.out_conv = _CONV[dim](prev, config.in_channels, 1)

        if not point:
            self.register_buffer("grid_channels", normalized_grid(config.grid_shape), persistent=False)

    # -- conditioning -----------------------------------------------------

    @property
    def gates_enabled(self) -> bool:
        return all(m.enabled for m in self.modules() if isinstance(m, SkipGate))

    @gates_enabled.setter
    def gates_enabled(self, value: bool) -> None:
        for module in self.modules():
            if isinstance(module, SkipGate):
                module.enabled = bool(value)

    def resnet_blocks(self) -> Dict[str, ConditionedResBlock]:
        return {name: m for name, m in self.named_modules() if isinstance(m, ConditionedResBlock)}

    def conditioning_vector(self, t) -> Optional[torch.Tensor]:
        if self.head is None:
            return None
        ref = self.stem.weight
        t = _as_tensor(t, ref).reshape(-1)
        return self.head(embed_scalar(t * self.config.time_scale, self.config.embedding))

    def conditioning_coefficients(self, t) -> Dict[str, torch.Tensor]:
        """Per-block channel coefficients s for scalar(s) ``t``."""
        cond = self.conditioning_vector(t)
        if cond is None:
            return {}
        return {name: block.coefficients(cond) for name, block in self.resnet_blocks().items()}

    # -- forward ----------------------------------------------------------

    def _point_code(self, coords: torch.Tensor) -> torch.Tensor:
        lo = coords.min(dim=0).values
        span = coords.max(dim=0).values - lo
        span = torch.where(span > 0, span, torch.ones_like(span))
        normalized = (coords - lo) / span
        code = 0.0
        for axis in range(coords.shape[1]):
            stretch = self.config.point_coord_scale * _AXIS_STRETCH[axis % len(_AXIS_STRETCH)]
            code = code + embed_scalar(normalized[:, axis] * stretch, self.config.embedding)
        return code.transpose(0, 1)

    def _run(self, h: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor:
        def block(module, x):
            return module(x, module.coefficients(cond) if cond is not None else None)

        def attend(modules, x):
            if "attn_spatial" in modules:
                x = modules["attn_spatial"](x)
            if "attn_channel" in modules:
                x = modules["attn_channel"](x)
            return x

        h = self.stem(h)
        skips = []
        for modules in self.encoder:
            h = attend(modules, block(modules["block"], h))
            skips.append(h)
            if "down" in modules:
                h = modules["down"](h)
        h = block(self.middle["block1"], h)
        h = attend(self.middle, h)
        h = block(self.middle["block2"], h)
        for modules in self.decoder:
            if "up" in modules:
                h = modules["up"](h)
            skip = skips.pop()
            if "gate" in modules:
                skip = modules["gate"](skip)
            h = attend(modules, block(modules["block"], torch.cat([h, skip], dim=1)))
        return self.out_conv(self.out_act(self.out_norm(h)))

    def forward(self, x0: torch.Tensor, t=None, coords: Optional[torch.Tensor] = None) -> torch.Tensor:
        cfg = self.config
        ref = self.stem.weight
        x0 = _as_tensor(x0, ref)
        cond = None
        if cfg.conditioned:
            if t is None:
                raise ConfigError(f"{cfg.variant} needs a conditioning scalar")
            t = _as_tensor(t, ref).reshape(-1)
            if t.numel() == 1 and x0.shape[0] != 1:
                t = t.expand(x0.shape[0])
            cond = self.conditioning_vector(t)

        if cfg.variant == "ditto_point":
            squeeze = x0.dim() == 2
            h = x0.unsqueeze(1) if squeeze else x0
            n_points = h.shape[-1]
            if coords is None:
                coords = torch.as_tensor(grid_coordinate_matrix(cfg.grid_shape, cfg.point_flatten_order))
            coords = _as_tensor(coords, ref)
            if coords.shape[0] != n_points:
                raise ConfigError(f"{coords.shape[0]} coordinates for {n_points} values")
            code = self._point_code(coords).unsqueeze(0).expand(h.shape[0], -1, -1)
            h = torch.cat([h, code], dim=1)
            factor = 2 ** (cfg.levels - 1)
            pad = (-n_points) % factor
            if pad:
                h = F.pad(h, (0, pad))
            out = self._run(h, cond)[..., :n_points]
            return out.squeeze(1) if squeeze else out

        squeeze = x0.dim() == cfg.dimension + 1
        h = x0.unsqueeze(1) if squeeze else x0
        if tuple(h.shape[2:]) != cfg.grid_shape:
            raise ConfigError(f"input grid {tuple(h.shape[2:])} does not match configured {cfg.grid_shape}")
        grid = self.grid_channels.to(ref.dtype).unsqueeze(0).expand(h.shape[0], *self.grid_channels.shape)
        out = self._run(torch.cat([h, grid], dim=1), cond)
        return out.squeeze(1) if squeeze else out


# ============================================================================
# MODULE-LEVEL OPERATIONS
# ============================================================================

def build_model(config: ModelConfig, seed: Optional[int] = None) -> DittoNet:
    """Deterministic initialization under ``seed`` (defaults to config.seed); the global RNG is untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if seed is None else seed)
        model = DittoNet(config)
    if config.dtype == "float64":
        model = model.double()
    return model


def parameter_count(config: ModelConfig) -> int:
    return sum(p.numel() for p in DittoNet(config).parameters())


def conditioning_head(model: DittoNet, e: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Head output for embedding ``e``, projected by every block to its channel width."""
    if model.head is None:
        raise ConfigError("baseline_unet has no conditioning head")
    cond = model.head(e)
    return {name: block.coefficients(cond) for name, block in model.resnet_blocks().items()}


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.all(torch.isfinite(value)):
        raise ConfigError(f"{name} contains NaN or Inf")


def forward(model: DittoNet, x0, grid: Optional[Sequence[np.ndarray]], scalar) -> torch.Tensor:
    """u(., scalar) predicted from x0 on the configured grid."""
    cfg = model.config
    if grid is not None and tuple(len(axis) for axis in grid) != cfg.grid_shape:
        raise ConfigError(f"grid {tuple(len(a) for a in grid)} does not match configured {cfg.grid_shape}")
    x0 = _as_tensor(x0, model.stem.weight)
    _check_finite("x0", x0)
    if scalar is not None:
        _check_finite("scalar", _as_tensor(scalar))
    return model(x0, scalar)


def point_forward(model: DittoNet, x0_values, coords, scalar) -> torch.Tensor:
    """Point-variant prediction for N values at the N x d coordinates ``coords``."""
    if model.config.variant != "ditto_point":
        raise ConfigError(f"point_forward needs a ditto_point model, got {model.config.variant}")
    values = _as_tensor(x0_values, model.stem.weight)
    coords = _as_tensor(coords, model.stem.weight)
    if values.shape[-1] < 1:
        raise ConfigError("point_forward needs at least one point")
    _check_finite("coords", coords)
    _check_finite("x0", values)
    return model(values, scalar, coords=coords)


def gate_forward(gate: SkipGate, skip: torch.Tensor) -> torch.Tensor:
    return gate(skip)


def gates(model: DittoNet) -> List[SkipGate]:
    return [m for m in model.modules() if isinstance(m, SkipGate)]
