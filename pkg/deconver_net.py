"""
Deconver: a U-shaped segmentation network whose blocks mix spatial
information with a learnable nonnegative deconvolution (NDC) layer instead of
attention.

    stem (3^d conv) -> [block -> strided 2^d conv] x (L-1) -> block
    -> [transposed 2^d conv -> concat skip -> 1x1 fuse -> block] x (L-1)
    -> 1x1 head (logits)

Every module works on batched (B, C, *spatial) tensors; `Deconver.forward`
also accepts a single unbatched (C, *spatial) image.
"""
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Union

import torch
from torch import nn
from torch.utils.flop_counter import FlopCounterMode

import grad
from config import CHANNEL_CAP, DEFAULT_EPSILON_LAYER, DEFAULT_MLP_RATIO, DEFAULT_SOURCE_RATIO
from errors import ConfigError, SpatialExtentError
from ndc_solver import NdcProblem
from tensor import FilterTensor, check_nonnegative

NEGATIVE_SLACK = 1e-12


# --- CONFIGURATION ---

@dataclass(frozen=True)
class NdcLayerConfig:
    """NDC layer hyperparameters; channels=None makes it a per-stage template."""
    channels: Optional[int] = None
    groups: Union[int, str] = "channels"
    source_ratio: Union[int, float, Fraction] = DEFAULT_SOURCE_RATIO
    kernel: tuple = (3, 3)
    epsilon: float = DEFAULT_EPSILON_LAYER
    iterations: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if any(k <= 0 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"ndc.kernel extents must be positive and odd, got {self.kernel}")
        if self.ratio <= 0:
            raise ConfigError(f"ndc.source_ratio must be positive, got {self.source_ratio}")
        if self.epsilon < 0:
            raise ConfigError(f"ndc.epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ConfigError(f"ndc.iterations must be >= 1, got {self.iterations}")
        if isinstance(self.groups, str) and self.groups != "channels":
            raise ConfigError(f"ndc.groups must be an integer or 'channels', got {self.groups!r}")
        if not isinstance(self.groups, str) and self.groups < 1:
            raise ConfigError(f"ndc.groups must be >= 1, got {self.groups}")
        if self.channels is not None:
            self._check_channels()

    @property
    def ratio(self):
        return Fraction(self.source_ratio).limit_denominator(1000)

    @property
    def num_groups(self):
        return self.channels if self.groups == "channels" else self.groups

    @property
    def sources(self):
        return int(self.ratio * self.channels)

    def _check_channels(self):
        c, g = self.channels, self.num_groups
        if c < 1:
            raise ConfigError(f"ndc channels must be >= 1, got {c}")
        if c % g:
            raise ConfigError(f"ndc groups G={g} must divide channels C={c}")
        e = self.ratio * c
        if e.denominator != 1:
            raise ConfigError(f"source channels R*C = {self.ratio}*{c} must be integral")
        if (e / g).denominator != 1:
            raise ConfigError(f"source channels per group R*C/G = {e}/{g} must be integral")

    def resolve(self, channels):
        return replace(self, channels=channels)


@dataclass(frozen=True)
class DeconverConfig:
    spatial_rank: int
    in_channels: int
    out_channels: int
    depth: int
    base_channels: int
    mlp_ratio: int = DEFAULT_MLP_RATIO
    ndc: NdcLayerConfig = field(default_factory=NdcLayerConfig)
    channel_cap: int = CHANNEL_CAP
    stem_kernel: int = 3
    patch: Optional[tuple] = None

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"network.spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.depth < 2:
            raise ConfigError(f"network.depth must be >= 2, got {self.depth}")
        for name in ("in_channels", "out_channels", "base_channels", "mlp_ratio", "channel_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"network.{name} must be >= 1, got {getattr(self, name)}")
        if self.stem_kernel % 2 == 0:
            raise ConfigError(f"network.stem_kernel must be odd, got {self.stem_kernel}")
        if len(self.ndc.kernel) != self.spatial_rank:
            raise ConfigError(f"ndc.kernel {self.ndc.kernel} does not match spatial rank {self.spatial_rank}")
        for c in self.stage_channels:
            self.ndc.resolve(c)
        if self.patch is not None:
            object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
            check_divisible(self.patch, self)

    @property
    def stage_channels(self):
        return [min(self.base_channels * 2 ** level, self.channel_cap) for level in range(self.depth)]

    @property
    def divisor(self):
        return 2 ** (self.depth - 1)


def check_divisible(spatial, cfg):
    spatial = tuple(spatial)
    if len(spatial) != cfg.spatial_rank:
        raise SpatialExtentError(f"expected {cfg.spatial_rank} spatial extents, got {spatial}")
    if any(s % cfg.divisor for s in spatial):
        raise SpatialExtentError(
            f"spatial extents {spatial} must be divisible by 2^(L-1) = {cfg.divisor} for depth L={cfg.depth}")


# --- LAYERS ---

class Conv(nn.Module):
    """Plain convolution with Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero bias."""

    def __init__(self, rank, in_channels, out_channels, kernel=1, stride=1, transposed=False, bias=True):
        super().__init__()
        self.rank = rank
        self.stride = stride
        self.transposed = transposed
        kernel = (kernel,) * rank
        shape = (in_channels, out_channels, *kernel) if transposed else (out_channels, in_channels, *kernel)
        self.weight = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        # transposed weights keep input channels on axis 0, which torch counts as fan_out
        nn.init.kaiming_uniform_(self.weight, mode="fan_out" if transposed else "fan_in", nonlinearity="relu")

    def forward(self, x):
        if self.transposed:
            return grad.transposed_correlate(x, self.weight, self.bias, self.stride)
        if self.stride > 1:
            return grad.strided_correlate(x, self.weight, self.bias, self.stride)
        out = grad.correlate(x, FilterTensor(self.weight))
        if self.bias is not None:
            out = out + self.bias.reshape((-1,) + (1,) * self.rank)
        return out


class Pointwise(nn.Module):
    def __init__(self, rank, in_channels, out_channels):
        super().__init__()
        self.rank = rank
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.kaiming_uniform_(self.weight, nonlinearity="relu")

    def forward(self, x):
        return grad.pointwise_conv(x, self.weight, self.bias, rank=self.rank)


class InstanceNorm(nn.Module):
    def __init__(self, rank, channels):
        super().__init__()
        self.rank = rank
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return grad.instance_norm(x, self.weight, self.bias, rank=self.rank)


class NdcLayer(nn.Module):
    """
    Grouped nonnegative deconvolution of a nonnegative (B, C, *spatial) map.

    S⁽⁰⁾ = relu(pointwise(x)) split into G groups of E/G channels; each group
    keeps its own filter V_g = relu(raw_g) of shape (C/G, E/G, *kernel) and is
    refined by the ε-guarded multiplicative update. Output is (B, E, *spatial).
    """

    def __init__(self, cfg, rank):
        super().__init__()
        if cfg.channels is None:
            raise ConfigError("NdcLayer needs a resolved config (channels set)")
        self.cfg = cfg
        self.rank = rank
        c, e, g = cfg.channels, cfg.sources, cfg.num_groups
        self.source_init = Pointwise(rank, c, e)
        self.raw_filter = nn.Parameter(torch.empty(c, e // g, *cfg.kernel))
        nn.init.kaiming_uniform_(self.raw_filter, nonlinearity="relu")

    def initial_source(self, x):
        return grad.relu(self.source_init(x))

    def filter(self):
        return FilterTensor(grad.relu(self.raw_filter))

    def forward(self, x):
        check_nonnegative(x, "NDC layer input", tolerance=NEGATIVE_SLACK)
        return grad.ndc_update(x, self.initial_source(x), self.raw_filter, groups=self.cfg.num_groups,
                               epsilon=self.cfg.epsilon, iterations=self.cfg.iterations)

    @torch.no_grad()
    def group_problems(self, x):
        """Per-group NdcProblem instances for one unbatched (C, *spatial) input."""
        c_g = self.cfg.channels // self.cfg.num_groups
        e_g = self.cfg.sources // self.cfg.num_groups
        s0 = self.initial_source(x.unsqueeze(0))[0]
        v = self.filter().data
        return [NdcProblem(x[g * c_g:(g + 1) * c_g], FilterTensor(v[g * c_g:(g + 1) * c_g]),
                           s0[g * e_g:(g + 1) * e_g])
                for g in range(self.cfg.num_groups)]


class DeconvMixer(nn.Module):
    def __init__(self, channels, ndc_cfg, rank):
        super().__init__()
        ndc_cfg = ndc_cfg.resolve(channels)
        self.project_in = Pointwise(rank, channels, channels)
        self.ndc = NdcLayer(ndc_cfg, rank)
        self.project_out = Pointwise(rank, ndc_cfg.sources, channels)

    def forward(self, x):
        return self.project_out(self.ndc(grad.relu(self.project_in(x))))


class Mlp(nn.Module):
    def __init__(self, channels, ratio, rank):
        super().__init__()
        self.fc1 = Pointwise(rank, channels, channels * ratio)
        self.fc2 = Pointwise(rank, channels * ratio, channels)

    def forward(self, x):
        return self.fc2(grad.gelu(self.fc1(x)))


class DeconverBlock(nn.Module):
    """Z = Mixer(IN(X)) + X;  Y = MLP(IN(Z)) + Z."""

    def __init__(self, channels, ndc_cfg, mlp_ratio, rank):
        super().__init__()
        self.norm1 = InstanceNorm(rank, channels)
        self.mixer = DeconvMixer(channels, ndc_cfg, rank)
        self.norm2 = InstanceNorm(rank, channels)
        self.mlp = Mlp(channels, mlp_ratio, rank)

    def forward(self, x):
        z = grad.add(self.mixer(self.norm1(x)), x)
        return grad.add(self.mlp(self.norm2(z)), z)


class Deconver(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        rank = cfg.spatial_rank
        ch = cfg.stage_channels
        self.stem = Conv(rank, cfg.in_channels, ch[0], kernel=cfg.stem_kernel)
        self.encoder = nn.ModuleList(DeconverBlock(c, cfg.ndc, cfg.mlp_ratio, rank) for c in ch)
        self.down = nn.ModuleList(Conv(rank, ch[i], ch[i + 1], kernel=2, stride=2) for i in range(cfg.depth - 1))
        self.up = nn.ModuleList(Conv(rank, ch[i + 1], ch[i], kernel=2, stride=2, transposed=True)
                                for i in range(cfg.depth - 1))
        self.fuse = nn.ModuleList(Pointwise(rank, 2 * ch[i], ch[i]) for i in range(cfg.depth - 1))
        self.decoder = nn.ModuleList(DeconverBlock(ch[i], cfg.ndc, cfg.mlp_ratio, rank)
                                     for i in range(cfg.depth - 1))
        self.head = Pointwise(rank, ch[0], cfg.out_channels)

    def forward(self, x):
        rank = self.cfg.spatial_rank
        unbatched = x.dim() == rank + 1
        if unbatched:
            x = x.unsqueeze(0)
        check_divisible(x.shape[2:], self.cfg)

        h = self.stem(x)
        skips = []
        for level, block in enumerate(self.encoder):
            h = block(h)
            if level < self.cfg.depth - 1:
                skips.append(h)
                h = self.down[level](h)
        for level in reversed(range(self.cfg.depth - 1)):
            h = self.up[level](h)
            h = self.fuse[level](grad.concat([h, skips[level]], rank))
            h = self.decoder[level](h)
        logits = self.head(h)
        return logits[0] if unbatched else logits


# --- ACCOUNTING ---

def build_network(cfg, seed=None, dtype=None):
    if seed is not None:
        torch.manual_seed(seed)
    net = Deconver(cfg)
    return net.to(dtype) if dtype is not None else net


def count_params(cfg):
    with torch.device("meta"):
        net = Deconver(cfg)
    return sum(p.numel() for p in net.parameters())


def estimate_flops_per_voxel(cfg, patch=None):
    """Convolution FLOPs (2 x multiply-adds) of one forward pass, per input voxel."""
    patch = tuple(patch or cfg.patch or (cfg.divisor,) * cfg.spatial_rank)
    check_divisible(patch, cfg)
    with torch.device("meta"):
        net = Deconver(cfg)
        x = torch.empty(1, cfg.in_channels, *patch)
    counter = FlopCounterMode(display=False)
    with counter, torch.no_grad():
        net(x)
    voxels = 1
    for p in patch:
        voxels *= p
    return counter.get_total_flops() / voxels
