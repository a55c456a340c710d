import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from fractions import Fraction
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from errors import ConfigError, DeconverError

# --- CONFIGURABLE PARAMETERS ---
DEFAULT_EPSILON_LAYER = 1e-8  # ε inside the NDC layer; the standalone solver uses 0 with the 0/0 -> 0 rule
DEFAULT_SOURCE_RATIO = 4  # R = E / C
DEFAULT_MLP_RATIO = 4  # α
CHANNEL_CAP = 512  # C_ℓ = min(C₀·2^ℓ, CHANNEL_CAP)

DEFAULT_LR = 1e-4
DEFAULT_WEIGHT_DECAY = 1e-5
WARMUP_FRACTION = 0.01

CPU_COUNT = os.cpu_count() or 4
MAX_WORKERS = CPU_COUNT * 2  # Max threads for data synthesis and metric evaluation


# --- RUN CONFIGURATION ---

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkSection(_Section):
    spatial_rank: Literal[2, 3] = 2
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 2
    base_channels: int = 8
    mlp_ratio: int = DEFAULT_MLP_RATIO
    channel_cap: int = CHANNEL_CAP
    stem_kernel: int = 3


class NdcSection(_Section):
    groups: Union[int, Literal["channels"]] = "channels"
    source_ratio: Union[int, float, str] = DEFAULT_SOURCE_RATIO  # "1/2" style fractions allowed
    kernel: List[int] = [3, 3]
    epsilon: float = DEFAULT_EPSILON_LAYER
    iterations: int = 1


class TrainSection(_Section):
    steps: int = 300
    batch_size: int = 8
    patch: Optional[List[int]] = None
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    warmup_fraction: float = WARMUP_FRACTION
    seed: int = 0
    flip: bool = True
    noise: bool = True
    noise_sigma: float = 0.05


class DataSection(_Section):
    samples: int = 8
    spatial: List[int] = [16, 16]
    seed: int = 0
    spacing: Optional[List[float]] = None


class IoSection(_Section):
    out_dir: str = "runs"


class RunConfig(_Section):
    network: NetworkSection = NetworkSection()
    ndc: NdcSection = NdcSection()
    train: TrainSection = TrainSection()
    data: DataSection = DataSection()
    io: IoSection = IoSection()

    @model_validator(mode="after")
    def _check_downstream(self):
        try:
            net = self.network_config()
            self.train_config().check_network(net)
            if len(self.data.spatial) != net.spatial_rank:
                raise ValueError(f"data.spatial {self.data.spatial} does not match spatial rank {net.spatial_rank}")
            if self.data.samples < 1:
                raise ValueError(f"data.samples must be >= 1, got {self.data.samples}")
            if self.data.spacing is not None and len(self.data.spacing) != net.spatial_rank:
                raise ValueError(f"data.spacing {self.data.spacing} does not match spatial rank {net.spatial_rank}")
            patch = self.train.patch or self.data.spatial
            if any(p > s for p, s in zip(patch, self.data.spatial)):
                raise ValueError(f"train.patch {patch} exceeds data.spatial {self.data.spatial}")
        except DeconverError as e:
            raise ValueError(str(e)) from e
        return self

    def network_config(self):
        from deconver_net import DeconverConfig, NdcLayerConfig
        ratio = Fraction(self.ndc.source_ratio) if isinstance(self.ndc.source_ratio, str) else self.ndc.source_ratio
        ndc = NdcLayerConfig(groups=self.ndc.groups, source_ratio=ratio, kernel=tuple(self.ndc.kernel),
                             epsilon=self.ndc.epsilon, iterations=self.ndc.iterations)
        return DeconverConfig(ndc=ndc, patch=tuple(self.train.patch or self.data.spatial),
                              **self.network.model_dump())

    def train_config(self):
        from train_eval import TrainConfig
        return TrainConfig(**self.train.model_dump())


# --- PRESETS ---

def _isles(**ndc):
    return {"network": {"spatial_rank": 3, "in_channels": 2, "out_channels": 1, "depth": 4, "base_channels": 64},
            "ndc": {"groups": "channels", "source_ratio": 4, "kernel": [3, 3, 3], **ndc},
            "train": {"patch": [64, 64, 64], "batch_size": 8},
            "data": {"spatial": [64, 64, 64]}}


PRESETS = {
    "micro": {"network": {"spatial_rank": 2, "depth": 2, "base_channels": 8},
              "ndc": {"groups": "channels", "source_ratio": 4, "kernel": [3, 3]},
              "train": {"steps": 300, "batch_size": 8, "lr": 2e-3, "noise": False},
              "data": {"samples": 8, "spatial": [16, 16]}},
    "isles": _isles(),
    "isles_k5": _isles(kernel=[5, 5, 5]),
    "isles_g1": _isles(groups=1),
    "isles_g8": _isles(groups=8),
    "isles_r1": _isles(source_ratio=1),
    "isles_r2": _isles(source_ratio=2),
    "brats": {"network": {"spatial_rank": 3, "in_channels": 4, "out_channels": 3, "depth": 5, "base_channels": 32},
              "ndc": {"kernel": [3, 3, 3]},
              "train": {"patch": [128, 128, 128], "batch_size": 2},
              "data": {"spatial": [128, 128, 128]}},
    "glas": {"network": {"spatial_rank": 2, "in_channels": 3, "depth": 6, "base_channels": 32},
             "train": {"patch": [256, 256]},
             "data": {"spatial": [256, 256]}},
    "fives": {"network": {"spatial_rank": 2, "in_channels": 3, "depth": 6, "base_channels": 32},
              "train": {"patch": [512, 512]},
              "data": {"spatial": [512, 512]}},
}


def _validated(data, source):
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config {source}: {e}") from e


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return _validated(PRESETS[name], f"preset {name!r}")


def load_run_config(path_or_preset):
    """Parse a TOML run config, or return a named preset."""
    if path_or_preset in PRESETS and not os.path.exists(path_or_preset):
        return preset(path_or_preset)
    with open(path_or_preset, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"malformed TOML in {path_or_preset}: {e}") from e
    return _validated(data, path_or_preset)
