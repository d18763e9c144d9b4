"""Candidate operations for every search space, and the zero/random specials.

Every op maps ``(B, C_in, H, W)`` to ``(B, C_out, H / stride, W / stride)`` on
even spatial sizes. Ops that cannot stride by themselves (identity,
activations, batch-norm) are followed by a factorized reduce at stride 2.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .discretizer import ZeroConfig, get_zero_config
from .errors import ArchitectureError, ConfigError
from .genotypes import RANDOM_OP, ZERO_OP

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
MBCONV_V1_EXPANSION = 6

CATEGORIES = ("basic", "simple", "darts", "mbconv", "special")


@dataclass(frozen=True)
class OpSpec:
    name: str
    category: str
    kernel: Optional[int] = None
    expansion: Optional[int] = None
    stride_capable: bool = True
    has_weights: bool = True

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ConfigError(f"Unknown op category: {self.category}")
        if self.kernel is not None and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ConfigError(f"{self.name}: kernel must be a positive odd integer")
        if self.expansion is not None and self.category != "mbconv":
            raise ConfigError(f"{self.name}: expansion is only defined for the MBConv family")

    def to_dict(self) -> Dict:
        return {"name": self.name, "category": self.category, "kernel": self.kernel, "expansion": self.expansion}


def _catalog() -> Dict[str, OpSpec]:
    specs: List[OpSpec] = []
    for k in (3, 5):
        specs.append(OpSpec(f"conv_{k}", "basic", kernel=k))
        specs.append(OpSpec(f"depthwise_conv_{k}", "basic", kernel=k))
    for name in ("relu", "leaky_relu", "sigmoid", "tanh"):
        specs.append(OpSpec(name, "basic", stride_capable=False, has_weights=False))
    specs.append(OpSpec("batch_norm", "basic", stride_capable=False))
    for k in (3, 5):
        specs.append(OpSpec(f"minimum_conv_{k}", "simple", kernel=k))
        specs.append(OpSpec(f"standard_conv_{k}", "simple", kernel=k))
    for k in (7, 9):
        specs.append(OpSpec(f"factorized_conv_{k}", "simple", kernel=k))
    specs.append(OpSpec("identity", "darts", stride_capable=False, has_weights=False))
    for k in (3, 5):
        specs.append(OpSpec(f"max_pool_{k}", "darts", kernel=k, has_weights=False))
        specs.append(OpSpec(f"avg_pool_{k}", "darts", kernel=k, has_weights=False))
        specs.append(OpSpec(f"sep_conv_{k}", "darts", kernel=k))
        specs.append(OpSpec(f"dil_conv_{k}", "darts", kernel=k))
    for k in (3, 5):
        specs.append(OpSpec(f"mbconv_{k}", "mbconv", kernel=k, expansion=MBCONV_V1_EXPANSION))
        for g in (1, 4, 6):
            specs.append(OpSpec(f"mbconv_v2_{k}_g{g}", "mbconv", kernel=k, expansion=g))
    for g in (1, 4, 6):
        specs.append(OpSpec(f"fused_mbconv_3_g{g}", "mbconv", kernel=3, expansion=g))
    specs.append(OpSpec(ZERO_OP, "special", has_weights=False))
    specs.append(OpSpec(RANDOM_OP, "special", has_weights=False))
    return {spec.name: spec for spec in specs}


CATALOG: Dict[str, OpSpec] = _catalog()

STARRED = ("identity", "max_pool_3", "avg_pool_3")

SPACES: Dict[str, tuple] = {
    "1": ("conv_3", "conv_5", "depthwise_conv_3", "depthwise_conv_5", "relu", "leaky_relu", "batch_norm", *STARRED),
    "2": (
        "minimum_conv_3",
        "minimum_conv_5",
        "standard_conv_3",
        "standard_conv_5",
        "factorized_conv_7",
        "factorized_conv_9",
        *STARRED,
    ),
    "3": (*STARRED, "sep_conv_3", "sep_conv_5", "dil_conv_3", "dil_conv_5"),
    "4": ("mbconv_3", "mbconv_v2_3_g1", "fused_mbconv_3_g1", *STARRED),
    # MBConv appears with both kernel sizes here, unlike space 4.
    "combined": (
        "relu",
        "leaky_relu",
        "sigmoid",
        "tanh",
        "batch_norm",
        "identity",
        "conv_3",
        "conv_5",
        "max_pool_3",
        "max_pool_5",
        "avg_pool_3",
        "avg_pool_5",
        "minimum_conv_3",
        "minimum_conv_5",
        "standard_conv_3",
        "standard_conv_5",
        "factorized_conv_7",
        "factorized_conv_9",
        "sep_conv_3",
        "sep_conv_5",
        "dil_conv_3",
        "dil_conv_5",
        "mbconv_3",
        "mbconv_5",
        *(f"mbconv_v2_{k}_g{g}" for k in (3, 5) for g in (1, 4, 6)),
        *(f"fused_mbconv_3_g{g}" for g in (1, 4, 6)),
    ),
}

CURATED_SPACES = ("1", "2", "3", "4")


def normalize_space_id(space_id) -> str:
    key = str(space_id).strip().lower()
    if key not in SPACES:
        raise ConfigError(f"Unknown search space: {space_id}")
    return key


def get_spec(name: str) -> OpSpec:
    try:
        return CATALOG[name]
    except KeyError as exc:
        raise ArchitectureError(f"Unknown operation: {name}") from exc


def resolve_space(
    space_id,
    zero_config: "ZeroConfig | str",
    phase: str,
    exclude: Iterable[str] = (),
) -> List[OpSpec]:
    """Ordered candidate list of ``space_id`` for ``phase``, special slot last."""
    space = normalize_space_id(space_id)
    config = get_zero_config(zero_config)
    excluded = set(exclude)
    unknown = excluded - set(CATALOG)
    if unknown:
        raise ConfigError(f"Cannot exclude unknown operations: {sorted(unknown)}")
    names = [name for name in SPACES[space] if name not in excluded]
    slot = config.slot(phase)
    if slot is not None:
        names.append(slot)
    if not names:
        raise ConfigError(f"Search space {space} is empty after exclusions")
    return [CATALOG[name] for name in names]


def export_space_json(specs: Sequence[OpSpec]) -> str:
    return json.dumps([spec.to_dict() for spec in specs], indent=2)


# =============================================================================
# SPECIAL FORWARDS
# =============================================================================


def zero_forward(x: torch.Tensor, stride: int, out_channels: Optional[int] = None) -> torch.Tensor:
    zeros = x[:, :, ::stride, ::stride].mul(0.0)
    if out_channels is not None and out_channels != x.shape[1]:
        zeros = zeros.sum(dim=1, keepdim=True).expand(-1, out_channels, -1, -1)
    return zeros


def random_forward(
    x: torch.Tensor,
    stride: int,
    rng_state: Optional[torch.Generator] = None,
    high: float = 1.0,
    out_channels: Optional[int] = None,
) -> torch.Tensor:
    """Uniform noise on [0, high); stays attached to ``x`` with a zero gradient."""
    anchor = zero_forward(x, stride, out_channels)
    noise = torch.rand(anchor.shape, generator=rng_state, dtype=x.dtype, device=x.device)
    return anchor + noise * high


# =============================================================================
# BUILDING BLOCKS
# =============================================================================


def _bn(channels: int, affine: bool = True) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM, affine=affine)


class Zero(nn.Module):
    def __init__(self, stride: int, out_channels: int):
        super().__init__()
        self.stride = stride
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return zero_forward(x, self.stride, self.out_channels)


class RandomNoise(nn.Module):
    def __init__(self, stride: int, out_channels: int, generator: Optional[torch.Generator], high: float = 1.0):
        super().__init__()
        self.stride = stride
        self.out_channels = out_channels
        self.generator = generator
        self.high = high

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return random_forward(x, self.stride, self.generator, self.high, self.out_channels)


class FactorizedReduce(nn.Module):
    """Two stride-2 1x1 convs on pixel grids offset by one, concatenated, then BN."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        half = out_channels // 2
        self.conv_1 = nn.Conv2d(in_channels, half, 1, stride=2, padding=0, bias=False)
        self.conv_2 = nn.Conv2d(in_channels, out_channels - half, 1, stride=2, padding=0, bias=False)
        self.bn = _bn(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.cat([self.conv_1(x), self.conv_2(x[:, :, 1:, 1:])], dim=1)
        return self.bn(out)


class ReLUConvBN(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, stride: int = 1, relu: bool = True):
        layers: List[nn.Module] = [nn.ReLU(inplace=False)] if relu else []
        layers += [
            nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2, bias=False),
            _bn(out_channels),
        ]
        super().__init__(*layers)


class SepConv(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        pad = kernel // 2
        super().__init__(
            nn.ReLU(inplace=False),
            nn.Conv2d(in_channels, in_channels, kernel, stride=stride, padding=pad, groups=in_channels, bias=False),
            nn.Conv2d(in_channels, in_channels, 1, bias=False),
            _bn(in_channels),
            nn.ReLU(inplace=False),
            nn.Conv2d(in_channels, in_channels, kernel, stride=1, padding=pad, groups=in_channels, bias=False),
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            _bn(out_channels),
        )


class DilConv(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, dilation: int = 2):
        super().__init__(
            nn.ReLU(inplace=False),
            nn.Conv2d(
                in_channels,
                in_channels,
                kernel,
                stride=stride,
                padding=dilation * (kernel - 1) // 2,
                dilation=dilation,
                groups=in_channels,
                bias=False,
            ),
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            _bn(out_channels),
        )


class FactorizedConv(nn.Sequential):
    """1xk followed by kx1, as in the NASNet space."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        pad = kernel // 2
        super().__init__(
            nn.ReLU(inplace=False),
            nn.Conv2d(in_channels, in_channels, (1, kernel), stride=(1, stride), padding=(0, pad), bias=False),
            nn.Conv2d(in_channels, out_channels, (kernel, 1), stride=(stride, 1), padding=(pad, 0), bias=False),
            _bn(out_channels),
        )


class Pool(nn.Module):
    def __init__(self, kind: str, kernel: int, stride: int, channels: int, with_bn: bool = False):
        super().__init__()
        self.kind = kind
        self.kernel = kernel
        self.stride = stride
        self.bn = _bn(channels, affine=False) if with_bn else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pad = self.kernel // 2
        if self.kind == "max":
            out = F.max_pool2d(F.pad(x, (pad, pad, pad, pad)), self.kernel, self.stride)
        else:
            out = F.avg_pool2d(x, self.kernel, self.stride, padding=pad, count_include_pad=False)
        return self.bn(out) if self.bn is not None else out


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, squeezed: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, squeezed, 1)
        self.expand = nn.Conv2d(squeezed, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = F.adaptive_avg_pool2d(x, 1)
        scale = torch.sigmoid(self.expand(F.silu(self.reduce(scale))))
        return x * scale


class _Residual(nn.Module):
    def __init__(self, block: nn.Module, residual: bool):
        super().__init__()
        self.block = block
        self.residual = residual

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.block(x)
        return x + out if self.residual else out


def _mbconv_v1(in_channels: int, out_channels: int, kernel: int, stride: int, expansion: int) -> nn.Module:
    hidden = in_channels * expansion
    block = nn.Sequential(
        nn.Conv2d(in_channels, hidden, 1, bias=False),
        _bn(hidden),
        nn.ReLU6(inplace=False),
        nn.Conv2d(hidden, hidden, kernel, stride=stride, padding=kernel // 2, groups=hidden, bias=False),
        _bn(hidden),
        nn.ReLU6(inplace=False),
        nn.Conv2d(hidden, out_channels, 1, bias=False),
        _bn(out_channels),
    )
    return _Residual(block, stride == 1 and in_channels == out_channels)


def _mbconv_v2(in_channels: int, out_channels: int, kernel: int, stride: int, expansion: int) -> nn.Module:
    hidden = in_channels * expansion
    layers: List[nn.Module] = []
    if expansion != 1:
        layers += [nn.Conv2d(in_channels, hidden, 1, bias=False), _bn(hidden), nn.SiLU()]
    layers += [
        nn.Conv2d(hidden, hidden, kernel, stride=stride, padding=kernel // 2, groups=hidden, bias=False),
        _bn(hidden),
        nn.SiLU(),
        SqueezeExcite(hidden, max(1, in_channels // 4)),
        nn.Conv2d(hidden, out_channels, 1, bias=False),
        _bn(out_channels),
    ]
    return _Residual(nn.Sequential(*layers), stride == 1 and in_channels == out_channels)


def _fused_mbconv(in_channels: int, out_channels: int, kernel: int, stride: int, expansion: int) -> nn.Module:
    if expansion == 1:
        block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2, bias=False),
            _bn(out_channels),
            nn.SiLU(),
        )
    else:
        hidden = in_channels * expansion
        block = nn.Sequential(
            nn.Conv2d(in_channels, hidden, kernel, stride=stride, padding=kernel // 2, bias=False),
            _bn(hidden),
            nn.SiLU(),
            nn.Conv2d(hidden, out_channels, 1, bias=False),
            _bn(out_channels),
        )
    return _Residual(block, stride == 1 and in_channels == out_channels)


def _shape_preserving(layer: nn.Module, in_channels: int, out_channels: int, stride: int) -> nn.Module:
    """Channel-preserving, non-striding layer adapted to the edge's stride and width."""
    if stride == 2:
        return nn.Sequential(layer, FactorizedReduce(in_channels, out_channels))
    if in_channels != out_channels:
        return nn.Sequential(layer, ReLUConvBN(in_channels, out_channels, relu=False))
    return layer


_ACTIVATIONS: Dict[str, Callable[[], nn.Module]] = {
    "relu": lambda: nn.ReLU(inplace=False),
    "leaky_relu": lambda: nn.LeakyReLU(0.01, inplace=False),
    "sigmoid": nn.Sigmoid,
    "tanh": nn.Tanh,
}


def _build(
    spec: OpSpec,
    in_channels: int,
    out_channels: int,
    stride: int,
    generator: Optional[torch.Generator],
    pool_bn: bool,
    random_high: float,
) -> nn.Module:
    name, k = spec.name, spec.kernel
    if name == ZERO_OP:
        return Zero(stride, out_channels)
    if name == RANDOM_OP:
        return RandomNoise(stride, out_channels, generator, random_high)
    if name == "identity":
        if stride == 2:
            return FactorizedReduce(in_channels, out_channels)
        return nn.Identity() if in_channels == out_channels else ReLUConvBN(in_channels, out_channels, relu=False)
    if name in _ACTIVATIONS:
        return _shape_preserving(_ACTIVATIONS[name](), in_channels, out_channels, stride)
    if name == "batch_norm":
        return _shape_preserving(_bn(in_channels), in_channels, out_channels, stride)
    if name.startswith("max_pool") or name.startswith("avg_pool"):
        pool = Pool(name.split("_")[0], k, stride, in_channels, with_bn=pool_bn)
        if in_channels != out_channels:
            return nn.Sequential(pool, ReLUConvBN(in_channels, out_channels, relu=False))
        return pool
    if name.startswith("conv_"):
        return nn.Conv2d(in_channels, out_channels, k, stride=stride, padding=k // 2, bias=False)
    if name.startswith("depthwise_conv"):
        if out_channels % in_channels:
            raise ArchitectureError(f"{name}: out_channels must be a multiple of in_channels")
        return nn.Conv2d(in_channels, out_channels, k, stride=stride, padding=k // 2, groups=in_channels, bias=False)
    if name.startswith("minimum_conv"):
        return ReLUConvBN(in_channels, out_channels, k, stride, relu=False)
    if name.startswith("standard_conv"):
        return ReLUConvBN(in_channels, out_channels, k, stride, relu=True)
    if name.startswith("factorized_conv"):
        return FactorizedConv(in_channels, out_channels, k, stride)
    if name.startswith("sep_conv"):
        return SepConv(in_channels, out_channels, k, stride)
    if name.startswith("dil_conv"):
        return DilConv(in_channels, out_channels, k, stride)
    if name.startswith("mbconv_v2"):
        return _mbconv_v2(in_channels, out_channels, k, stride, spec.expansion)
    if name.startswith("fused_mbconv"):
        return _fused_mbconv(in_channels, out_channels, k, stride, spec.expansion)
    if name.startswith("mbconv"):
        return _mbconv_v1(in_channels, out_channels, k, stride, spec.expansion)
    raise ArchitectureError(f"Unknown operation: {name}")


def init_weights(module: nn.Module) -> None:
    """Kaiming-uniform convs and linears, unit-scale zero-shift batch-norm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            if m.bias is not None:
                fan_in = m.weight[0].numel()
                bound = 1 / math.sqrt(fan_in) if fan_in > 0 else 0
                nn.init.uniform_(m.bias, -bound, bound)
        elif isinstance(m, nn.BatchNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def seeded_build(factory: Callable[[], nn.Module], rng_seed: int) -> nn.Module:
    """Build and initialise a module under its own seed, leaving the global RNG alone."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng_seed))
        module = factory()
        init_weights(module)
    return module


class OperationInstance(nn.Module):
    def __init__(self, spec: OpSpec, in_channels: int, out_channels: int, stride: int, op: nn.Module):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.op = op

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.op(x)

    def extra_repr(self) -> str:
        return f"{self.spec.name}, {self.in_channels}->{self.out_channels}, stride={self.stride}"


def instantiate(
    spec: "OpSpec | str",
    in_channels: int,
    out_channels: int,
    stride: int = 1,
    rng_seed: int = 0,
    *,
    generator: Optional[torch.Generator] = None,
    pool_bn: bool = False,
    random_high: float = 1.0,
) -> OperationInstance:
    if isinstance(spec, str):
        spec = get_spec(spec)
    if stride not in (1, 2):
        raise ArchitectureError(f"stride must be 1 or 2, got {stride}")
    if in_channels < 1 or out_channels < 1:
        raise ArchitectureError("channel counts must be positive")
    op = seeded_build(lambda: _build(spec, in_channels, out_channels, stride, generator, pool_bn, random_high), rng_seed)
    return OperationInstance(spec, in_channels, out_channels, stride, op)
