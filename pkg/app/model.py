from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import ClassVar, Self, override

import torch
from torch import Tensor, nn

from app.runtime import ConfigError, ShapeError
from app.volume import BRANCH_A, BRANCH_B, MODALITIES


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 3
    base_channels: int = 8
    num_classes: int = 4
    deep_supervision_levels: int = 1
    in_channels: int = 2
    """Per branch. The single-branch net takes both branches' worth"""
    max_channels: int = 320
    negative_slope: float = 0.01
    seed: int = 0

    def validate(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if not 0 <= self.deep_supervision_levels <= self.depth - 2:
            levels = self.deep_supervision_levels
            raise ConfigError(f"deep_supervision_levels must be in [0, {self.depth - 2}], got {levels}")
        if self.base_channels < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ConfigError(f"Channel counts must be positive: {self}")

    def channels(self, level: int):
        return min(self.base_channels * 2**level, self.max_channels)

    @property
    def divisor(self):
        """Spatial dims must be multiples of this"""
        return 2 ** (self.depth - 1)


@dataclass(frozen=True)
class BranchInput:
    """Branch A is (Flair, T2), branch B is (T1ce, T1); each N x 2 x d x h x w"""

    a: Tensor
    b: Tensor

    def __post_init__(self):
        if self.a.ndim != 5 or self.a.shape[0] != self.b.shape[0] or self.a.shape[2:] != self.b.shape[2:]:
            raise ShapeError(f"Branch shapes {tuple(self.a.shape)} and {tuple(self.b.shape)} don't pair up")

    @classmethod
    def from_stack(cls, x: Tensor) -> Self:
        """x is N x 4 x d x h x w in MODALITIES order"""
        a = x[:, [MODALITIES.index(m) for m in BRANCH_A]]
        b = x[:, [MODALITIES.index(m) for m in BRANCH_B]]
        return cls(a, b)

    @property
    def spatial(self):
        return tuple(self.a.shape[2:])

    def to(self, device: torch.device | str) -> Self:
        return type(self)(self.a.to(device), self.b.to(device))


@dataclass
class ForwardOutput:
    logits: Tensor
    aux_logits: list[Tensor]
    """Index s - 1 holds deep-supervision level s, at 1 / 2**s resolution"""
    features_a: Tensor
    features_b: Tensor | None
    """None for the single-branch net, which has nothing to pair"""


class ConvUnit(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int, negative_slope: float):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm3d(out_channels, eps=1e-5, affine=True)
        self.act = nn.LeakyReLU(negative_slope)


class ConvBlock(nn.Module):
    """Two units of 3x3x3 convolution, instance norm, leaky ReLU. Only the first unit strides."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, negative_slope: float = 0.01):
        super().__init__()
        self.in_channels = in_channels
        self.unit1 = ConvUnit(in_channels, out_channels, stride, negative_slope)
        self.unit2 = ConvUnit(out_channels, out_channels, 1, negative_slope)

    @override
    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"Block expects {self.in_channels} channels, got {x.shape[1]}")
        return self.unit2(self.unit1(x))


def init_weights(module: nn.Module):
    if isinstance(module, nn.Conv3d | nn.ConvTranspose3d):
        nn.init.kaiming_normal_(module.weight, a=0.01, nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def cat(*xs: Tensor):
    return torch.cat(xs, dim=1)


class SegmentationNet(nn.Module, ABC):
    arch: ClassVar[str]

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config

    def check_input(self, x: BranchInput):
        if any(d % self.config.divisor for d in x.spatial):
            raise ShapeError(f"Spatial dims {x.spatial} must be divisible by {self.config.divisor}")

    def upsampler(self, level: int):
        """Transposed convolution from level + 1 up to level"""
        c = self.config
        return nn.ConvTranspose3d(c.channels(level + 1), c.channels(level), kernel_size=2, stride=2)

    def block(self, in_channels: int, level: int, stride: int = 1):
        return ConvBlock(in_channels, self.config.channels(level), stride, self.config.negative_slope)

    @override
    def __call__(self, x: BranchInput) -> ForwardOutput:
        return super().__call__(x)

    @abstractmethod
    def forward(self, x: BranchInput) -> ForwardOutput: ...


class ModalityPairingNet(SegmentationNet):
    """Two U-Nets over (Flair, T2) and (T1ce, T1), cross-connected at every level below the first,
    with skips carrying both branches and one classifier over the fused final features.
    """

    arch = "dual"

    def __init__(self, config: NetworkConfig):
        super().__init__(config)
        c = config
        levels = range(c.depth)

        def encoder():
            first = [self.block(c.in_channels, 0)]
            return nn.ModuleList(first + [self.block(2 * c.channels(i - 1), i, stride=2) for i in levels[1:]])

        def upsamplers():
            return nn.ModuleList(self.upsampler(j) for j in levels[:-1])

        def decoder():
            return nn.ModuleList(self.block(3 * c.channels(j), j) for j in levels[:-1])

        self.encoder_a, self.encoder_b = encoder(), encoder()
        self.up_a, self.up_b = upsamplers(), upsamplers()
        self.decoder_a, self.decoder_b = decoder(), decoder()
        self.heads = nn.ModuleList(
            nn.Conv3d(2 * c.channels(s), c.num_classes, kernel_size=1)
            for s in range(1, c.deep_supervision_levels + 1)
        )
        self.fusion = nn.Conv3d(2 * c.channels(0), c.num_classes, kernel_size=1)

    def encoder_forward(self, in_a: Tensor, in_b: Tensor):
        """Per-level features of both branches, full resolution first"""
        xa, xb = self.encoder_a[0](in_a), self.encoder_b[0](in_b)
        feats_a, feats_b = [xa], [xb]
        for block_a, block_b in zip(self.encoder_a[1:], self.encoder_b[1:], strict=True):
            xa, xb = block_a(cat(xa, xb)), block_b(cat(xb, xa))
            feats_a.append(xa)
            feats_b.append(xb)
        return feats_a, feats_b

    def decoder_forward(self, feats_a: list[Tensor], feats_b: list[Tensor]):
        """Decoder features of both branches for levels 0 .. depth - 2, full resolution first"""
        depth = self.config.depth
        if len(feats_a) != depth or len(feats_b) != depth:
            got = (len(feats_a), len(feats_b))
            raise ShapeError(f"Need encoder features for {depth} levels, got {got}")

        xa, xb = feats_a[-1], feats_b[-1]
        dec_a, dec_b = [], []
        for j in reversed(range(depth - 1)):
            ua, ub = self.up_a[j](xa), self.up_b[j](xb)
            if ua.shape[2:] != feats_a[j].shape[2:] or ub.shape[2:] != feats_b[j].shape[2:]:
                skip = tuple(feats_a[j].shape)
                raise ShapeError(f"Level {j}: upsampled {tuple(ua.shape)} doesn't match skip {skip}")
            xa = self.decoder_a[j](cat(ua, feats_a[j], feats_b[j]))
            xb = self.decoder_b[j](cat(ub, feats_b[j], feats_a[j]))
            dec_a.append(xa)
            dec_b.append(xb)
        return dec_a[::-1], dec_b[::-1]

    def fuse_and_classify(self, xa: Tensor, xb: Tensor) -> Tensor:
        if xa.shape != xb.shape:
            raise ShapeError(f"Can't fuse {tuple(xa.shape)} with {tuple(xb.shape)}")
        return self.fusion(cat(xa, xb))

    def deep_supervision_head(self, xa: Tensor, xb: Tensor, level: int) -> Tensor:
        if not 1 <= level <= len(self.heads):
            raise ShapeError(f"Deep supervision level {level} out of range 1..{len(self.heads)}")
        return self.heads[level - 1](cat(xa, xb))

    @override
    def forward(self, x: BranchInput) -> ForwardOutput:
        self.check_input(x)
        dec_a, dec_b = self.decoder_forward(*self.encoder_forward(x.a, x.b))
        aux = [self.deep_supervision_head(dec_a[s], dec_b[s], s) for s in range(1, len(self.heads) + 1)]
        return ForwardOutput(self.fuse_and_classify(dec_a[0], dec_b[0]), aux, dec_a[0], dec_b[0])


class VanillaUNet(SegmentationNet):
    """Single-branch baseline: all four modalities stacked at the input"""

    arch = "vanilla"

    def __init__(self, config: NetworkConfig):
        super().__init__(config)
        c = config
        levels = range(c.depth)
        first = [self.block(2 * c.in_channels, 0)]
        self.encoder = nn.ModuleList(first + [self.block(c.channels(i - 1), i, stride=2) for i in levels[1:]])
        self.up = nn.ModuleList(self.upsampler(j) for j in levels[:-1])
        self.decoder = nn.ModuleList(self.block(2 * c.channels(j), j) for j in levels[:-1])
        self.heads = nn.ModuleList(
            nn.Conv3d(c.channels(s), c.num_classes, kernel_size=1)
            for s in range(1, c.deep_supervision_levels + 1)
        )
        self.classifier = nn.Conv3d(c.channels(0), c.num_classes, kernel_size=1)

    @override
    def forward(self, x: BranchInput) -> ForwardOutput:
        self.check_input(x)
        h = cat(x.a, x.b)
        skips = []
        for block in self.encoder:
            h = block(h)
            skips.append(h)

        dec: list[Tensor] = []
        for j in reversed(range(self.config.depth - 1)):
            h = self.decoder[j](cat(self.up[j](h), skips[j]))
            dec.append(h)
        dec = dec[::-1]
        aux = [head(dec[s]) for s, head in enumerate(self.heads, start=1)]
        return ForwardOutput(self.classifier(dec[0]), aux, dec[0], None)


ARCHITECTURES: dict[str, type[SegmentationNet]] = {
    ModalityPairingNet.arch: ModalityPairingNet,
    VanillaUNet.arch: VanillaUNet,
}


def build_network(arch: str, config: NetworkConfig) -> SegmentationNet:
    """Deterministic He initialisation from config.seed, without touching the global RNG"""
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        known = ", ".join(ARCHITECTURES)
        raise ConfigError(f"Unknown architecture '{arch}', expected one of {known}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = cls(config)
        net.apply(init_weights)
    return net


def build_modality_pairing_net(config: NetworkConfig):
    return build_network(ModalityPairingNet.arch, config)


def build_vanilla_unet(config: NetworkConfig):
    return build_network(VanillaUNet.arch, config)


def count_parameters(net: nn.Module):
    return sum(p.numel() for p in net.parameters())


def device_of(net: nn.Module):
    try:
        return next(net.parameters()).device
    except StopIteration:
        return torch.device("cpu")


def resolve_device(name: str):
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)
