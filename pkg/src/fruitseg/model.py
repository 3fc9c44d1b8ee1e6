"""
Three-branch boundary-aware segmentation network.

Architecture:
    - Encoder: ResNet-18 (BasicBlock stages at strides 4/8/16/32)
    - Spatial branch (P): two ConvBNReLU layers over the stride-8 features
    - Context branch (I): stride-2 Bottleneck to stride 64, PAPPM, upsample to stride 8
    - Auxiliary derivative branch (D): two residual stages over f8 (+ f16),
      supervised by a boundary head during training only
    - Boundary attention guided fusion of P and I, weighted by sigmoid(A(D))
    - Segmentation head at stride 8, bilinear x8 to input resolution

The ``two_branch`` variant drops the derivative branch, the boundary head and
the attention fusion; P and I are summed before a ConvBNReLU.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from fruitseg.errors import ConfigError, ShapeError, UnsupportedVariantError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
ALIGN_CORNERS = False
INPUT_STRIDE = 64

VARIANTS = ("three_branch", "two_branch")
ENCODER_PREFIX = "encoder."
# layers whose shape depends on num_classes
CLASS_DEPENDENT_PREFIXES = ("seg_head.classifier.",)


@dataclass(frozen=True)
class ArchitectureConfig:
    variant: str = "three_branch"
    num_classes: int = 3
    branch_width: int = 128
    head_width: int = 256
    ppm_branch_width: int = 96
    encoder_stage_channels: tuple = (64, 128, 256, 512)
    # inner width of the stride-64 bottleneck; its output is 4x this
    context_planes: int = 512
    input_stride_requirement: int = INPUT_STRIDE

    def __post_init__(self):
        object.__setattr__(
            self, "encoder_stage_channels", tuple(int(c) for c in self.encoder_stage_channels)
        )
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("branch_width", "head_width", "ppm_branch_width", "context_planes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        chans = self.encoder_stage_channels
        if len(chans) != 4:
            raise ConfigError(f"encoder_stage_channels needs 4 entries, got {len(chans)}")
        if any(c <= 0 for c in chans) or any(a >= b for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"encoder_stage_channels must be positive and strictly increasing: {chans}")
        if self.input_stride_requirement != INPUT_STRIDE:
            raise ConfigError(f"input_stride_requirement is fixed at {INPUT_STRIDE}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_stage_channels"] = list(self.encoder_stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    seg_logits: torch.Tensor
    boundary_logits: Optional[torch.Tensor] = None


def _upsample(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=ALIGN_CORNERS)


def _bn(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


def conv3x3(in_planes: int, out_planes: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=stride, padding=1, bias=False)


def conv1x1(in_planes: int, out_planes: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_planes, out_planes, kernel_size=1, stride=stride, bias=False)


class ConvBNReLU(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=False
        )
        self.bn = _bn(out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.bn(self.conv(x)))


def _bn_relu_conv(in_channels: int, out_channels: int, kernel_size: int = 1, groups: int = 1):
    return nn.Sequential(
        _bn(in_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(
            in_channels, out_channels, kernel_size, padding=kernel_size // 2, groups=groups, bias=False
        ),
    )


class BasicBlock(nn.Module):
    """ResNet basic residual block (two 3x3 convs)."""

    expansion = 1

    def __init__(self, inplanes: int, planes: int, stride: int = 1, downsample: Optional[nn.Module] = None):
        super().__init__()
        self.conv1 = conv3x3(inplanes, planes, stride)
        self.bn1 = _bn(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = _bn(planes)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    """ResNet-50 style bottleneck block (1x1 -> 3x3 -> 1x1, expansion 4)."""

    expansion = 4

    def __init__(self, inplanes: int, planes: int, stride: int = 1, downsample: Optional[nn.Module] = None):
        super().__init__()
        self.conv1 = conv1x1(inplanes, planes)
        self.bn1 = _bn(planes)
        self.conv2 = conv3x3(planes, planes, stride)
        self.bn2 = _bn(planes)
        self.conv3 = conv1x1(planes, planes * self.expansion)
        self.bn3 = _bn(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _projection(inplanes: int, planes: int, stride: int) -> nn.Sequential:
    return nn.Sequential(conv1x1(inplanes, planes, stride), _bn(planes))


def _make_layer(inplanes: int, planes: int, blocks: int, stride: int) -> nn.Sequential:
    downsample = None
    if stride != 1 or inplanes != planes:
        downsample = _projection(inplanes, planes, stride)
    layers = [BasicBlock(inplanes, planes, stride, downsample)]
    layers += [BasicBlock(planes, planes) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class ResNet18Encoder(nn.Module):
    """ResNet-18 trunk without the classifier.

    Parameter names match the torchvision/timm ``resnet18`` layout
    (``conv1``, ``bn1``, ``layer1`` .. ``layer4``) so ImageNet weights load
    directly.
    """

    def __init__(self, channels=(64, 128, 256, 512)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.conv1 = nn.Conv2d(3, c1, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = _bn(c1)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = _make_layer(c1, c1, 2, 1)
        self.layer2 = _make_layer(c1, c2, 2, 2)
        self.layer3 = _make_layer(c2, c3, 2, 2)
        self.layer4 = _make_layer(c3, c4, 2, 2)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f4 = self.layer1(x)
        f8 = self.layer2(f4)
        f16 = self.layer3(f8)
        f32 = self.layer4(f16)
        return f4, f8, f16, f32


class PAPPM(nn.Module):
    """Parallel aggregation pyramid pooling.

    Four average-pooling scales plus global pooling are computed from the same
    input; every pooled map is upsampled, added to the unpooled projection and
    refined by one grouped 3x3 conv in parallel (one group per scale).
    """

    POOLS = ((5, 2, 2), (9, 4, 4), (17, 8, 8), (33, 16, 16))

    def __init__(self, in_channels: int, branch_channels: int, out_channels: int):
        super().__init__()
        pools = [
            nn.AvgPool2d(kernel_size=k, stride=s, padding=p, count_include_pad=False)
            for k, s, p in self.POOLS
        ]
        pools.append(nn.AdaptiveAvgPool2d((1, 1)))
        self.pools = nn.ModuleList(pools)
        n = len(pools)
        self.scale0 = _bn_relu_conv(in_channels, branch_channels)
        self.scales = nn.ModuleList(_bn_relu_conv(in_channels, branch_channels) for _ in range(n))
        self.scale_process = _bn_relu_conv(branch_channels * n, branch_channels * n, 3, groups=n)
        self.compression = _bn_relu_conv(branch_channels * (n + 1), out_channels)
        self.shortcut = _bn_relu_conv(in_channels, out_channels)

    def pooled(self, x: torch.Tensor) -> list:
        """Raw pooled maps, one per scale, before any projection."""
        return [pool(x) for pool in self.pools]

    def forward(self, x):
        size = x.shape[-2:]
        x0 = self.scale0(x)
        feats = [
            _upsample(scale(p), size) + x0 for scale, p in zip(self.scales, self.pooled(x))
        ]
        processed = self.scale_process(torch.cat(feats, dim=1))
        return self.compression(torch.cat([x0, processed], dim=1)) + self.shortcut(x)


class ContextBranch(nn.Module):
    def __init__(self, in_channels: int, planes: int, ppm_channels: int, out_channels: int):
        super().__init__()
        self.bottleneck = Bottleneck(
            in_channels, planes, stride=2,
            downsample=_projection(in_channels, planes * Bottleneck.expansion, 2),
        )
        self.pappm = PAPPM(planes * Bottleneck.expansion, ppm_channels, out_channels)

    def forward(self, f32: torch.Tensor, out_size=None) -> torch.Tensor:
        h, w = f32.shape[-2:]
        if h < 4 or w < 4:
            raise ShapeError(
                f"context branch needs a stride-64 map of at least 2x2; got stride-32 input {h}x{w}"
            )
        if out_size is None:
            out_size = (h * 4, w * 4)
        return _upsample(self.pappm(self.bottleneck(f32)), out_size)


class AuxiliaryDerivativeBranch(nn.Module):
    """Two residual stages at stride 8; stage 2 also sees projected f16."""

    def __init__(self, c8: int, c16: int, width: int):
        super().__init__()
        down = None if c8 == width else _projection(c8, width, 1)
        self.stage1 = nn.Sequential(BasicBlock(c8, width, downsample=down), BasicBlock(width, width))
        self.proj16 = _projection(c16, width, 1)
        self.stage2 = nn.Sequential(BasicBlock(width, width), BasicBlock(width, width))

    def forward(self, f8, f16):
        d = self.stage1(f8)
        d = d + _upsample(self.proj16(f16), d.shape[-2:])
        return self.stage2(d)


def _check_same_shape(*tensors):
    shapes = [tuple(t.shape) for t in tensors]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"fusion inputs must share shape, got {shapes}")


class BoundaryAttentionFusion(nn.Module):
    """fused = ConvBNReLU(s * P + (1 - s) * I), s = sigmoid(A(D)) broadcast over channels."""

    def __init__(self, width: int):
        super().__init__()
        self.attention = nn.Conv2d(width, 1, kernel_size=1, bias=True)
        self.fuse = ConvBNReLU(width, width)

    def blend(self, p, i, d):
        _check_same_shape(p, i, d)
        s = torch.sigmoid(self.attention(d))
        return s * p + (1 - s) * i

    def forward(self, p, i, d):
        return self.fuse(self.blend(p, i, d))


class AdditiveFusion(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fuse = ConvBNReLU(width, width)

    def forward(self, p, i):
        _check_same_shape(p, i)
        return self.fuse(p + i)


class SegmentationHead(nn.Module):
    def __init__(self, in_channels: int, head_width: int, num_classes: int):
        super().__init__()
        self.block = ConvBNReLU(in_channels, head_width)
        self.classifier = nn.Conv2d(head_width, num_classes, kernel_size=1, bias=True)

    def forward(self, x):
        return self.classifier(self.block(x))


class FruitSegNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        c4, c8, c16, c32 = cfg.encoder_stage_channels
        bw = cfg.branch_width
        self.encoder = ResNet18Encoder(cfg.encoder_stage_channels)
        self.spatial = nn.Sequential(ConvBNReLU(c8, bw), ConvBNReLU(bw, bw))
        self.context = ContextBranch(c32, cfg.context_planes, cfg.ppm_branch_width, bw)
        if cfg.variant == "three_branch":
            self.adb = AuxiliaryDerivativeBranch(c8, c16, bw)
            self.boundary_head = nn.Conv2d(bw, 1, kernel_size=1, bias=True)
            self.bag = BoundaryAttentionFusion(bw)
        else:
            self.fuse = AdditiveFusion(bw)
        self.seg_head = SegmentationHead(bw, cfg.head_width, cfg.num_classes)

    @property
    def three_branch(self) -> bool:
        return self.cfg.variant == "three_branch"

    def encode(self, images: torch.Tensor):
        """Run the encoder; returns (f4, f8, f16, f32)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images of shape (N, 3, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        for name, size in (("H", h), ("W", w)):
            if size % INPUT_STRIDE:
                raise ShapeError(f"input {name}={size} is not divisible by {INPUT_STRIDE}")
        return self.encoder(images)

    def spatial_branch(self, f8: torch.Tensor) -> torch.Tensor:
        expected = self.cfg.encoder_stage_channels[1]
        if f8.shape[1] != expected:
            raise ShapeError(f"spatial branch expects {expected} channels, got {f8.shape[1]}")
        return self.spatial(f8)

    def context_branch(self, f32: torch.Tensor, out_size=None) -> torch.Tensor:
        return self.context(f32, out_size)

    def adb_forward(self, f8: torch.Tensor, f16: torch.Tensor):
        """Derivative-branch features and low-resolution boundary logits."""
        if not self.three_branch:
            raise UnsupportedVariantError("the two_branch variant has no auxiliary derivative branch")
        d = self.adb(f8, f16)
        return d, self.boundary_head(d)

    def bag_fuse(self, p, i, d) -> torch.Tensor:
        if not self.three_branch:
            raise UnsupportedVariantError("the two_branch variant has no boundary attention fusion")
        return self.bag(p, i, d)

    def two_branch_fuse(self, p, i) -> torch.Tensor:
        if self.three_branch:
            raise UnsupportedVariantError("additive fusion exists only in the two_branch variant")
        return self.fuse(p, i)

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        size = images.shape[-2:]
        _, f8, f16, f32 = self.encode(images)
        p = self.spatial_branch(f8)
        i = self.context_branch(f32, f8.shape[-2:])
        boundary = None
        if self.three_branch:
            d = self.adb(f8, f16)
            fused = self.bag(p, i, d)
            if self.training:
                boundary = _upsample(self.boundary_head(d), size)
        else:
            fused = self.fuse(p, i)
        seg = _upsample(self.seg_head(fused), size)
        return ForwardOutput(seg_logits=seg, boundary_logits=boundary)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(cfg: Optional[ArchitectureConfig] = None, seed: int = 0) -> FruitSegNet:
    """Build a model with all weights drawn deterministically from ``seed``."""
    cfg = cfg or ArchitectureConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FruitSegNet(cfg)
        init_weights(model)
    return model


def reinit_parameters(model: nn.Module, prefixes, seed: int) -> None:
    """Re-draw the weights of submodules whose path starts with any of ``prefixes``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for name, m in model.named_modules():
            if any((name + ".").startswith(p) for p in prefixes):
                init_weights(m)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
