"""Dual-stream five-level feature extraction.

Two encoders produce side-outs at five levels. The default schedule for a
352 input is sides (88, 88, 44, 22, 11) with channels (64, 256, 512, 1024,
2048) for the ResNet-50 backbone. The toy backbone keeps the same spatial
schedule with a handful of channels so every architectural test runs on a
CPU in seconds.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torchvision

logger = logging.getLogger(__name__)

FULL_CHANNELS = (64, 256, 512, 1024, 2048)
STUDENT_LEVELS = (1, 2, 3)
TEACHER_LEVELS = (3, 4, 5)
SPLIT_LEVEL = 3


@dataclass
class BackboneConfig:
    kind: str = "full"  # full | toy
    shared_weights: bool = False
    use_dam: bool = False
    toy_channels: tuple = (8, 16, 32, 64, 64)
    weights: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("full", "toy"):
            raise ValueError(f"unknown backbone kind {self.kind!r} (expected 'full' or 'toy')")
        self.toy_channels = tuple(int(c) for c in self.toy_channels)
        if len(self.toy_channels) != 5 or min(self.toy_channels) < 1:
            raise ValueError("toy_channels must hold five positive ints")
        if self.shared_weights and not self.use_dam:
            logger.warning("shared backbone weights without the depth adapter; "
                           "depth is replicated to three channels")

    @property
    def channels(self) -> tuple:
        return FULL_CHANNELS if self.kind == "full" else self.toy_channels


@dataclass
class FeaturePyramid:
    levels: list
    modality: str = "rgb"  # rgb | depth | cross

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"a pyramid has exactly 5 levels, got {len(self.levels)}")
        sides = [f.shape[-1] for f in self.levels]
        if any(b > a for a, b in zip(sides, sides[1:])):
            raise ValueError(f"pyramid sides must be non-increasing, got {sides}")

    def __getitem__(self, level: int) -> torch.Tensor:
        # 1-based, matching the level numbering Conv1..Conv5
        return self.levels[level - 1]

    @property
    def sides(self) -> tuple:
        return tuple(f.shape[-1] for f in self.levels)

    @property
    def channels(self) -> tuple:
        return tuple(f.shape[1] for f in self.levels)


@dataclass
class BifurcatedGroups:
    students: dict = field(default_factory=dict)
    teachers: dict = field(default_factory=dict)

    @property
    def shared(self) -> set:
        return set(self.students) & set(self.teachers)


def bifurcate(p: FeaturePyramid) -> BifurcatedGroups:
    """Split a pyramid into student levels 1-3 and teacher levels 3-5.

    The groups alias the pyramid's tensors; nothing is copied.
    """
    return BifurcatedGroups(
        students={i: p[i] for i in STUDENT_LEVELS},
        teachers={i: p[i] for i in TEACHER_LEVELS},
    )


def init_fresh(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ResNetEncoder(nn.Module):
    """ResNet-50 with the final pooling and classifier dropped."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        net = torchvision.models.resnet50(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
            nn.init.kaiming_normal_(net.conv1.weight, mode="fan_out", nonlinearity="relu")
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x):
        f1 = self.stem(x)
        f2 = self.layer1(f1)
        f3 = self.layer2(f2)
        f4 = self.layer3(f3)
        f5 = self.layer4(f4)
        return [f1, f2, f3, f4, f5]


def _stage(cin, cout, pool):
    layers = [nn.AvgPool2d(2)] if pool else []
    layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class ToyEncoder(nn.Module):
    """Five small conv stages with the ResNet side-out schedule (/4, /4, /8, /16, /32)."""

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (8, 16, 32, 64, 64)):
        super().__init__()
        c1, c2, c3, c4, c5 = channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            _stage(c1, c1, pool=True),
        )
        self.layer1 = _stage(c1, c2, pool=False)
        self.layer2 = _stage(c2, c3, pool=True)
        self.layer3 = _stage(c3, c4, pool=True)
        self.layer4 = _stage(c4, c5, pool=True)
        init_fresh(self)

    def forward(self, x):
        f1 = self.stem(x)
        f2 = self.layer1(f1)
        f3 = self.layer2(f2)
        f4 = self.layer3(f3)
        f5 = self.layer4(f4)
        return [f1, f2, f3, f4, f5]


class DepthAdapter(nn.Module):
    """Maps an RGB/depth pair to a 3-channel adapted depth image.

    dif = conv_dif(rgb - depth)
    out = conv_out(conv_a(depth) + conv_b(depth) * dif)
    """

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv_dif = nn.Conv2d(3, 3, kernel_size, padding=pad)
        self.conv_a = nn.Conv2d(1, 3, kernel_size, padding=pad)
        self.conv_b = nn.Conv2d(1, 3, kernel_size, padding=pad)
        self.conv_out = nn.Conv2d(3, 3, kernel_size, padding=pad)
        init_fresh(self)

    def forward(self, rgb, depth):
        if rgb.shape[-2:] != depth.shape[-2:] or rgb.shape[0] != depth.shape[0]:
            raise ValueError(f"rgb {tuple(rgb.shape)} and depth {tuple(depth.shape)} do not share B/H/W")
        if depth.shape[1] != 1:
            raise ValueError(f"depth must have one channel, got {depth.shape[1]}")
        dif = self.conv_dif(rgb - depth)
        return self.conv_out(self.conv_a(depth) + self.conv_b(depth) * dif)


def dam_adapt(adapter: DepthAdapter, rgb, depth):
    return adapter(rgb, depth)


def _make_encoder(cfg: BackboneConfig, in_channels: int) -> nn.Module:
    if cfg.kind == "full":
        return ResNetEncoder(in_channels)
    return ToyEncoder(in_channels, cfg.toy_channels)


class DualBackbone(nn.Module):
    """RGB and depth encoders, either independent or one shared encoder."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.rgb = _make_encoder(cfg, 3)
        if cfg.shared_weights:
            self.depth = self.rgb
        else:
            self.depth = _make_encoder(cfg, 1)
        self.dam = DepthAdapter() if cfg.use_dam else None
        if cfg.weights:
            self.load_pretrained(cfg.weights)

    def load_pretrained(self, path: str):
        if not os.path.exists(path):
            logger.warning("backbone weights %s not found; training from scratch", path)
            return
        from .checkpoint import read_container

        tensors, _ = read_container(path)
        rgb_state = {k[len("rgb."):]: v for k, v in tensors.items() if k.startswith("rgb.")}
        missing, unexpected = self.rgb.load_state_dict(rgb_state or tensors, strict=False)
        if not self.cfg.shared_weights:
            depth_state = {k[len("depth."):]: v for k, v in tensors.items() if k.startswith("depth.")}
            if depth_state:
                self.depth.load_state_dict(depth_state, strict=False)
        logger.info("loaded backbone weights from %s (%d missing, %d unexpected keys)",
                    path, len(missing), len(unexpected))

    def _check_side(self, image):
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            ph, pw = (-h) % 32, (-w) % 32
            raise ValueError(f"input side {h}x{w} is not divisible by 32; pad by {ph}x{pw} pixels")

    def depth_input(self, rgb, depth):
        if self.dam is not None:
            return self.dam(rgb, depth)
        if self.cfg.shared_weights:
            return depth.expand(-1, 3, -1, -1)
        return depth

    def extract(self, image, stream: str) -> FeaturePyramid:
        self._check_side(image)
        if stream == "rgb":
            if image.shape[1] != 3:
                raise ValueError(f"rgb stream expects 3 channels, got {image.shape[1]}")
            return FeaturePyramid(self.rgb(image), "rgb")
        if stream == "depth":
            return FeaturePyramid(self.depth(image), "depth")
        raise ValueError(f"unknown stream {stream!r}")

    def forward(self, rgb, depth):
        self._check_side(rgb)
        return self.extract(rgb, "rgb"), self.extract(self.depth_input(rgb, depth), "depth")


def extract_pyramid(backbone: DualBackbone, image, stream: str) -> FeaturePyramid:
    return backbone.extract(image, stream)
