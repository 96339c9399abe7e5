"""Cascaded decoder: global context modules, pyramid multiplication,
progressive concatenation, and the two output heads."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

WIDTH = 32


class ConvBN(nn.Sequential):
    def __init__(self, cin, cout, kernel_size=3, padding=None, dilation=1):
        if padding is None:
            padding = dilation * (kernel_size // 2)
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, padding=padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
        )


def upsample_to(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def _check_power_of_two(low, high):
    for a, b in zip(low.shape[-2:], high.shape[-2:]):
        ratio = a / b
        if ratio < 1 or not float(ratio).is_integer() or (int(ratio) & (int(ratio) - 1)):
            raise ValueError(
                f"resolutions {tuple(low.shape[-2:])} and {tuple(high.shape[-2:])} "
                "are not related by a power of two")


class GCM(nn.Module):
    """Four parallel branches (1x1; 1x1 -> (2k-1) conv -> 3x3 dilated by 2k-1)
    concatenated, fused by a 3x3 conv, plus a residual from the input."""

    def __init__(self, in_channels: int, width: int = WIDTH):
        super().__init__()
        self.branches = nn.ModuleList([ConvBN(in_channels, width, 1)])
        for k in (2, 3, 4):
            size = 2 * k - 1
            self.branches.append(nn.Sequential(
                ConvBN(in_channels, width, 1),
                ConvBN(width, width, size),
                ConvBN(width, width, 3, dilation=size),
            ))
        self.conv_cat = ConvBN(4 * width, width, 3)
        self.residual = nn.Identity() if in_channels == width else ConvBN(in_channels, width, 1)
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x):
        cat = torch.cat([b(x) for b in self.branches], dim=1)
        return self.relu(self.conv_cat(cat) + self.residual(x))


class CascadedDecoder(nn.Module):
    """GCM per level, pyramid multiplication, then progressive concatenation.

    Levels are ordered low (finest) to high (coarsest). Works for any number
    of levels; the model uses three (and five for the All5 ablation).
    """

    def __init__(self, in_channels, width: int = WIDTH):
        super().__init__()
        n = len(in_channels)
        if n < 2:
            raise ValueError("a cascaded decoder needs at least two levels")
        self.n = n
        self.width = width
        self.gcms = nn.ModuleList([GCM(c, width) for c in in_channels])
        # mult[i][k-i-1]: conv applied to level k before multiplying level i
        self.mult = nn.ModuleList([
            nn.ModuleList([ConvBN(width, width, 3) for _ in range(i + 1, n)]) for i in range(n)
        ])
        # up[i]: conv after upsampling the running aggregate onto level i
        self.up = nn.ModuleList([
            ConvBN(width * (n - 1 - i), width * (n - 1 - i), 3) for i in range(n - 1)
        ])
        self.out = nn.Sequential(ConvBN(width * n, width, 3), nn.ReLU(inplace=False))

    def pyramid_multiply(self, feats):
        for lo, hi in zip(feats, feats[1:]):
            _check_power_of_two(lo, hi)
        updated = []
        for i, f in enumerate(feats):
            out = f
            for j, k in enumerate(range(i + 1, self.n)):
                out = out * self.mult[i][j](upsample_to(feats[k], f.shape[-2:]))
            updated.append(out)
        return updated

    def progressive_aggregate(self, updated):
        h = updated[-1]
        for i in range(self.n - 2, -1, -1):
            h = torch.cat([updated[i], self.up[i](upsample_to(h, updated[i].shape[-2:]))], dim=1)
        return self.out(h)

    def forward(self, feats):
        if len(feats) != self.n:
            raise ValueError(f"decoder built for {self.n} levels, got {len(feats)}")
        gcm = [m(f) for m, f in zip(self.gcms, feats)]
        return self.progressive_aggregate(self.pyramid_multiply(gcm))


class SumDecoder(nn.Module):
    """Element-wise-sum baseline: 1x1 conv to a common width, upsample, add."""

    def __init__(self, in_channels, width: int = WIDTH):
        super().__init__()
        self.n = len(in_channels)
        self.proj = nn.ModuleList([ConvBN(c, width, 1) for c in in_channels])
        self.relu = nn.ReLU(inplace=False)

    def forward(self, feats):
        size = feats[0].shape[-2:]
        return self.relu(sum(upsample_to(p(f), size) for p, f in zip(self.proj, feats)))


class HeadT1(nn.Module):
    """Two 3x3 convs taking the 32-channel aggregate to 1-channel logits."""

    def __init__(self, width: int = WIDTH):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 1, 3, padding=1)
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x):
        return self.conv2(self.relu(self.conv1(x)))


class UpsampledHead(nn.Module):
    """HeadT1 followed by bilinear x4; stands in for the PTM when it is ablated."""

    def __init__(self, width: int = WIDTH, scale: int = 4):
        super().__init__()
        self.head = HeadT1(width)
        self.scale = scale

    def forward(self, x):
        y = self.head(x)
        return upsample_to(y, (y.shape[-2] * self.scale, y.shape[-1] * self.scale))


class TransBlock(nn.Module):
    """3x3 conv, then a stride-2 transposed conv with a transposed residual path."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = ConvBN(cin, cin, 3)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.shortcut = nn.Sequential(
            nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x):
        return self.relu(self.deconv(self.relu(self.conv(x))) + self.shortcut(x))


class PTM(nn.Module):
    """Two x2 transposed residual blocks, then three 1x1 convs to one channel."""

    def __init__(self, width: int = WIDTH):
        super().__init__()
        self.blocks = nn.Sequential(TransBlock(width, width), TransBlock(width, width))
        half = max(1, width // 2)
        self.convs = nn.Sequential(
            nn.Conv2d(width, width, 1), nn.ReLU(inplace=False),
            nn.Conv2d(width, half, 1), nn.ReLU(inplace=False),
            nn.Conv2d(half, 1, 1),
        )

    def forward(self, x):
        return self.convs(self.blocks(x))


def squash(logits):
    return torch.sigmoid(logits)


def gcm(f, params: GCM):
    return params(f)


def pyramid_multiply(group, params: CascadedDecoder):
    return params.pyramid_multiply(list(group))


def progressive_aggregate(updated, params: CascadedDecoder):
    return params.progressive_aggregate(list(updated))


def head_t1(agg, params: HeadT1):
    return squash(params(agg))


def ptm(agg, params: PTM):
    return squash(params(agg))


def receptive_support(fn, shape, out_pixel=None) -> int:
    """Count input pixels whose value influences one output pixel of ``fn``."""
    x = torch.randn(*shape, dtype=torch.float64, requires_grad=True)
    y = fn(x)
    h, w = y.shape[-2:]
    r, c = out_pixel or (h // 2, w // 2)
    grad, = torch.autograd.grad(y[..., r, c].sum(), x)
    return int((grad.abs().sum(dim=(0, 1)) > 0).sum())

