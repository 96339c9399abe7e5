"""Depth-enhanced module: channel then spatial attention on a depth side-out,
added to the matching RGB side-out."""

import torch
import torch.nn as nn

GATES = ("sigmoid", "none")


def _gate(x, kind):
    if kind == "sigmoid":
        return torch.sigmoid(x)
    return x


class ChannelAttention(nn.Module):
    """Per-channel global max pool -> two-layer perceptron -> gate."""

    def __init__(self, channels: int, ratio: int = 16, gate: str = "sigmoid"):
        super().__init__()
        if gate not in GATES:
            raise ValueError(f"unknown gate {gate!r}")
        hidden = max(1, channels // ratio)
        self.channels = channels
        self.gate = gate
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.relu = nn.ReLU(inplace=True)

    def weights(self, f):
        pooled = torch.amax(f, dim=(2, 3))
        return _gate(self.fc2(self.relu(self.fc1(pooled))), self.gate)

    def forward(self, f):
        if f.dim() != 4 or f.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W), got {tuple(f.shape)}")
        return self.weights(f)[:, :, None, None] * f


class SpatialAttention(nn.Module):
    """Channel-wise max map -> single conv -> gate, broadcast over channels."""

    def __init__(self, kernel_size: int = 7, gate: str = "sigmoid"):
        super().__init__()
        if gate not in GATES:
            raise ValueError(f"unknown gate {gate!r}")
        self.gate = gate
        self.conv = nn.Conv2d(1, 1, kernel_size, padding=kernel_size // 2)

    def weights(self, f):
        return _gate(self.conv(torch.amax(f, dim=1, keepdim=True)), self.gate)

    def forward(self, f):
        return self.weights(f) * f


class DEM(nn.Module):
    def __init__(self, channels: int, ratio: int = 16, kernel_size: int = 7,
                 gate: str = "sigmoid", use_ca: bool = True, use_sa: bool = True):
        super().__init__()
        self.ca = ChannelAttention(channels, ratio, gate) if use_ca else nn.Identity()
        self.sa = SpatialAttention(kernel_size, gate) if use_sa else nn.Identity()

    def forward(self, f_d):
        # channel first, then spatial
        return self.sa(self.ca(f_d))


def channel_attention(f, params: ChannelAttention):
    return params(f)


def spatial_attention(f, params: SpatialAttention):
    return params(f)


def dem_enhance(f_d, params: DEM):
    return params(f_d)


def fuse_modalities(f_rgb, f_d, params: DEM):
    if f_rgb.shape != f_d.shape:
        raise ValueError(f"rgb {tuple(f_rgb.shape)} and depth {tuple(f_d.shape)} features differ in shape")
    return f_rgb + params(f_d)
