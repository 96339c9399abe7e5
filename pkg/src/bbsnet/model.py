"""BBS-Net assembly: teacher decoding, saliency-guided student refinement,
student decoding, the joint loss and the ablation-variant factory."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import torch
import torch.nn as nn

from .backbone import BackboneConfig, DualBackbone, init_fresh
from .decoder import PTM, WIDTH, CascadedDecoder, HeadT1, SumDecoder, UpsampledHead, upsample_to
from .dem import DEM

BCE_EPS = 1e-7


class VariantTag(str, Enum):
    BBS_RL = "BBS_RL"
    BBS_RH = "BBS_RH"
    BBS_NoRF = "BBS_NoRF"
    Low3 = "Low3"
    High3 = "High3"
    All5 = "All5"
    NoCA = "NoCA"
    NoSA = "NoSA"
    NoPTM = "NoPTM"
    BM = "BM"
    BM_CA = "BM_CA"
    BM_SA = "BM_SA"
    SumDecoder = "SumDecoder"
    Efficient = "Efficient"
    Efficient_NoDAM = "Efficient_NoDAM"


# aggregation strategy -> which levels feed which decoder
AGGREGATIONS = ("RL", "RH", "NoRF", "Low3", "High3", "All5")
SINGLE_DECODER = {"Low3": (1, 2, 3), "High3": (3, 4, 5), "All5": (1, 2, 3, 4, 5)}


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: str = "BBS_RL"
    aggregation: str = "RL"
    decoder: str = "cascaded"  # cascaded | sum
    use_ca: bool = True
    use_sa: bool = True
    use_ptm: bool = True
    gate: str = "sigmoid"
    dem_ratio: int = 16
    spatial_kernel: int = 7
    width: int = WIDTH

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.decoder not in ("cascaded", "sum"):
            raise ValueError(f"unknown decoder {self.decoder!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


@dataclass
class BbsOutputs:
    s1: torch.Tensor  # initial map, upsampled to the input size, in [0, 1]
    s2: Optional[torch.Tensor]  # final map at the input size; None without stage two
    s1_native: torch.Tensor  # initial map at the decoder's own resolution

    @property
    def final(self) -> torch.Tensor:
        return self.s2 if self.s2 is not None else self.s1


def refine(features, s1):
    """f' = f + f * S1 for every feature, with S1 resized to each feature."""
    return [f + f * upsample_to(s1, f.shape[-2:]) for f in features]


class BBSNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = DualBackbone(cfg.backbone)
        chans = cfg.backbone.channels
        self.dems = nn.ModuleList([
            DEM(c, cfg.dem_ratio, cfg.spatial_kernel, cfg.gate, cfg.use_ca, cfg.use_sa) for c in chans
        ])

        def make_decoder(levels):
            cls = CascadedDecoder if cfg.decoder == "cascaded" else SumDecoder
            return cls([chans[i - 1] for i in levels], cfg.width)

        agg = cfg.aggregation
        if agg in SINGLE_DECODER:
            self.levels1 = SINGLE_DECODER[agg]
            self.levels2 = None
        elif agg == "RH":
            self.levels1, self.levels2 = (1, 2, 3), (3, 4, 5)
        else:
            self.levels1, self.levels2 = (3, 4, 5), (1, 2, 3)
        self.decoder1 = make_decoder(self.levels1)
        self.head1 = HeadT1(cfg.width)
        if self.levels2 is not None:
            self.decoder2 = make_decoder(self.levels2)
            self.head2 = PTM(cfg.width) if cfg.use_ptm else UpsampledHead(cfg.width)
        else:
            self.decoder2 = None
            self.head2 = None
        for name, child in self.named_children():
            if name != "backbone":
                init_fresh(child)

    @property
    def refines(self) -> bool:
        return self.cfg.aggregation in ("RL", "RH")

    def cross_modal(self, rgb, depth):
        f_rgb, f_d = self.backbone(rgb, depth)
        return [r + dem(d) for r, dem, d in zip(f_rgb.levels, self.dems, f_d.levels)]

    def forward(self, rgb, depth) -> BbsOutputs:
        size = rgb.shape[-2:]
        cm = self.cross_modal(rgb, depth)
        first = [cm[i - 1] for i in self.levels1]
        s1_logits = self.head1(self.decoder1(first))
        s1_native = torch.sigmoid(s1_logits)
        s1 = torch.sigmoid(upsample_to(s1_logits, size))
        if self.decoder2 is None:
            return BbsOutputs(s1=s1, s2=None, s1_native=s1_native)
        second = [cm[i - 1] for i in self.levels2]
        if self.refines:
            second = refine(second, s1_native)
        s2_logits = self.head2(self.decoder2(second))
        s2 = torch.sigmoid(upsample_to(s2_logits, size))
        return BbsOutputs(s1=s1, s2=s2, s1_native=s1_native)

    def predict(self, rgb, depth) -> torch.Tensor:
        return self.forward(rgb, depth).final


def bce(s, g, eps: float = BCE_EPS):
    """Mean binary cross entropy of probabilities ``s`` against mask ``g``."""
    if s.shape != g.shape:
        raise ValueError(f"prediction {tuple(s.shape)} and mask {tuple(g.shape)} differ in shape")
    s = s.clamp(eps, 1 - eps)
    return -(g * torch.log(s) + (1 - g) * torch.log(1 - s)).mean()


def total_loss(outputs: BbsOutputs, g, alpha: float = 0.5):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"loss alpha must lie in [0, 1], got {alpha}")
    if outputs.s2 is None:
        return bce(outputs.s1, g)
    return alpha * bce(outputs.s1, g) + (1 - alpha) * bce(outputs.s2, g)


def stage_losses(outputs: BbsOutputs, g):
    l1 = bce(outputs.s1, g)
    l2 = bce(outputs.s2, g) if outputs.s2 is not None else l1
    return l1, l2


_VARIANTS = {
    VariantTag.BBS_RL: {},
    VariantTag.BBS_RH: {"aggregation": "RH"},
    VariantTag.BBS_NoRF: {"aggregation": "NoRF"},
    VariantTag.Low3: {"aggregation": "Low3"},
    VariantTag.High3: {"aggregation": "High3"},
    VariantTag.All5: {"aggregation": "All5"},
    VariantTag.NoCA: {"use_ca": False},
    VariantTag.NoSA: {"use_sa": False},
    VariantTag.NoPTM: {"use_ptm": False},
    VariantTag.BM: {"use_ca": False, "use_sa": False, "use_ptm": False},
    VariantTag.BM_CA: {"use_sa": False, "use_ptm": False},
    VariantTag.BM_SA: {"use_ca": False, "use_ptm": False},
    VariantTag.SumDecoder: {"decoder": "sum"},
    VariantTag.Efficient: {"use_ptm": False, "backbone": {"shared_weights": True, "use_dam": True}},
    VariantTag.Efficient_NoDAM: {"use_ptm": False, "backbone": {"shared_weights": True, "use_dam": False}},
}


def variant_config(tag, cfg: Optional[ModelConfig] = None) -> ModelConfig:
    try:
        tag = VariantTag(tag)
    except ValueError:
        raise ValueError(f"unknown variant {tag!r}; choose from {[t.value for t in VariantTag]}") from None
    base = cfg.to_dict() if cfg is not None else ModelConfig().to_dict()
    changes = dict(_VARIANTS[tag])
    bb = changes.pop("backbone", {})
    base.update(changes)
    base["backbone"] = {**base["backbone"], **bb}
    base["variant"] = tag.value
    return ModelConfig.from_dict(base)


def build_variant(tag, cfg: Optional[ModelConfig] = None) -> BBSNet:
    return BBSNet(variant_config(tag, cfg))


def count_parameters(model: nn.Module) -> int:
    # shared modules are counted once
    return sum(p.numel() for p in model.parameters())
