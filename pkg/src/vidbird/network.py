"""Single-scale anchor-free detector over aggregated frames.

Down-sampling CSP backbone (C1..C5, strides 2..32), an SPP bridge on C5,
progressive bilinear up-sampling fusion back to the stride-2 map P1, and two
3x3 heads: a sigmoid confidence map and an exp-decoded (l, t, r, b) distance
map in input pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .aggregation import CoAttentionAggregator

# keeps exp() finite in float32; e^10 px is far beyond any input size
_MAX_LOG_DISTANCE = 10.0


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512, 1024)
    depths: tuple[int, ...] = (1, 2, 8, 8, 4)
    width_mult: float = 1.0
    depth_mult: float = 1.0
    norm: bool = True
    activation: str = "silu"

    def __post_init__(self):
        if len(self.widths) != 5 or len(self.depths) != 5:
            raise ValueError("backbone needs exactly five stages")
        if self.width_mult <= 0 or self.depth_mult <= 0:
            raise ValueError("width/depth multipliers must be positive")

    def stage_widths(self) -> list[int]:
        return [max(8, int(round(c * self.width_mult))) for c in self.widths]

    def stage_depths(self) -> list[int]:
        return [max(1, int(round(d * self.depth_mult))) for d in self.depths]


@dataclass
class HeadOutputs:
    """``conf`` is ``(B, 1, H/2, W/2)`` in [0, 1]; ``reg`` is ``(B, 4, H/2, W/2)`` > 0."""

    conf: torch.Tensor
    reg: torch.Tensor


def _act(name: str) -> nn.Module:
    return {"silu": nn.SiLU, "relu": nn.ReLU, "leaky": lambda: nn.LeakyReLU(0.1)}[name]()


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, k=1, s=1, norm=True, act="silu"):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=not norm)
        self.bn = nn.BatchNorm2d(c_out) if norm else nn.Identity()
        self.act = _act(act)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c, norm=True, act="silu"):
        super().__init__()
        self.cv1 = ConvBlock(c, c, 1, norm=norm, act=act)
        self.cv2 = ConvBlock(c, c, 3, norm=norm, act=act)

    def forward(self, x):
        return x + self.cv2(self.cv1(x))


class CSPStage(nn.Module):
    """Stride-2 down-sampling conv followed by a cross-stage-partial block."""

    def __init__(self, c_in, c_out, depth, norm=True, act="silu"):
        super().__init__()
        mid = max(1, c_out // 2)
        self.down = ConvBlock(c_in, c_out, 3, 2, norm, act)
        self.main = ConvBlock(c_out, mid, 1, norm=norm, act=act)
        self.blocks = nn.Sequential(*[Bottleneck(mid, norm, act) for _ in range(depth)])
        self.shortcut = ConvBlock(c_out, mid, 1, norm=norm, act=act)
        self.merge = ConvBlock(2 * mid, c_out, 1, norm=norm, act=act)

    def forward(self, x):
        x = self.down(x)
        return self.merge(torch.cat([self.blocks(self.main(x)), self.shortcut(x)], dim=1))


class CSPBackbone(nn.Module):
    def __init__(self, in_channels: int, cfg: BackboneConfig):
        super().__init__()
        widths, depths = cfg.stage_widths(), cfg.stage_depths()
        self.widths = widths
        stem = max(8, widths[0] // 2)
        self.stem = ConvBlock(in_channels, stem, 3, 1, cfg.norm, cfg.activation)
        chans = [stem] + widths
        self.stages = nn.ModuleList(
            CSPStage(chans[k], chans[k + 1], depths[k], cfg.norm, cfg.activation) for k in range(5)
        )

    def forward(self, x) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input height/width must be divisible by 32, got {w}x{h}")
        feats = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SPPBridge(nn.Module):
    def __init__(self, c_in, c_out, kernels=(5, 9, 13), norm=True, act="silu"):
        super().__init__()
        hidden = max(1, c_in // 2)
        self.branch_width = hidden
        self.cv1 = ConvBlock(c_in, hidden, 1, norm=norm, act=act)
        self.pools = nn.ModuleList(nn.MaxPool2d(k, 1, k // 2) for k in kernels)
        self.cv2 = ConvBlock(hidden * (len(kernels) + 1), c_out, 1, norm=norm, act=act)

    def forward(self, x):
        x = self.cv1(x)
        return self.cv2(torch.cat([x] + [p(x) for p in self.pools], dim=1))


class Fuse(nn.Module):
    """Bilinear 2x up-sample of the deep map, 1x1 to the shallow width, concat, 3x3."""

    def __init__(self, c_deep, c_shallow, norm=True, act="silu"):
        super().__init__()
        self.reduce = ConvBlock(c_deep, c_shallow, 1, norm=norm, act=act)
        self.mix = ConvBlock(2 * c_shallow, c_shallow, 3, norm=norm, act=act)

    def forward(self, deep, shallow):
        if (deep.shape[-2] * 2, deep.shape[-1] * 2) != tuple(shallow.shape[-2:]):
            raise ValueError(
                f"deep map {tuple(deep.shape[-2:])} is not half the shallow map {tuple(shallow.shape[-2:])}"
            )
        up = F.interpolate(deep, scale_factor=2, mode="bilinear", align_corners=False)
        return self.mix(torch.cat([self.reduce(up), shallow], dim=1))


class Heads(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.conf = nn.Conv2d(c_in, 1, 3, 1, 1)
        self.reg = nn.Conv2d(c_in, 4, 3, 1, 1)

    def forward(self, p1) -> HeadOutputs:
        conf = torch.sigmoid(self.conf(p1))
        reg = torch.exp(self.reg(p1).clamp(max=_MAX_LOG_DISTANCE))
        return HeadOutputs(conf, reg)


@dataclass
class ModelConfig:
    n_frames: int = 5
    input_size: tuple[int, int] = (672, 384)  # (W, H)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    agg_channels: int | None = None

    def __post_init__(self):
        w, h = self.input_size
        if w % 32 or h % 32:
            raise ValueError(f"input size must be divisible by 32, got {w}x{h}")
        if self.n_frames < 1 or self.n_frames % 2 == 0:
            raise ValueError(f"n_frames must be odd, got {self.n_frames}")


class Detector(nn.Module):
    """Aggregator + backbone + SPP + fusion chain + heads."""

    stride = 2

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.aggregator = CoAttentionAggregator(cfg.n_frames, cfg.agg_channels)
        bb = cfg.backbone
        self.backbone = CSPBackbone(self.aggregator.out_channels, bb)
        w = self.backbone.widths
        self.spp = SPPBridge(w[4], w[4], norm=bb.norm, act=bb.activation)
        self.fuses = nn.ModuleList(Fuse(w[k + 1], w[k], bb.norm, bb.activation) for k in (3, 2, 1, 0))
        self.heads = Heads(w[0])
        self.init_head_bias()

    @property
    def input_size(self) -> tuple[int, int]:
        return self.cfg.input_size

    def init_head_bias(self, prior: float = 0.01, distance: float = 4.0) -> None:
        with torch.no_grad():
            self.heads.conf.bias.fill_(float(torch.logit(torch.tensor(prior))))
            self.heads.reg.bias.fill_(float(torch.log(torch.tensor(distance))))

    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        agg = self.aggregator(x)
        c = self.backbone(agg)
        p = self.spp(c[4])
        out = {"agg": agg, **{f"C{k + 1}": c[k] for k in range(5)}, "P5": p}
        for fuse, k in zip(self.fuses, (3, 2, 1, 0)):
            p = fuse(p, c[k])
            out[f"P{k + 1}"] = p
        return out

    def forward(self, x: torch.Tensor) -> HeadOutputs:
        return self.heads(self.features(x)["P1"])

    def activation_dump(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-channel mean absolute activation of every named feature map."""
        with torch.no_grad():
            return {k: v.abs().mean(dim=(0, 2, 3)) for k, v in self.features(x).items()}


def tiny_config(n_frames: int = 5, input_size=(96, 64)) -> ModelConfig:
    """Desk-scale model: width x1/8, depth x1/3."""
    return ModelConfig(n_frames, tuple(input_size), BackboneConfig(width_mult=1 / 8, depth_mult=1 / 3))
