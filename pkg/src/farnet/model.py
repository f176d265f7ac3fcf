"""The landmark detection network.

Three stages over the backbone taps:
  1. a first up path L5 -> L2 holding 256 channels,
  2. a down path L2 -> L5 doubling channels per level (256/512/1024/2048),
  3. a second up path L5 -> L1 tapering to 64 channels at stride 2,
followed by a half-resolution heatmap head, and a refinement stage that
concatenates raw-image features (32 ch), the upsampled 64-channel L1
features, and the upsampled coarse heatmaps to regress full-resolution
heatmaps.

Two ablation switches: `fusion="add"` swaps every concat+1x1 fusion inside
the aggregation stage for channel-matched addition (projection, add, 3x3),
keeping all output widths; `refinement="naive"` drops the coarse heatmaps
from the refinement concat (width 32+64, no coarse guidance) and
`refinement="none"` removes the refinement stage entirely.

Every convolution carries batch norm and ReLU except the final 1x1
regression convs of the two heads, which stay linear so predictions can
reach the Gaussian peak value of 1. Upsampling is bilinear, non-learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import BACKBONE_CHANNELS, Backbone, BackboneTaps, build_backbone
from .exceptions import ConfigError, FarnetError, ParameterError, ShapeError
from .heatmaps import HeatmapGrid, HeatmapStack

__all__ = [
    "Fusion",
    "Refinement",
    "ChannelSchedule",
    "ModelConfig",
    "ForwardOutput",
    "UpFuseBlock",
    "DownFuseBlock",
    "HeatmapHead",
    "MSFA",
    "FRModule",
    "FARNet",
    "build_model",
]


class Fusion(str, Enum):
    CONCAT = "concat"
    ADD = "add"


class Refinement(str, Enum):
    GUIDED = "guided"
    NAIVE = "naive"
    NONE = "none"


def _coerce(enum_cls, value):
    try:
        return enum_cls(value)
    except ValueError as exc:
        raise ConfigError(
            f"{enum_cls.__name__.lower()} must be one of {[e.value for e in enum_cls]}, got {value!r}"
        ) from exc


_DEFAULT_UP2 = MappingProxyType({4: 256, 3: 256, 2: 128, 1: 64})


@dataclass(frozen=True)
class ChannelSchedule:
    """Widths of the aggregation paths and heads.

    `up2_channels` maps level -> width for the second up path; its L1 entry
    is also the feature width the refinement stage consumes. `down_base` is
    the width entering the down path at L2 and must equal `up1_channels`
    (the down path continues from the first up path's output).
    """

    up1_channels: int = 256
    down_base: int = 256
    up2_channels: Mapping[int, int] = field(default_factory=lambda: dict(_DEFAULT_UP2))
    fr_stem_channels: int = 32
    head_mid_channels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "up2_channels", dict(self.up2_channels))
        widths = [self.up1_channels, self.down_base, self.fr_stem_channels, self.head_mid_channels]
        widths += list(self.up2_channels.values())
        if any(not isinstance(w, int) or w <= 0 for w in widths):
            raise ParameterError(f"all schedule widths must be positive integers: {self}")
        if set(self.up2_channels) != {1, 2, 3, 4}:
            raise ConfigError(
                f"up2_channels needs exactly the levels 1..4, got {sorted(self.up2_channels)}"
            )
        if self.down_base != self.up1_channels:
            raise ConfigError(
                "the down path continues from the first up path, so down_base "
                f"({self.down_base}) must equal up1_channels ({self.up1_channels})"
            )

    @property
    def down_channels(self) -> dict[int, int]:
        """Widths after each down-path level: doubled per level from L2."""
        return {2: self.down_base, 3: 2 * self.down_base, 4: 4 * self.down_base, 5: 8 * self.down_base}

    @classmethod
    def compact(cls) -> "ChannelSchedule":
        """A slim schedule for fast CPU tests; same topology, smaller widths."""
        return cls(
            up1_channels=32,
            down_base=32,
            up2_channels={4: 32, 3: 32, 2: 16, 1: 8},
            fr_stem_channels=8,
            head_mid_channels=16,
        )


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "densenet121"
    k_landmarks: int = 19
    fusion: Fusion = Fusion.CONCAT
    refinement: Refinement = Refinement.GUIDED
    schedule: ChannelSchedule = field(default_factory=ChannelSchedule)
    pretrained: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fusion", _coerce(Fusion, self.fusion))
        object.__setattr__(self, "refinement", _coerce(Refinement, self.refinement))
        if self.backbone not in BACKBONE_CHANNELS:
            raise ConfigError(
                f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONE_CHANNELS)}"
            )
        if self.k_landmarks < 1:
            raise ParameterError(f"k_landmarks must be >= 1, got {self.k_landmarks}")
        if self.backbone == "toy" and self.pretrained:
            raise ConfigError("the toy backbone has no pretrained weights")

    def with_(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


@dataclass
class ForwardOutput:
    """Batched head outputs plus the grids they live on.

    `coarse`/`fine` keep their autograd graphs; `coarse_stack`/`fine_stack`
    give detached single-sample views for decoding.
    """

    coarse: torch.Tensor            # (B, K, H/2, W/2)
    fine: torch.Tensor | None       # (B, K, H, W) or None
    coarse_grid: HeatmapGrid
    fine_grid: HeatmapGrid | None

    def coarse_stack(self, index: int = 0) -> HeatmapStack:
        return HeatmapStack(self.coarse[index].detach().cpu().numpy(), self.coarse_grid)

    def fine_stack(self, index: int = 0) -> HeatmapStack | None:
        if self.fine is None:
            return None
        return HeatmapStack(self.fine[index].detach().cpu().numpy(), self.fine_grid)

    def best_stack(self, index: int = 0) -> HeatmapStack:
        """The highest-resolution head available, for decoding."""
        return self.fine_stack(index) if self.fine is not None else self.coarse_stack(index)


def conv_bn_relu(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UpFuseBlock(nn.Module):
    """x2 bilinear upsample of the coarse map, fused with the lateral map.

    concat mode: channel concatenation then a 1x1 conv to `out_ch`.
    add mode: 1x1 projections to `out_ch` where widths differ, addition,
    then a 3x3 conv (same output width as concat mode).
    """

    def __init__(self, coarse_ch: int, lateral_ch: int, out_ch: int, fusion: Fusion):
        super().__init__()
        self.fusion = fusion
        if fusion == Fusion.CONCAT:
            self.fuse = conv_bn_relu(coarse_ch + lateral_ch, out_ch, 1)
        else:
            self.proj_coarse = (
                conv_bn_relu(coarse_ch, out_ch, 1) if coarse_ch != out_ch else nn.Identity()
            )
            self.proj_lateral = (
                conv_bn_relu(lateral_ch, out_ch, 1) if lateral_ch != out_ch else nn.Identity()
            )
            self.smooth = conv_bn_relu(out_ch, out_ch, 3)

    def forward(self, coarse: torch.Tensor, lateral: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(coarse, scale_factor=2, mode="bilinear", align_corners=False)
        if up.shape[-2:] != lateral.shape[-2:]:
            raise ShapeError(
                f"upsampled map is {tuple(up.shape[-2:])} but lateral is {tuple(lateral.shape[-2:])}"
            )
        if self.fusion == Fusion.CONCAT:
            return self.fuse(torch.cat([up, lateral], dim=1))
        return self.smooth(self.proj_coarse(up) + self.proj_lateral(lateral))


class DownFuseBlock(nn.Module):
    """Stride-2 3x3 conv doubling the fine map's channels, fused with the lateral.

    concat mode: concatenation then a 1x1 conv back to the doubled width.
    add mode: 1x1 lateral projection to the doubled width, addition, 3x3 conv.
    """

    def __init__(self, fine_ch: int, lateral_ch: int, fusion: Fusion):
        super().__init__()
        self.fusion = fusion
        self.out_channels = 2 * fine_ch
        self.down = conv_bn_relu(fine_ch, self.out_channels, 3, stride=2)
        if fusion == Fusion.CONCAT:
            self.fuse = conv_bn_relu(self.out_channels + lateral_ch, self.out_channels, 1)
        else:
            self.proj_lateral = (
                conv_bn_relu(lateral_ch, self.out_channels, 1)
                if lateral_ch != self.out_channels
                else nn.Identity()
            )
            self.smooth = conv_bn_relu(self.out_channels, self.out_channels, 3)

    def forward(self, fine: torch.Tensor, lateral: torch.Tensor) -> torch.Tensor:
        down = self.down(fine)
        if down.shape[-2:] != lateral.shape[-2:]:
            raise ShapeError(
                f"downsampled map is {tuple(down.shape[-2:])} but lateral is {tuple(lateral.shape[-2:])}"
            )
        if self.fusion == Fusion.CONCAT:
            return self.fuse(torch.cat([down, lateral], dim=1))
        return self.smooth(down + self.proj_lateral(lateral))


class HeatmapHead(nn.Module):
    """3x3 conv (bn+relu) then a linear 1x1 conv regressing K maps."""

    def __init__(self, in_ch: int, mid_ch: int, k: int):
        super().__init__()
        self.body = conv_bn_relu(in_ch, mid_ch, 3)
        self.out = nn.Conv2d(mid_ch, k, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.body(x))


class MSFA(nn.Module):
    """Aggregation stage: up path, down path, second up path, coarse head.

    Returns the 64-channel L1 features (stride 2) and the K coarse heatmaps
    regressed from them.
    """

    def __init__(
        self,
        stage_channels: tuple[int, int, int, int, int],
        k: int,
        schedule: ChannelSchedule,
        fusion: Fusion,
    ):
        super().__init__()
        c1, c2, c3, c4, c5 = stage_channels
        u = schedule.up1_channels
        d = schedule.down_channels
        s = schedule.up2_channels

        # L5 entry: a 3x3 then a 1x1 conv bringing C5 to the path width
        self.path_start = nn.Sequential(conv_bn_relu(c5, u, 3), conv_bn_relu(u, u, 1))
        self.up1_l4 = UpFuseBlock(u, c4, u, fusion)
        self.up1_l3 = UpFuseBlock(u, c3, u, fusion)
        self.up1_l2 = UpFuseBlock(u, c2, u, fusion)

        self.down_l3 = DownFuseBlock(d[2], u, fusion)
        self.down_l4 = DownFuseBlock(d[3], u, fusion)
        self.down_l5 = DownFuseBlock(d[4], u, fusion)

        self.up2_l4 = UpFuseBlock(d[5], d[4], s[4], fusion)
        self.up2_l3 = UpFuseBlock(s[4], d[3], s[3], fusion)
        self.up2_l2 = UpFuseBlock(s[3], d[2], s[2], fusion)
        self.up2_l1 = UpFuseBlock(s[2], c1, s[1], fusion)

        self.head = HeatmapHead(s[1], schedule.head_mid_channels, k)
        self.out_channels = s[1]

    def forward(self, taps: BackboneTaps) -> tuple[torch.Tensor, torch.Tensor]:
        p5 = self.path_start(taps.c5)
        u4 = self.up1_l4(p5, taps.c4)
        u3 = self.up1_l3(u4, taps.c3)
        u2 = self.up1_l2(u3, taps.c2)

        d3 = self.down_l3(u2, u3)
        d4 = self.down_l4(d3, u4)
        d5 = self.down_l5(d4, p5)

        s4 = self.up2_l4(d5, d4)
        s3 = self.up2_l3(s4, d3)
        s2 = self.up2_l2(s3, u2)
        s1 = self.up2_l1(s2, taps.c1)
        return s1, self.head(s1)


class FRModule(nn.Module):
    """Refinement stage producing full-resolution heatmaps.

    A 3x3 conv maps the stem input (raw image, or a backbone's stride-1 tap)
    to 32 channels; these are concatenated with the x2-upsampled L1 features
    and, in guided mode, the x2-upsampled coarse heatmaps, then a 3x3+1x1
    head regresses K maps at stride 1.
    """

    def __init__(
        self,
        stem_in_ch: int,
        l1_ch: int,
        k: int,
        schedule: ChannelSchedule,
        use_coarse_heatmaps: bool,
    ):
        super().__init__()
        self.use_coarse_heatmaps = use_coarse_heatmaps
        self.stem = conv_bn_relu(stem_in_ch, schedule.fr_stem_channels, 3)
        self.concat_channels = schedule.fr_stem_channels + l1_ch + (k if use_coarse_heatmaps else 0)
        self.head = HeatmapHead(self.concat_channels, schedule.head_mid_channels, k)

    def forward(
        self,
        stem_input: torch.Tensor,
        features_l1: torch.Tensor,
        coarse_heatmaps: torch.Tensor | None,
    ) -> torch.Tensor:
        stem = self.stem(stem_input)
        up_feat = F.interpolate(features_l1, scale_factor=2, mode="bilinear", align_corners=False)
        if up_feat.shape[-2:] != stem.shape[-2:]:
            raise ShapeError(
                f"L1 features upsample to {tuple(up_feat.shape[-2:])}, stem is {tuple(stem.shape[-2:])}"
            )
        parts = [stem, up_feat]
        if self.use_coarse_heatmaps:
            if coarse_heatmaps is None:
                raise ShapeError("guided refinement needs the coarse heatmaps")
            up_hm = F.interpolate(
                coarse_heatmaps, scale_factor=2, mode="bilinear", align_corners=False
            )
            parts.append(up_hm)
        return self.head(torch.cat(parts, dim=1))


class FARNet(nn.Module):
    """Backbone taps -> aggregation -> optional refinement."""

    def __init__(self, config: ModelConfig, weights_path=None):
        super().__init__()
        self.config = config
        self.backbone: Backbone = build_backbone(
            config.backbone, config.pretrained, weights_path
        )
        self.msfa = MSFA(
            self.backbone.stage_channels, config.k_landmarks, config.schedule, config.fusion
        )
        if config.refinement == Refinement.NONE:
            self.fr = None
        else:
            self.fr = FRModule(
                self.backbone.fr_stem_in_channels,
                self.msfa.out_channels,
                config.k_landmarks,
                config.schedule,
                use_coarse_heatmaps=(config.refinement == Refinement.GUIDED),
            )

    @staticmethod
    def _stage(name: str, fn, *args):
        try:
            return fn(*args)
        except FarnetError as exc:
            raise type(exc)(f"{name}: {exc}") from exc

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        if image.ndim == 3:
            image = image[None]
        taps = self._stage("backbone", self.backbone, image)
        features_l1, coarse = self._stage("aggregation", self.msfa, taps)
        fine = None
        if self.fr is not None:
            stem_input = taps.l0 if self.backbone.fr_stem_from_l0 else image
            guide = coarse if self.fr.use_coarse_heatmaps else None
            fine = self._stage("refinement", self.fr, stem_input, features_l1, guide)
        h, w = image.shape[-2:]
        coarse_grid = HeatmapGrid(w // 2, h // 2, stride_wrt_input=2)
        fine_grid = HeatmapGrid(w, h, stride_wrt_input=1) if fine is not None else None
        return ForwardOutput(coarse, fine, coarse_grid, fine_grid)


def build_model(config: ModelConfig, weights_path=None) -> FARNet:
    return FARNet(config, weights_path=weights_path)
