"""Backbone feature taps C1..C5 at strides 2/4/8/16/32.

Wraps the torchvision classifiers (DenseNet, ResNet, VGG) so each exposes the
same five-level tap contract, plus a tiny randomly initialized backbone for
fast self-contained tests. Pretrained weights are only ever read from a local
archive file; there is no downloading.

VGG has no stride-2 stem, so its taps sit after each pooling stage and the
pre-pool output of the first block is exposed as an extra full-resolution
tap (`l0`) that the refinement stage consumes in place of the raw image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .exceptions import ConfigError, ResourceError, ShapeError

__all__ = [
    "BackboneTaps",
    "BACKBONE_CHANNELS",
    "Backbone",
    "build_backbone",
    "resolve_weights_path",
    "extract_backbone_taps",
]

# c1..c5 widths per architecture
BACKBONE_CHANNELS: dict[str, tuple[int, int, int, int, int]] = {
    "toy": (8, 16, 32, 64, 128),
    "densenet121": (64, 256, 512, 1024, 1024),
    "densenet169": (64, 256, 512, 1280, 1664),
    "resnet101": (64, 256, 512, 1024, 2048),
    "resnet152": (64, 256, 512, 1024, 2048),
    "vgg16": (64, 128, 256, 512, 512),
    "vgg19": (64, 128, 256, 512, 512),
}

_VGG_NAMES = ("vgg16", "vgg19")


@dataclass
class BackboneTaps:
    """Feature maps at strides 2, 4, 8, 16, 32 w.r.t. the network input.

    `l0` is only populated by VGG backbones: the first block's pre-pool
    output at stride 1, used as the refinement stem input.
    """

    c1: torch.Tensor
    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor
    l0: torch.Tensor | None = None

    def as_list(self) -> list[torch.Tensor]:
        return [self.c1, self.c2, self.c3, self.c4, self.c5]

    def check_strides(self, input_hw: tuple[int, int]) -> None:
        h, w = input_hw
        for level, tap in enumerate(self.as_list(), start=1):
            expect = (h // 2**level, w // 2**level)
            if tuple(tap.shape[-2:]) != expect:
                raise ShapeError(
                    f"tap c{level} is {tuple(tap.shape[-2:])}, expected {expect} for input {h}x{w}"
                )


def _check_input(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected a 3xHxW or Bx3xHxW image, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input dims must be divisible by 32, got {h}x{w}")
    return x


class _ToyBackbone(nn.Module):
    """Five stride-2 conv stages, random init, for desk-scale runs."""

    def __init__(self):
        super().__init__()
        widths = BACKBONE_CHANNELS["toy"]
        stages = []
        in_ch = 3
        for out_ch in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> BackboneTaps:
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return BackboneTaps(*taps)


class _DenseNetBackbone(nn.Module):
    def __init__(self, name: str):
        super().__init__()
        import torchvision.models as tvm

        net = {"densenet121": tvm.densenet121, "densenet169": tvm.densenet169}[name](weights=None)
        f = net.features
        self.stem = nn.Sequential(f.conv0, f.norm0, f.relu0)
        self.pool0 = f.pool0
        self.block1, self.trans1 = f.denseblock1, f.transition1
        self.block2, self.trans2 = f.denseblock2, f.transition2
        self.block3, self.trans3 = f.denseblock3, f.transition3
        self.block4, self.norm5 = f.denseblock4, f.norm5

    def forward(self, x: torch.Tensor) -> BackboneTaps:
        c1 = self.stem(x)
        c2 = self.block1(self.pool0(c1))
        c3 = self.block2(self.trans1(c2))
        c4 = self.block3(self.trans2(c3))
        c5 = torch.relu(self.norm5(self.block4(self.trans3(c4))))
        return BackboneTaps(c1, c2, c3, c4, c5)


class _ResNetBackbone(nn.Module):
    def __init__(self, name: str):
        super().__init__()
        import torchvision.models as tvm

        net = {"resnet101": tvm.resnet101, "resnet152": tvm.resnet152}[name](weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4

    def forward(self, x: torch.Tensor) -> BackboneTaps:
        c1 = self.stem(x)
        c2 = self.layer1(self.pool(c1))
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return BackboneTaps(c1, c2, c3, c4, c5)


class _VGGBackbone(nn.Module):
    """Taps after each of the five pools; pre-pool block-1 output as l0."""

    def __init__(self, name: str):
        super().__init__()
        import torchvision.models as tvm

        net = {"vgg16": tvm.vgg16, "vgg19": tvm.vgg19}[name](weights=None)
        chunks: list[list[nn.Module]] = [[]]
        for layer in net.features:
            chunks[-1].append(layer)
            if isinstance(layer, nn.MaxPool2d):
                chunks.append([])
        chunks = [c for c in chunks if c]
        if len(chunks) != 5:
            raise ConfigError(f"{name}: expected 5 pooled blocks, found {len(chunks)}")
        self.blocks = nn.ModuleList(nn.Sequential(*c) for c in chunks)

    def forward(self, x: torch.Tensor) -> BackboneTaps:
        # run block1 layer by layer so the pre-pool activation is captured
        l0 = None
        h = x
        for layer in self.blocks[0]:
            if isinstance(layer, nn.MaxPool2d):
                l0 = h
            h = layer(h)
        taps = [h]
        for block in list(self.blocks)[1:]:
            h = block(h)
            taps.append(h)
        return BackboneTaps(*taps, l0=l0)


class Backbone(nn.Module):
    """Uniform wrapper: forward(image) -> BackboneTaps.

    `fr_stem_from_l0` tells the refinement stage to read the backbone's
    full-resolution tap instead of the raw image (VGG only).
    """

    def __init__(self, name: str, net: nn.Module):
        super().__init__()
        self.name = name
        self.net = net
        self.stage_channels = BACKBONE_CHANNELS[name]
        self.fr_stem_from_l0 = name in _VGG_NAMES

    @property
    def fr_stem_in_channels(self) -> int:
        return self.stage_channels[0] if self.fr_stem_from_l0 else 3

    def forward(self, x: torch.Tensor) -> BackboneTaps:
        x = _check_input(x)
        return self.net(x)


def resolve_weights_path(name: str, weights_path: str | Path | None = None) -> Path:
    """Locate the pretrained archive for `name`, raising when absent.

    Search order: explicit path, $FARNET_WEIGHTS/<name>.pth, then
    ~/.cache/farnet/weights/<name>.pth.
    """
    candidates = []
    if weights_path is not None:
        candidates.append(Path(weights_path))
    env = os.environ.get("FARNET_WEIGHTS")
    if env:
        candidates.append(Path(env) / f"{name}.pth")
    candidates.append(Path.home() / ".cache" / "farnet" / "weights" / f"{name}.pth")
    for cand in candidates:
        if cand.is_file():
            return cand
    raise ResourceError(
        f"pretrained weights archive for {name!r} not found; looked at: "
        + ", ".join(str(c) for c in candidates)
    )


def build_backbone(
    name: str, pretrained: bool = False, weights_path: str | Path | None = None
) -> Backbone:
    """Construct a tap-exposing backbone, optionally loading local weights."""
    if name not in BACKBONE_CHANNELS:
        raise ConfigError(f"unknown backbone {name!r}; choose from {sorted(BACKBONE_CHANNELS)}")
    if name == "toy":
        if pretrained:
            raise ConfigError("the toy backbone has no pretrained weights")
        return Backbone(name, _ToyBackbone())
    if name.startswith("densenet"):
        net: nn.Module = _DenseNetBackbone(name)
    elif name.startswith("resnet"):
        net = _ResNetBackbone(name)
    else:
        net = _VGGBackbone(name)
    backbone = Backbone(name, net)
    if pretrained:
        archive = resolve_weights_path(name, weights_path)
        try:
            state = torch.load(archive, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ResourceError(f"could not read weights archive {archive}: {exc}") from exc
        missing, unexpected = backbone.net.load_state_dict(state, strict=False)
        if missing:
            raise ResourceError(f"weights archive {archive} is missing keys, e.g. {missing[:3]}")
        _ = unexpected  # classifier heads in a full archive are fine to ignore
    return backbone


def extract_backbone_taps(image: torch.Tensor, config, weights_path=None) -> BackboneTaps:
    """One-shot tap extraction (builds the backbone; prefer reusing FARNet's)."""
    backbone = build_backbone(config.backbone, config.pretrained, weights_path)
    backbone.eval()
    with torch.no_grad():
        return backbone(image)
