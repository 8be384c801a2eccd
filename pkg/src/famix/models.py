"""Segmentation network: CLIP ResNet trunk with a DeepLabv3+-style head."""
from __future__ import annotations

import copy
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

GROUPS = ("stem", "layer1", "layer2", "layer3", "layer4", "layer4_tail", "decoder")


def _conv_bn_relu(cin, cout, k=1, dilation=1):
    pad = 0 if k == 1 else dilation
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates: Sequence[int]):
        super().__init__()
        self.branches = nn.ModuleList([_conv_bn_relu(cin, cout, 1)] +
                                      [_conv_bn_relu(cin, cout, 3, r) for r in rates])
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1, bias=False),
                                  nn.BatchNorm2d(cout), nn.ReLU(inplace=True))
        self.project = _conv_bn_relu(cout * (len(rates) + 2), cout, 1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.pool(x)
        outs.append(pooled.expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class DeepLabHead(nn.Module):
    """Atrous pyramid on the deep features plus a low-level skip from Layer1."""

    def __init__(self, high_channels, low_channels, num_classes, aspp_channels=256, low_proj=48,
                 rates=(6, 12, 18)):
        super().__init__()
        self.aspp = ASPP(high_channels, aspp_channels, rates)
        self.low = _conv_bn_relu(low_channels, low_proj, 1)
        self.fuse = nn.Sequential(_conv_bn_relu(aspp_channels + low_proj, aspp_channels, 3),
                                  _conv_bn_relu(aspp_channels, aspp_channels, 3))
        self.classifier = nn.Conv2d(aspp_channels, num_classes, 1)

    def forward(self, high, low):
        x = self.aspp(high)
        x = F.interpolate(x, size=low.shape[-2:], mode="bilinear", align_corners=False)
        x = self.fuse(torch.cat([x, self.low(low)], dim=1))
        return self.classifier(x)


def _dilate_last_stage(layer4: nn.Sequential, dilation: int = 2) -> None:
    """Trade the stage-4 stride for dilation (output stride 32 -> 16)."""
    first = layer4[0]
    first.avgpool = nn.Identity()
    if first.downsample is not None and "-1" in first.downsample._modules:
        first.downsample._modules["-1"] = nn.Identity()
    for block in layer4:
        block.conv2.dilation = (dilation, dilation)
        block.conv2.padding = (dilation, dilation)


class SegmentationNet(nn.Module):
    """DeepLabv3+-shaped segmenter on a copy of a CLIP ModifiedResNet trunk.

    ``forward`` accepts a ``layer1_hook`` applied to the Layer1 activations;
    training uses it to inject style randomization.
    """

    def __init__(self, visual: nn.Module, num_classes: int, aspp_channels: int = 256, low_proj: int = 48,
                 rates=(6, 12, 18), output_stride: int = 16):
        super().__init__()
        v = copy.deepcopy(visual)
        self.stem = nn.Sequential(v.conv1, v.bn1, v.act1, v.conv2, v.bn2, v.act2, v.conv3, v.bn3, v.act3,
                                  v.avgpool)
        self.layer1, self.layer2, self.layer3 = v.layer1, v.layer2, v.layer3
        if output_stride == 16:
            _dilate_last_stage(v.layer4)
        elif output_stride != 32:
            raise ValueError(f"unsupported output stride {output_stride}")
        blocks = list(v.layer4.children())
        self.layer4 = nn.Sequential(*blocks[:-1])
        self.layer4_tail = nn.Sequential(blocks[-1])
        low_c = self.layer1[-1].conv3.out_channels
        high_c = blocks[-1].conv3.out_channels
        self.decoder = DeepLabHead(high_c, low_c, num_classes, aspp_channels, low_proj, rates)
        self.num_classes = num_classes
        self.output_stride = output_stride
        self._frozen = set()
        for p in self.parameters():
            p.requires_grad_(True)

    def group(self, name: str) -> nn.Module:
        return getattr(self, name)

    def group_parameters(self) -> dict:
        return {g: list(self.group(g).parameters()) for g in GROUPS}

    def set_frozen(self, frozen) -> None:
        self._frozen = set(frozen)
        for g in GROUPS:
            for p in self.group(g).parameters():
                p.requires_grad_(g not in self._frozen)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen stages keep their BatchNorm statistics
        for g in self._frozen:
            self.group(g).eval()
        return self

    def low_level(self, images: torch.Tensor) -> torch.Tensor:
        return self.layer1(self.stem(images))

    def forward(self, images: torch.Tensor, layer1_hook: Optional[Callable] = None,
                out_size: Optional[tuple] = None) -> torch.Tensor:
        low = self.low_level(images)
        if layer1_hook is not None:
            low = layer1_hook(low)
        x = self.layer4_tail(self.layer4(self.layer3(self.layer2(low))))
        logits = self.decoder(x, low)
        return F.interpolate(logits, size=out_size or images.shape[-2:], mode="bilinear", align_corners=False)


DESK_HEAD = dict(aspp_channels=32, low_proj=16, rates=(1, 2, 3))
PAPER_HEAD = dict(aspp_channels=256, low_proj=48, rates=(6, 12, 18))
