"""Frozen perception network used by the perceptual loss and the feature distance."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ValidationError

EXTRACTORS = ("seeded-random-convnet", "identity", "pretrained-vgg19")
VGG_TAPS = ("relu1_2", "relu2_2", "relu3_2", "relu4_2", "relu5_2")
# indices of the taps inside torchvision's vgg19().features
_VGG19_INDEX = {
    "relu1_1": 1, "relu1_2": 3, "relu2_1": 6, "relu2_2": 8,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15, "relu3_4": 17,
    "relu4_1": 20, "relu4_2": 22, "relu4_3": 24, "relu4_4": 26,
    "relu5_1": 29, "relu5_2": 31, "relu5_3": 33, "relu5_4": 35,
}


@dataclass
class PerceptionConfig:
    extractor: str = "seeded-random-convnet"
    layer_names: tuple = VGG_TAPS
    channels: tuple = (64, 64, 64, 64, 64)
    seed: int = 0

    def __post_init__(self):
        self.layer_names = tuple(self.layer_names)
        self.channels = tuple(int(c) for c in self.channels)
        if self.extractor not in EXTRACTORS:
            raise ValidationError(f"unknown extractor {self.extractor!r}")
        if self.extractor == "identity":
            self.layer_names = ("identity",)
        if len(self.layer_names) < 1:
            raise ValidationError("at least one perception layer is required")

    @property
    def n_layers(self) -> int:
        return len(self.layer_names)


class PerceptionNet(nn.Module):
    """Returns the list of tapped feature maps for a batch of [-1, 1] images."""

    def __init__(self, config: PerceptionConfig | None = None):
        super().__init__()
        self.config = config or PerceptionConfig()
        kind = self.config.extractor
        if kind == "identity":
            self.stages = None
        elif kind == "seeded-random-convnet":
            self.stages = self._random_stages()
        else:
            self.stages = self._vgg_stages()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _random_stages(self):
        # five VGG-like stages; stage i ends at the tap named relu{i}_2
        names = self.config.layer_names
        if any(n not in VGG_TAPS for n in names):
            raise ValidationError(f"random convnet taps must be drawn from {VGG_TAPS}")
        self._taps = [VGG_TAPS.index(n) for n in names]
        gen = torch.Generator().manual_seed(self.config.seed)
        stages, cin = [], 3
        for i, cout in enumerate(self.config.channels[:max(self._taps) + 1]):
            layers = [] if i == 0 else [nn.AvgPool2d(2, ceil_mode=True)]
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
                       nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU()]
            for m in layers:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    with torch.no_grad():
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                        m.bias.zero_()
            stages.append(nn.Sequential(*layers))
            cin = cout
        return nn.ModuleList(stages)

    def _vgg_stages(self):
        from torchvision.models import VGG19_Weights, vgg19

        features = vgg19(weights=VGG19_Weights.DEFAULT).features
        idx = sorted(_VGG19_INDEX[n] for n in self.config.layer_names)
        stages, start = [], 0
        for stop in idx:
            stages.append(features[start:stop + 1])
            start = stop + 1
        self._taps = list(range(len(idx)))
        self.register_buffer("_mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        return nn.ModuleList(stages)

    def train(self, mode=True):
        # parameters are frozen, keep eval semantics regardless of the caller
        return super().train(False)

    def forward(self, x):
        if self.stages is None:
            return [x]
        if self.config.extractor == "pretrained-vgg19":
            x = ((x + 1) / 2 - self._mean) / self._std
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return [feats[i] for i in self._taps]


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, net: PerceptionNet) -> torch.Tensor:
    """Sum over tapped layers of the squared L2 distance between feature maps."""
    if a.shape != b.shape:
        raise ValidationError(f"perceptual_loss shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if next(net.parameters(), None) is not None:
        net = net.to(a.dtype)
    total = a.new_zeros(())
    for fa, fb in zip(net(a), net(b)):
        total = total + ((fa - fb) ** 2).sum()
    return total
