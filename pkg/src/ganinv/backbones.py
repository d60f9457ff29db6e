"""Frozen feature backbones for perceptual distance and class-activation maps.

Two implementations of the same small protocol: a seeded random conv
pyramid that works anywhere (the default for tests and desk-scale runs),
and a VGG16 wrapper that requires a locally available weights file since
this library never downloads anything.
"""

from __future__ import annotations

import os
from typing import Protocol, runtime_checkable

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

VGG16_WEIGHTS_ENV = "GANINV_VGG16_WEIGHTS"

# Indices of the post-ReLU tap points inside torchvision's vgg16.features.
_VGG16_TAPS = (3, 8, 15, 22, 29)


@runtime_checkable
class FeatureBackbone(Protocol):
    """What the loss and attention code needs from a backbone."""

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        """Map images from [-1, 1] to the backbone's expected input statistics."""

    def features(self, x: torch.Tensor) -> list:
        """Feature maps at the five tap points, shallow to deep."""

    def classifier_logits(self, x: torch.Tensor) -> torch.Tensor:
        """(n, n_classes) logits for class-activation maps."""

    def forward_with_tap(self, x: torch.Tensor, tap_index: int):
        """(logits, activations-at-tap); activations stay in the autograd graph."""


class TinyBackbone(nn.Module):
    """Seeded random five-block conv pyramid, frozen at construction.

    Random filters are a deliberate choice: they give a repeatable,
    download-free feature space whose distances still separate images
    well enough for desk-scale work. Accepts images in [-1, 1] directly
    (normalize is the identity). All parameters are deterministic given
    the seed.
    """

    channels = (16, 32, 64, 96, 128)

    def __init__(self, seed: int = 0, n_classes: int = 16):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        c_in = 3
        for c_out in self.channels:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                )
                conv.bias.zero_()
            blocks.append(conv)
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(self.channels[-1], n_classes)
        with torch.no_grad():
            self.head.weight.copy_(
                torch.randn(self.head.weight.shape, generator=gen)
                * (1.0 / self.channels[-1]) ** 0.5
            )
            self.head.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def _run(self, x: torch.Tensor, stop_after: int | None = None) -> list:
        taps = []
        for conv in self.blocks:
            x = F.leaky_relu(conv(x), 0.2)
            taps.append(x)
            if stop_after is not None and len(taps) > stop_after:
                break
        return taps

    def features(self, x: torch.Tensor) -> list:
        return self._run(x)

    def classifier_logits(self, x: torch.Tensor) -> torch.Tensor:
        deepest = self._run(x)[-1]
        pooled = deepest.mean(dim=(2, 3))
        return self.head(pooled)

    def forward_with_tap(self, x: torch.Tensor, tap_index: int):
        taps = self._run(x)
        if not 0 <= tap_index < len(taps):
            raise ConfigurationError(
                f"tap_index {tap_index} out of range, backbone has {len(taps)} taps"
            )
        acts = taps[tap_index]
        rest = acts
        for conv in self.blocks[tap_index + 1:]:
            rest = F.leaky_relu(conv(rest), 0.2)
        logits = self.head(rest.mean(dim=(2, 3)))
        return logits, acts

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier_logits(x)


def resolve_vgg16_weights(path: str | None = None) -> str:
    """Locate a local VGG16 weights file, explicit path first, then env var."""
    candidate = path or os.environ.get(VGG16_WEIGHTS_ENV)
    if not candidate:
        raise ConfigurationError(
            "VGG16 weights are not bundled and are never downloaded. Place a "
            "torchvision vgg16 state_dict file locally and pass its path, or "
            f"set {VGG16_WEIGHTS_ENV}=/path/to/vgg16.pth. The 'tiny' backbone "
            "needs no weights and is the default."
        )
    if not os.path.isfile(candidate):
        raise ConfigurationError(f"VGG16 weights file not found: {candidate}")
    return candidate


class Vgg16Backbone(nn.Module):
    """Frozen torchvision VGG16 with taps after each stage's last ReLU.

    Weights must exist locally (see resolve_vgg16_weights); inputs in
    [-1, 1] are remapped to [0, 1] and standardized with the ImageNet
    statistics the network was trained on.
    """

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        import torchvision

        path = resolve_vgg16_weights(weights_path)
        net = torchvision.models.vgg16(weights=None)
        state = torch.load(path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        self.net = net
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        x01 = (x + 1.0) / 2.0
        return (x01 - self.mean) / self.std

    def features(self, x: torch.Tensor) -> list:
        taps = []
        for i, layer in enumerate(self.net.features):
            x = layer(x)
            if i in _VGG16_TAPS:
                taps.append(x)
        return taps

    def classifier_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def forward_with_tap(self, x: torch.Tensor, tap_index: int):
        if not 0 <= tap_index < len(_VGG16_TAPS):
            raise ConfigurationError(
                f"tap_index {tap_index} out of range, backbone has {len(_VGG16_TAPS)} taps"
            )
        acts = None
        for i, layer in enumerate(self.net.features):
            x = layer(x)
            if i == _VGG16_TAPS[tap_index]:
                acts = x
        x = self.net.avgpool(x)
        logits = self.net.classifier(torch.flatten(x, 1))
        return logits, acts

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier_logits(x)


def load_backbone(name: str = "tiny", seed: int = 0,
                  weights_path: str | None = None) -> FeatureBackbone:
    """Build a backbone by name: 'tiny' (seeded, no weights) or 'vgg16'."""
    if name == "tiny":
        return TinyBackbone(seed=seed)
    if name == "vgg16":
        return Vgg16Backbone(weights_path=weights_path)
    raise ConfigurationError(f"unknown backbone {name!r}, expected 'tiny' or 'vgg16'")
