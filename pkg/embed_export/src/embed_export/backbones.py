"""Frozen vision backbones and their published evaluation transforms.

Each entry yields a (model, transform) pair: the model maps a batch of
preprocessed images to one global vector per image (CLS token for ViTs,
pooled features for convnets) and is frozen in eval mode. The embedding
width is discovered from a live forward pass, never assumed.

The torchvision / hub entries pull pretrained weights and therefore need
network access on first use. ``toy-cnn`` is a deterministic seeded network
for fixtures and offline smoke tests.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn
from torchvision import transforms


class ToyCNN(nn.Module):
    """Tiny deterministic conv net; weights come from a fixed seed."""

    def __init__(self, out_dim: int = 32, seed: int = 1234):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(16 * 16, out_dim)
        with torch.no_grad():
            for param in self.parameters():
                param.copy_(torch.randn(param.shape, generator=generator) * 0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x)
        return self.head(feats.flatten(1))


def _toy() -> tuple[nn.Module, Callable]:
    transform = transforms.Compose([
        transforms.Resize(64),
        transforms.CenterCrop(64),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.5, 0.5, 0.5], std=[0.25, 0.25, 0.25]),
    ])
    return ToyCNN(), transform


def _resnet(name: str) -> tuple[nn.Module, Callable]:
    from torchvision import models

    weights = models.get_model_weights(name).DEFAULT
    model = models.get_model(name, weights=weights)
    model.fc = nn.Identity()  # pooled global features
    return model, weights.transforms()


def _dinov2(name: str) -> tuple[nn.Module, Callable]:
    model = torch.hub.load("facebookresearch/dinov2", name)
    transform = transforms.Compose([
        transforms.Resize(256, interpolation=transforms.InterpolationMode.BICUBIC),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]),
    ])
    return model, transform  # forward() returns the CLS representation


BACKBONES: dict[str, Callable[[], tuple[nn.Module, Callable]]] = {
    "toy-cnn": _toy,
    "resnet18": lambda: _resnet("resnet18"),
    "resnet50": lambda: _resnet("resnet50"),
    "resnet101": lambda: _resnet("resnet101"),
    "dinov2_vits14": lambda: _dinov2("dinov2_vits14"),
    "dinov2_vitb14": lambda: _dinov2("dinov2_vitb14"),
}


def load_backbone(name: str, device: str = "cpu") -> tuple[nn.Module, Callable]:
    """Instantiate a registered backbone, frozen and in eval mode."""
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; available: {sorted(BACKBONES)}")
    model, transform = BACKBONES[name]()
    model = model.to(device)
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model, transform
