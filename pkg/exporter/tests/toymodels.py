"""Tiny torch models and image trees for exercising the exporter.

Models are plain ``nn.Sequential`` stacks of builtin layers so the
whole-module pickles load anywhere without import tricks.
"""

from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn


def classifier(n_classes=2, channels=4, seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(OrderedDict([
        ("conv", nn.Conv2d(3, channels, 3, padding=1)),
        ("relu", nn.ReLU()),
        ("pool", nn.AdaptiveAvgPool2d(1)),
        ("flat", nn.Flatten()),
        ("head", nn.Linear(channels, n_classes)),
    ]))


def segmenter(n_labels=150, seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(OrderedDict([
        ("project", nn.Conv2d(3, n_labels, 1)),
    ]))


def overflowing_classifier():
    # finite activations, but the head blows any nonzero image up to inf
    model = nn.Sequential(OrderedDict([
        ("conv", nn.Conv2d(3, 1, 1, bias=False)),
        ("pool", nn.AdaptiveAvgPool2d(1)),
        ("flat", nn.Flatten()),
        ("head", nn.Linear(1, 2, bias=False)),
    ]))
    with torch.no_grad():
        model.conv.weight.fill_(1e30)
        model.head.weight.fill_(1e10)
    return model


def save(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model, path)
    return path


def make_image_tree(root, classes=("day", "night"), per_class=3, side=32, seed=0):
    """Class subfolders of small random PNGs; returns the tree root."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for class_name in classes:
        folder = root / class_name
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            pixels = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(folder / f"{class_name}_{i:02d}.png")
    return root


def make_solid_image(path, color):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.full((32, 32, 3), color, dtype=np.uint8)
    Image.fromarray(pixels).save(path)
    return path
