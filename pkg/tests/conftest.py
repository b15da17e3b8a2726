"""Shared fixtures: synthetic image corpora, feature extractors, tiny nets.

The pretrained archive is not downloadable in CI, so extractor fixtures use
seeded VGG16-shaped random weights; every contract under test (shapes, taps,
gradients, determinism, training trends) is weight-agnostic.
"""

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from styleadapt import data
from styleadapt.perceptual import (
    FeatureExtractor,
    PerceptualConfig,
    load_feature_extractor,
    random_vgg16_tensors,
    write_vgg16_archive,
)

VGG_SEED = 7


def smooth_image(size, seed, octaves=3):
    """Multi-octave random blobs: content-like images with structure at
    several scales, unlike raw noise."""
    gen = torch.Generator().manual_seed(seed)
    img = torch.zeros(3, size, size)
    for octave in range(octaves):
        res = 4 * 2 ** octave
        layer = torch.rand(1, 3, res, res, generator=gen)
        img += F.interpolate(layer, size=(size, size), mode="bilinear",
                             align_corners=False)[0] / (octave + 1)
    img -= img.min()
    img /= img.max().clamp(min=1e-6)
    return img


def build_tiny_extractor(seed=0, channels=(8, 12), smooth=False):
    """Two-conv extractor with taps after each activation; accepts any size.

    ``smooth=True`` swaps ReLU for Softplus so central differences are valid
    everywhere (ReLU kinks inside the finite-difference step would make the
    oracle itself wrong, not the gradient).
    """
    gen = torch.Generator().manual_seed(seed)
    c1, c2 = channels
    conv1 = nn.Conv2d(3, c1, 3, padding=1)
    conv2 = nn.Conv2d(c1, c2, 3, padding=1)
    with torch.no_grad():
        for conv in (conv1, conv2):
            fan_in = conv.in_channels * 9
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                              * (0.5 / fan_in ** 0.5))
            conv.bias.zero_()
    act = nn.Softplus if smooth else nn.ReLU
    features = nn.Sequential(conv1, act(), conv2, act())
    return FeatureExtractor(features, {"tap1": 1, "tap2": 3}, min_input_size=1)


def tiny_perceptual_config(alpha=1.0, beta=10.0):
    return PerceptualConfig(alpha=alpha, beta=beta, content_layer="tap1",
                            style_layers=("tap1", "tap2"))


@pytest.fixture(scope="session")
def vgg_archive(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "vgg16.tensors"
    write_vgg16_archive(path, random_vgg16_tensors(seed=VGG_SEED))
    return path


@pytest.fixture(scope="session")
def extractor(vgg_archive):
    return load_feature_extractor(vgg_archive)


@pytest.fixture(scope="session")
def tiny_extractor():
    return build_tiny_extractor(seed=0)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """16 train + 8 val content images and 4 styles at small size, one
    held-out style, and one larger content image."""
    root = tmp_path_factory.mktemp("corpus")
    dirs = {name: root / name for name in ("train", "val", "style")}
    for d in dirs.values():
        d.mkdir()
    for i in range(16):
        data.save_image(smooth_image(64, 100 + i), dirs["train"] / f"content_{i:02d}.png")
    for i in range(8):
        data.save_image(smooth_image(64, 200 + i), dirs["val"] / f"content_{i:02d}.png")
    for i in range(4):
        data.save_image(smooth_image(64, 300 + i, octaves=4), dirs["style"] / f"style_{i}.png")
    heldout = root / "style_heldout.png"
    data.save_image(smooth_image(64, 999, octaves=4), heldout)
    big_content = root / "content_big.png"
    data.save_image(smooth_image(256, 500), big_content)
    big_style = root / "style_big.png"
    data.save_image(smooth_image(256, 304, octaves=4), big_style)
    return {"root": root, "train": dirs["train"], "val": dirs["val"],
            "style": dirs["style"], "heldout_style": heldout,
            "big_content": big_content, "big_style": big_style}
