"""Differentiable perceptual losses on a frozen VGG16 feature stack.

The extractor takes images in [0,1] and applies ImageNet channel
normalization internally before the first convolution. Content loss is the
element-count-normalized squared feature distance at one layer; style loss
sums squared Frobenius distances between Gram matrices over a layer set.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import data
from .errors import ConfigError, DimensionError, WeightsLoadError

# Taps are named after the ReLU they follow; values are indices into the
# standard 16-layer configuration's feature stack.
VGG_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22}

# (sequential index, in_channels, out_channels) of the 13 convolutions.
VGG16_CONVS = (
    (0, 3, 64), (2, 64, 64),
    (5, 64, 128), (7, 128, 128),
    (10, 128, 256), (12, 256, 256), (14, 256, 256),
    (17, 256, 512), (19, 512, 512), (21, 512, 512),
    (24, 512, 512), (26, 512, 512), (28, 512, 512),
)
_POOL_INDICES = (4, 9, 16, 23, 30)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MIN_INPUT_SIZE = 32


@dataclass(frozen=True)
class PerceptualConfig:
    alpha: float = 1.0
    beta: float = 1e5
    content_layer: str = "relu2_2"
    style_layers: tuple = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
    channel_mean: tuple = IMAGENET_MEAN
    channel_std: tuple = IMAGENET_STD

    def validate(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not self.style_layers:
            raise ConfigError("style_layers must be nonempty")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ConfigError("channel_mean and channel_std must have 3 entries")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigError(f"channel_std entries must be > 0, got {self.channel_std}")
        return self

    def layers_needed(self):
        seen = dict.fromkeys((self.content_layer,) + tuple(self.style_layers))
        return tuple(seen)


@dataclass
class LossBreakdown:
    """total = alpha*content + beta*style; fields are 0-dim tensors."""

    total: torch.Tensor
    content: torch.Tensor
    style: torch.Tensor

    def as_floats(self):
        return float(self.total), float(self.content), float(self.style)


class FeatureExtractor(nn.Module):
    """Frozen convolutional stack with named post-activation taps.

    Weights never train; gradients flow through to the input. ``min_input_size``
    is the smallest H/W the stack accepts (keeps every tap nonempty).
    """

    def __init__(self, features, taps, channel_mean=IMAGENET_MEAN,
                 channel_std=IMAGENET_STD, min_input_size=1):
        super().__init__()
        self.features = features
        self.taps = dict(taps)
        self.min_input_size = min_input_size
        self.register_buffer("mean", torch.tensor(channel_mean).view(3, 1, 1))
        self.register_buffer("std", torch.tensor(channel_std).view(3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, image, layers):
        """Return {layer: feature map} for each requested tap.

        Accepts 3xHxW or Bx3xHxW; feature maps keep the input's batching.
        """
        if not layers:
            return {}
        unknown = [l for l in layers if l not in self.taps]
        if unknown:
            raise ConfigError(f"unknown feature layers {unknown}; taps are {sorted(self.taps)}")
        batched = image.ndim == 4
        x = image if batched else image.unsqueeze(0)
        if x.ndim != 4 or x.shape[-3] != 3:
            raise DimensionError(f"expected a 3-channel image, got shape {tuple(image.shape)}")
        h, w = x.shape[-2], x.shape[-1]
        if h < self.min_input_size or w < self.min_input_size:
            raise DimensionError(
                f"input {h}x{w} below the extractor minimum of "
                f"{self.min_input_size}x{self.min_input_size}")

        x = (x - self.mean) / self.std
        wanted = {self.taps[l]: l for l in layers}
        deepest = max(wanted)
        out = {}
        for idx, layer in enumerate(self.features):
            x = layer(x)
            if idx in wanted:
                out[wanted[idx]] = x if batched else x.squeeze(0)
            if idx >= deepest:
                break
        return {l: out[l] for l in layers}


def _vgg16_prefix(weight_arrays, upto_index):
    layers = []
    conv_meta = {idx: (cin, cout) for idx, cin, cout in VGG16_CONVS}
    for idx in range(upto_index + 1):
        if idx in conv_meta:
            cin, cout = conv_meta[idx]
            conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1)
            w, b = weight_arrays[f"features.{idx}.weight"], weight_arrays[f"features.{idx}.bias"]
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(np.asarray(w)))
                conv.bias.copy_(torch.from_numpy(np.asarray(b)))
            layers.append(conv)
        elif idx in _POOL_INDICES:
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


def load_feature_extractor(path, channel_mean=IMAGENET_MEAN, channel_std=IMAGENET_STD):
    """Build the frozen VGG16 extractor from a named-tensor archive.

    The archive must contain `features.<k>.weight` / `features.<k>.bias` for
    all 13 convolutions of the standard 16-layer configuration; taps
    relu1_2/relu2_2/relu3_3/relu4_3 sit at indices 3, 8, 15, 22.
    """
    tensors, _ = data.read_archive(path)
    for idx, cin, cout in VGG16_CONVS:
        for suffix, expected in ((f"features.{idx}.weight", (cout, cin, 3, 3)),
                                 (f"features.{idx}.bias", (cout,))):
            if suffix not in tensors:
                raise WeightsLoadError(f"{path}: missing tensor {suffix!r}")
            got = tuple(tensors[suffix].shape)
            if got != expected:
                raise WeightsLoadError(
                    f"{path}: tensor {suffix!r} has shape {got}, expected {expected}")
    features = _vgg16_prefix(tensors, max(VGG_TAPS.values()))
    return FeatureExtractor(features, VGG_TAPS, channel_mean, channel_std,
                            min_input_size=MIN_INPUT_SIZE)


def random_vgg16_tensors(seed=0, weight_scale=0.5):
    """VGG16-shaped random weights, for environments without the pretrained
    archive. The resulting extractor defines a valid, fixed perceptual loss
    but not the ImageNet one.

    ``weight_scale`` multiplies He-scaled draws; the 0.5 default damps feature
    magnitudes so the default loss weights and step sizes stay in a
    non-saturating regime on small images.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for idx, cin, cout in VGG16_CONVS:
        fan_in = cin * 9
        std = weight_scale * np.sqrt(2.0 / fan_in)
        tensors[f"features.{idx}.weight"] = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32)
        tensors[f"features.{idx}.bias"] = np.zeros(cout, dtype=np.float32)
    return tensors


def write_vgg16_archive(path, tensors):
    for idx, cin, cout in VGG16_CONVS:
        for suffix in (f"features.{idx}.weight", f"features.{idx}.bias"):
            if suffix not in tensors:
                raise WeightsLoadError(f"cannot write archive: missing tensor {suffix!r}")
    data.write_archive(path, tensors, {"kind": "vgg16_weights"})


def export_torchvision_vgg16(path):
    """Convert torchvision's pretrained VGG16 into the archive format."""
    try:
        from torchvision.models import VGG16_Weights, vgg16
    except ImportError as exc:  # pragma: no cover
        raise WeightsLoadError("torchvision is required to export VGG16 weights") from exc
    model = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    state = model.features.state_dict()
    tensors = {f"features.{name}": value.numpy() for name, value in state.items()}
    write_vgg16_archive(path, tensors)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def extract_features(extractor, image, layers):
    """Feature maps of a single 3xHxW image at the requested taps."""
    if image.ndim != 3:
        raise DimensionError(f"expected a 3xHxW image, got shape {tuple(image.shape)}")
    return extractor(image, tuple(layers))


def gram(feature_map):
    """Channel Gram matrix psi(f) psi(f)^T / (C*H*W) of a CxHxW map."""
    if feature_map.ndim != 3:
        raise DimensionError(f"expected a CxHxW feature map, got {tuple(feature_map.shape)}")
    c, h, w = feature_map.shape
    flat = feature_map.reshape(c, h * w)
    return flat @ flat.t() / (c * h * w)


def _gram_batched(features):
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    return torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)


def content_loss(f_c, f_x):
    """Squared feature distance normalized by the element count."""
    if f_c.shape != f_x.shape:
        raise DimensionError(
            f"content feature shapes differ: {tuple(f_c.shape)} vs {tuple(f_x.shape)}")
    return ((f_c - f_x) ** 2).mean()


def style_loss(style_grams, x_features):
    """Sum over layers of squared Frobenius distance between Gram matrices."""
    if set(style_grams) != set(x_features):
        raise ConfigError(
            f"style layer sets differ: {sorted(style_grams)} vs {sorted(x_features)}")
    total = None
    for layer, g_s in style_grams.items():
        g_x = gram(x_features[layer])
        if g_s.shape != g_x.shape:
            raise DimensionError(
                f"gram shapes differ at {layer}: {tuple(g_s.shape)} vs {tuple(g_x.shape)}")
        term = ((g_s - g_x) ** 2).sum()
        total = term if total is None else total + term
    return total


def compute_style_grams(extractor, config, style_image):
    """Per-layer Gram matrices of a style image; pure, so compute once per
    style and resolution, then reuse."""
    with torch.no_grad():
        feats = extract_features(extractor, style_image, config.layers_needed())
    return {layer: gram(feats[layer]) for layer in config.style_layers}


def perceptual_loss(config, extractor, i_c, style_grams, i_x):
    """Weighted sum alpha*content + beta*style for one image."""
    if i_c.shape[-2:] != i_x.shape[-2:]:
        raise DimensionError(
            f"content and candidate sizes differ: {tuple(i_c.shape)} vs {tuple(i_x.shape)}")
    feats_x = extract_features(extractor, i_x, config.layers_needed())
    with torch.no_grad():
        feats_c = extract_features(extractor, i_c, (config.content_layer,))
    c_loss = content_loss(feats_c[config.content_layer], feats_x[config.content_layer])
    s_loss = style_loss(style_grams, {l: feats_x[l] for l in config.style_layers})
    total = config.alpha * c_loss + config.beta * s_loss
    return LossBreakdown(total=total, content=c_loss, style=s_loss)


def batch_perceptual_loss(config, extractor, content_images, style_grams, x_images,
                          content_features=None):
    """Per-sample losses averaged over a Bx3xHxW batch.

    ``content_features`` may carry precomputed target features at the content
    layer (from a cache); otherwise they are derived from ``content_images``.
    """
    if x_images.ndim != 4:
        raise DimensionError(f"expected Bx3xHxW batch, got {tuple(x_images.shape)}")
    feats_x = extractor(x_images, config.layers_needed())
    if content_features is None:
        with torch.no_grad():
            content_features = extractor(content_images, (config.content_layer,))[config.content_layer]
    if content_features.shape != feats_x[config.content_layer].shape:
        raise DimensionError(
            f"content feature shapes differ: {tuple(content_features.shape)} vs "
            f"{tuple(feats_x[config.content_layer].shape)}")
    c_loss = ((content_features - feats_x[config.content_layer]) ** 2).mean()

    s_loss = None
    for layer in config.style_layers:
        g_x = _gram_batched(feats_x[layer])  # B x C x C
        g_s = style_grams[layer].unsqueeze(0)
        term = ((g_s - g_x) ** 2).sum(dim=(1, 2)).mean()
        s_loss = term if s_loss is None else s_loss + term
    total = config.alpha * c_loss + config.beta * s_loss
    return LossBreakdown(total=total, content=c_loss, style=s_loss)


def image_gradient(config, extractor, i_c, style_grams, i_x):
    """Exact reverse-mode gradient of the total loss w.r.t. the pixels of i_x."""
    x = i_x.detach().clone().requires_grad_(True)
    breakdown = perceptual_loss(config, extractor, i_c, style_grams, x)
    (grad,) = torch.autograd.grad(breakdown.total, x)
    return grad
