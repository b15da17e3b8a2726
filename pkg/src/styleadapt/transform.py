"""Feed-forward image transformation network.

Encoder (9x9 conv, then two stride-2 3x3 convs), residual trunk, decoder
(nearest-neighbor upsample then 3x3 conv, twice), 9x9 output conv. Instance
normalization with learned scale/shift follows every convolution except the
last; the output is squashed to (0,1) with a Sigmoid. All convolutions use
reflection padding; upsampling avoids checkerboard artifacts by resizing
before convolving.

Parameters live outside the module in ParamSets; ``forward`` runs the
architecture statelessly against any schema-compatible ParamSet, so adapted
or interpolated weights need no module surgery.
"""

import functools
import math
import re
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, SchemaError
from .params import ParamSet

DOWNSAMPLE_FACTOR = 4
INSTANCE_NORM_EPS = 1e-5

_RES_NAME = re.compile(r"^res\.(\d+)\.")


@dataclass(frozen=True)
class NetworkSpec:
    base_channels: int = 32
    num_residual_blocks: int = 5

    def validate(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_residual_blocks < 1:
            raise ConfigError(
                f"num_residual_blocks must be >= 1, got {self.num_residual_blocks}")
        return self


def _conv(cin, cout, kernel, stride=1):
    return nn.Conv2d(cin, cout, kernel_size=kernel, stride=stride,
                     padding=kernel // 2, padding_mode="reflect")


class _ConvNorm(nn.Module):
    def __init__(self, cin, cout, kernel, stride=1):
        super().__init__()
        self.conv = _conv(cin, cout, kernel, stride)
        self.norm = nn.InstanceNorm2d(cout, eps=INSTANCE_NORM_EPS, affine=True,
                                      track_running_stats=False)

    def forward(self, x):
        return self.norm(self.conv(x))


class _ResidualBlock(nn.Module):
    """conv-IN-ReLU-conv-IN plus identity skip; no activation after the sum."""

    def __init__(self, channels):
        super().__init__()
        self.block1 = _ConvNorm(channels, channels, 3)
        self.block2 = _ConvNorm(channels, channels, 3)

    def forward(self, x):
        return x + self.block2(F.relu(self.block1(x)))


class _UpsampleConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = _ConvNorm(cin, cout, 3)

    def forward(self, x):
        return self.body(F.interpolate(x, scale_factor=2, mode="nearest"))


class TransformNet(nn.Module):
    def __init__(self, spec):
        super().__init__()
        b = spec.base_channels
        self.enc1 = _ConvNorm(3, b, 9)
        self.enc2 = _ConvNorm(b, 2 * b, 3, stride=2)
        self.enc3 = _ConvNorm(2 * b, 4 * b, 3, stride=2)
        self.res = nn.ModuleList(_ResidualBlock(4 * b) for _ in range(spec.num_residual_blocks))
        self.dec1 = _UpsampleConv(4 * b, 2 * b)
        self.dec2 = _UpsampleConv(2 * b, b)
        self.out = _conv(b, 3, 9)

    def forward(self, x):
        x = F.relu(self.enc1(x))
        x = F.relu(self.enc2(x))
        x = F.relu(self.enc3(x))
        for block in self.res:
            x = block(x)
        x = F.relu(self.dec1(x))
        x = F.relu(self.dec2(x))
        return torch.sigmoid(self.out(x))


@functools.lru_cache(maxsize=8)
def template(spec):
    """Shared stateless module per spec; its own parameters are placeholders."""
    net = TransformNet(spec)
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


def schema(spec):
    return tuple((name, tuple(p.shape)) for name, p in template(spec).named_parameters())


def init_params(spec, seed):
    """Deterministic initialization: fan-in-scaled uniform convolution weights,
    zero biases, instance-norm scale 1 and shift 0."""
    spec.validate()
    gen = torch.Generator().manual_seed(seed)
    entries = {}
    for name, shape in schema(spec):
        if name.endswith("conv.weight") or name == "out.weight":
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            entries[name] = (torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound
        elif name.endswith("norm.weight"):
            entries[name] = torch.ones(shape)
        else:  # conv biases and norm shifts
            entries[name] = torch.zeros(shape)
    return ParamSet(entries)


def spec_from_params(params):
    """Infer the NetworkSpec a ParamSet was built for; verify the full schema."""
    try:
        base = params["enc1.conv.weight"].shape[0]
    except KeyError as exc:
        raise SchemaError("ParamSet does not match the transform network schema "
                          "(missing enc1.conv.weight)") from exc
    blocks = {int(m.group(1)) for m in map(_RES_NAME.match, params.names) if m}
    spec = NetworkSpec(base_channels=int(base), num_residual_blocks=len(blocks))
    try:
        spec.validate()
    except ConfigError as exc:
        raise SchemaError(f"ParamSet does not describe a valid network: {exc}") from exc
    expected = schema(spec)
    if params.schema != expected:
        got = {name for name, _ in params.schema}
        want = {name for name, _ in expected}
        missing = sorted(want - got)
        extra = sorted(got - want)
        detail = []
        if missing:
            detail.append(f"missing {missing[:3]}")
        if extra:
            detail.append(f"unexpected {extra[:3]}")
        if not detail:
            detail.append("shape mismatch")
        raise SchemaError(
            f"ParamSet schema does not match the transform network: {'; '.join(detail)}")
    return spec


def forward(params, image):
    """Run the network under ``params``. Accepts 3xHxW or Bx3xHxW with H and W
    divisible by 4; output matches the input shape with values in (0,1)."""
    spec = spec_from_params(params)
    batched = image.ndim == 4
    x = image if batched else image.unsqueeze(0)
    if x.ndim != 4 or x.shape[-3] != 3:
        raise DimensionError(f"expected a 3-channel image, got shape {tuple(image.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise DimensionError(
            f"input {h}x{w} must have height and width divisible by {DOWNSAMPLE_FACTOR}")
    out = torch.func.functional_call(template(spec), params.entries, (x,))
    return out if batched else out.squeeze(0)


def param_count(params):
    """Total number of scalar parameters."""
    return params.param_count()


def sgd_step(params, grads, lr):
    """params - lr * grads, elementwise; inputs are left untouched."""
    if params.schema != grads.schema:
        raise SchemaError("gradient schema does not match parameter schema")
    if lr == 0:
        return params.clone()
    return ParamSet({name: params[name] - lr * grads[name] for name in params.names})
