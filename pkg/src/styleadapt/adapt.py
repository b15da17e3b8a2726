"""Post-training uses of a learned initialization.

Fast single-style adaptation (a short run of feed-forward training started
from the meta-learned weights), pixel-space optimization with a selectable
starting image, convex parameter interpolation between adapted models, and
padded stylization for images and frame folders.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from . import data, transform
from .errors import (
    CodecError,
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    SchemaError,
)
from .meta import _next_batch, as_content_batch
from .optim import AdamState, adam_step
from .params import ParamSet
from .perceptual import batch_perceptual_loss, compute_style_grams, perceptual_loss

WEIGHT_SUM_TOL = 1e-9
MIN_STYLIZE_SIZE = 16


@dataclass
class AdaptConfig:
    steps: int = 200
    step_size: float = 1e-3
    content_batch: int = 4
    eval_interval: int = 10

    def validate(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.content_batch < 1:
            raise ConfigError(f"content_batch must be >= 1, got {self.content_batch}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        return self


def adapt_to_style(theta, style_image, content_source, extractor, pcfg, config,
                   *, eval_fn=None):
    """Adapt ``theta`` to one style by minimizing the mean perceptual loss over
    sampled content batches.

    Returns (adapted ParamSet, trace) where trace rows are
    (step, total, content, style). ``eval_fn(step, params)``, when given, is
    called every ``config.eval_interval`` steps with the current weights.
    """
    grams = compute_style_grams(extractor, pcfg, style_image)
    if config.steps == 0:
        return theta.clone(), []
    values = {name: t.detach().clone() for name, t in theta.entries.items()}
    state = AdamState.zeros_like(values)
    trace = []
    for step in range(config.steps):
        leaves = {name: t.requires_grad_(True) for name, t in values.items()}
        batch = as_content_batch(_next_batch(content_source))
        out = transform.forward(ParamSet(leaves), batch.images)
        breakdown = batch_perceptual_loss(pcfg, extractor, batch.images, grams, out,
                                          content_features=batch.content_features)
        total = float(breakdown.total.detach())
        if not math.isfinite(total):
            raise DivergenceError(f"adaptation loss is not finite ({total})", step)
        trace.append((step, total, float(breakdown.content.detach()),
                      float(breakdown.style.detach())))
        grads = dict(zip(leaves, torch.autograd.grad(breakdown.total,
                                                     list(leaves.values()))))
        values, state = adam_step(leaves, grads, state, lr=config.step_size)
        if eval_fn is not None and (step + 1) % config.eval_interval == 0:
            eval_fn(step + 1, ParamSet({k: v.detach() for k, v in values.items()}))
    return ParamSet(values).detached(), trace


def optimize_image(init, i_c, style_grams, extractor, pcfg, steps, step_size=1e-2):
    """Pixel-space descent on a copy of ``init``; pixels are clamped to [0,1]
    after each step.

    The trace holds one (step, total, content, style) row per evaluation:
    entries 0..steps-1 are measured before each update, the final entry after
    the last one.
    """
    if init.shape != i_c.shape:
        raise DimensionError(
            f"init and content shapes differ: {tuple(init.shape)} vs {tuple(i_c.shape)}")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    image = init.detach().clone()
    state = AdamState.zeros_like({"image": image})
    trace = []
    for step in range(steps + 1):
        leaf = image.requires_grad_(True)
        breakdown = perceptual_loss(pcfg, extractor, i_c, style_grams, leaf)
        total = float(breakdown.total.detach())
        if not math.isfinite(total):
            raise DivergenceError(f"pixel optimization loss is not finite ({total})", step)
        trace.append((step, total, float(breakdown.content.detach()),
                      float(breakdown.style.detach())))
        if step == steps:
            break
        (grad,) = torch.autograd.grad(breakdown.total, leaf)
        values, state = adam_step({"image": leaf}, {"image": grad}, state, lr=step_size)
        image = values["image"].clamp_(0.0, 1.0)
    return image.detach(), trace


def interpolate(param_sets, weights):
    """Convex combination of ParamSets, entry by entry.

    Vertex weights return the matching endpoint bit-exactly.
    """
    weights = [float(w) for w in weights]
    if len(param_sets) != len(weights):
        raise ConfigError(
            f"{len(param_sets)} parameter sets but {len(weights)} weights")
    if not param_sets:
        raise ConfigError("nothing to interpolate")
    if any(w < 0 for w in weights):
        raise ConfigError(f"interpolation weights must be >= 0, got {weights}")
    if abs(sum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise ConfigError(
            f"interpolation weights must sum to 1, got {sum(weights)!r}")
    first = param_sets[0]
    for other in param_sets[1:]:
        if other.schema != first.schema:
            raise SchemaError("parameter sets have differing schemas; "
                              "interpolation needs identical networks")
    for i, w in enumerate(weights):
        if w == 1.0 and all(x == 0.0 for j, x in enumerate(weights) if j != i):
            return param_sets[i].clone()
    out = None
    for ps, w in zip(param_sets, weights):
        if w == 0.0:
            continue
        if out is None:
            out = {name: w * ps[name] for name in ps.names}
        else:
            for name in ps.names:
                out[name] = out[name] + w * ps[name]
    return ParamSet(out)


def stylize(params, image):
    """Stylize an image of any size >= 16: reflect-pad to the next multiple of
    4, run the network, crop back."""
    if image.ndim != 3:
        raise DimensionError(f"expected a 3xHxW image, got shape {tuple(image.shape)}")
    _, h, w = image.shape
    if h < MIN_STYLIZE_SIZE or w < MIN_STYLIZE_SIZE:
        raise DimensionError(
            f"input {h}x{w} below the stylization minimum of "
            f"{MIN_STYLIZE_SIZE}x{MIN_STYLIZE_SIZE}")
    factor = transform.DOWNSAMPLE_FACTOR
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h == 0 and pad_w == 0:
        return transform.forward(params, image)
    padded = F.pad(image.unsqueeze(0), (0, pad_w, 0, pad_h), mode="reflect").squeeze(0)
    out = transform.forward(params, padded)
    return out[:, :h, :w]


def stylize_video(params, frames_dir, out_dir):
    """Stylize every frame in ``frames_dir`` independently, in sorted order,
    into numbered PNGs under ``out_dir``. Returns the frame count."""
    handle = data.open_dataset(frames_dir, split_tag="frames")
    if not handle.index:
        return 0
    size = None
    for k, path in enumerate(handle.index):
        try:
            frame = data.read_image(path)
        except CodecError as exc:
            raise CodecError(f"frame {k} ({path}): {exc}") from exc
        if size is None:
            size = frame.shape
        elif frame.shape != size:
            raise DataError(
                f"frame {k} ({path}) has size {tuple(frame.shape)}, expected "
                f"{tuple(size)}; frames must share one size")
        styled = stylize(params, frame)
        data.save_image(styled, Path(out_dir) / f"frame_{k:05d}.png")
    return len(handle.index)
