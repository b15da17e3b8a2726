"""Bilevel meta-training of the transformation network initialization.

Each meta-iteration samples a batch of styles; for every style the current
initialization takes T inner gradient steps on training content, then the
adapted weights are scored on validation content. The mean validation loss is
the outer objective, and its gradient with respect to the initialization
(flowing through the unrolled inner steps in ``full`` mode, truncated at the
adapted weights in ``first_order`` mode) drives the outer update.

The inner/outer machinery is generic: any object may serve as the model as
long as the supplied loss function can score a ParamSet on a batch, so tiny
analytic models can exercise the exact code path used for the real network.
"""

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import data, transform
from .errors import ConfigError, DataError, DivergenceError
from .optim import AdamState, adam_step, sgd_update
from .params import ParamSet
from .perceptual import batch_perceptual_loss, compute_style_grams, extract_features


@dataclass
class MetaTrainConfig:
    iterations: int = 1000
    delta: float = 1e-4
    eta: float = 1e-3
    inner_steps: int = 1
    style_batch: int = 4
    content_batch: int = 4
    meta_gradient_mode: str = "full"
    seed: int = 0
    image_size: int = 256
    checkpoint_interval: int = 100
    outer_optimizer: str = "adam"
    grad_clip: float = 0.0  # 0 disables clipping

    def validate(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.delta <= 0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.inner_steps < 0:
            raise ConfigError(f"inner step count must be >= 0, got {self.inner_steps}")
        if self.style_batch < 1 or self.content_batch < 1:
            raise ConfigError(
                f"batch sizes must be >= 1, got style {self.style_batch}, "
                f"content {self.content_batch}")
        if self.meta_gradient_mode not in ("full", "first_order"):
            raise ConfigError(
                f"meta_gradient_mode must be 'full' or 'first_order', "
                f"got {self.meta_gradient_mode!r}")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ConfigError(
                f"outer_optimizer must be 'adam' or 'sgd', got {self.outer_optimizer!r}")
        if self.image_size < 32 or self.image_size % transform.DOWNSAMPLE_FACTOR:
            raise ConfigError(
                f"image_size must be >= 32 and divisible by "
                f"{transform.DOWNSAMPLE_FACTOR}, got {self.image_size}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.checkpoint_interval < 1:
            raise ConfigError(
                f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}")
        return self


@dataclass
class MetaStepReport:
    iteration: int
    outer_loss: float
    per_style_inner_losses: list
    grad_norm: float


@dataclass
class ContentBatch:
    """A stack of content images plus (optionally cached) target features at
    the content layer."""

    images: torch.Tensor
    content_features: torch.Tensor = None


@dataclass
class StyleTask:
    """One style as the inner objective sees it: precomputed Gram targets."""

    index: int
    grams: dict
    image: torch.Tensor = None


def as_content_batch(batch):
    """Accept either a ContentBatch or a bare Bx3xHxW tensor."""
    if isinstance(batch, ContentBatch):
        return batch
    return ContentBatch(images=batch)


def _next_batch(source):
    if callable(source):
        return source()
    try:
        return next(source)
    except StopIteration:
        raise DataError("batch source exhausted") from None
    except TypeError:
        raise TypeError(f"batch source must be callable or an iterator, got "
                        f"{type(source).__name__}") from None


def inner_adapt(model, theta, loss_fn, batch_source, delta, steps, *,
                keep_graph=False, loss_sink=None):
    """Run ``steps`` gradient steps of size ``delta`` from ``theta``.

    ``loss_fn(model, params, batch)`` scores a ParamSet on one batch; a fresh
    batch is drawn per step. With ``keep_graph`` the returned ParamSet stays
    differentiable with respect to ``theta``; otherwise each step detaches.
    ``theta`` itself is never modified. ``loss_sink`` collects the per-step
    loss values when given.
    """
    if steps < 0:
        raise ConfigError(f"inner step count must be >= 0, got {steps}")
    if steps == 0:
        return theta
    current = dict(theta.entries)
    for _ in range(steps):
        work = {}
        for name, value in current.items():
            if keep_graph:
                work[name] = value if value.requires_grad \
                    else value.detach().clone().requires_grad_(True)
            else:
                work[name] = value.detach().requires_grad_(True)
        batch = _next_batch(batch_source)
        loss = loss_fn(model, ParamSet(work), batch)
        if loss_sink is not None:
            loss_sink.append(float(loss.detach()))
        grads = torch.autograd.grad(loss, list(work.values()), create_graph=keep_graph)
        current = {name: work[name] - delta * g
                   for name, g in zip(work, grads)}
    return ParamSet(current)


def outer_loss(adapted, model, val_source, loss_fn):
    """Mean over styles of the adapted weights' loss on one validation batch
    per style. ``adapted`` is a list of (style, ParamSet)."""
    if not adapted:
        raise DataError("outer loss needs at least one adapted style")
    total = None
    for style, w_s in adapted:
        batch = _next_batch(val_source)
        loss = loss_fn(model, w_s, batch, style)
        total = loss if total is None else total + loss
    return total / len(adapted)


def meta_gradient(model, theta, styles, loss_fn, train_source, val_source, config):
    """Gradient of the outer objective w.r.t. ``theta``.

    Returns (grads by name, outer loss value, per-style inner losses). Styles
    are processed and reduced in order; each style's graph is freed before the
    next to bound memory. In ``full`` mode gradients flow through the inner
    dynamics; in ``first_order`` mode the adapted weights are treated as
    constants and the validation gradient is applied at theta.
    """
    if not styles:
        raise DataError("meta gradient needs at least one style")
    full = config.meta_gradient_mode == "full"
    accum = {name: torch.zeros_like(t) for name, t in theta.entries.items()}
    inner_losses = []
    outer_value = 0.0
    for style in styles:
        style_fn = _bind_style(loss_fn, style)
        sink = []
        if full:
            leaves = {name: t.detach().clone().requires_grad_(True)
                      for name, t in theta.entries.items()}
            w_s = inner_adapt(model, ParamSet(leaves), style_fn, train_source,
                              config.delta, config.inner_steps,
                              keep_graph=True, loss_sink=sink)
            val_batch = _next_batch(val_source)
            loss = loss_fn(model, w_s, val_batch, style)
            grads = torch.autograd.grad(loss, list(leaves.values()),
                                        allow_unused=True)
            grads = {name: (g if g is not None else torch.zeros_like(leaves[name]))
                     for name, g in zip(leaves, grads)}
        else:
            start = theta.detached()
            w_s = inner_adapt(model, start, style_fn, train_source,
                              config.delta, config.inner_steps,
                              keep_graph=False, loss_sink=sink)
            leaves = {name: t.detach().requires_grad_(True)
                      for name, t in w_s.entries.items()}
            val_batch = _next_batch(val_source)
            loss = loss_fn(model, ParamSet(leaves), val_batch, style)
            raw = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
            grads = {name: (g if g is not None else torch.zeros_like(leaves[name]))
                     for name, g in zip(leaves, raw)}
        outer_value += float(loss.detach())
        inner_losses.append(sink[-1] if sink else float("nan"))
        for name, g in grads.items():
            accum[name] += g.detach()
    count = len(styles)
    return ({name: g / count for name, g in accum.items()},
            outer_value / count, inner_losses)


def meta_step(model, theta, styles, loss_fn, train_source, val_source, config,
              opt_state, iteration=0):
    """One outer update. Returns (new theta, report, new optimizer state)."""
    grads, outer_value, inner_losses = meta_gradient(
        model, theta, styles, loss_fn, train_source, val_source, config)
    if not math.isfinite(outer_value):
        raise DivergenceError(f"outer loss is not finite ({outer_value})", iteration)
    sq = 0.0
    for g in grads.values():
        if not torch.isfinite(g).all():
            raise DivergenceError("meta-gradient is not finite", iteration)
        sq += float((g.double() ** 2).sum())
    grad_norm = math.sqrt(sq)
    if config.grad_clip and grad_norm > config.grad_clip:
        scale = config.grad_clip / grad_norm
        grads = {name: g * scale for name, g in grads.items()}
    if config.outer_optimizer == "adam":
        new_values, opt_state = adam_step(theta.entries, grads, opt_state, lr=config.eta)
    else:
        new_values = sgd_update(theta.entries, grads, config.eta)
    report = MetaStepReport(iteration=iteration, outer_loss=outer_value,
                            per_style_inner_losses=inner_losses, grad_norm=grad_norm)
    return ParamSet(new_values), report, opt_state


def _bind_style(loss_fn, style):
    def bound(model, params, batch):
        return loss_fn(model, params, batch, style)
    return bound


def make_perceptual_objective(extractor, pcfg):
    """The production loss: run the network, score against a style's Grams."""
    def loss_fn(model, params, batch, style):
        del model
        batch = as_content_batch(batch)
        out = transform.forward(params, batch.images)
        breakdown = batch_perceptual_loss(pcfg, extractor, batch.images,
                                          style.grams, out,
                                          content_features=batch.content_features)
        return breakdown.total
    return loss_fn


class _ContentStore:
    """Caches decoded content images and their content-layer target features."""

    def __init__(self, handle, size, extractor, pcfg):
        self.handle = handle
        self.size = size
        self.extractor = extractor
        self.pcfg = pcfg
        self._images = {}
        self._features = {}

    def image(self, i):
        if i not in self._images:
            self._images[i] = data.load_image(self.handle.index[i], self.size)
        return self._images[i]

    def feature(self, i):
        if i not in self._features:
            with torch.no_grad():
                feats = extract_features(self.extractor, self.image(i),
                                         (self.pcfg.content_layer,))
            self._features[i] = feats[self.pcfg.content_layer]
        return self._features[i]

    def batch(self, indices):
        images = torch.stack([self.image(i) for i in indices])
        feats = torch.stack([self.feature(i) for i in indices])
        return ContentBatch(images=images, content_features=feats)


def meta_train(config, content_train, content_val, style_handle, extractor,
               pcfg, net_spec, *, report_fn=None, extra_config=None):
    """Run the meta-training loop; yields checkpoints (initial, every
    ``checkpoint_interval`` iterations, and at termination).

    Fully deterministic given ``config.seed``: initialization and every
    sampling decision derive from it. A divergent step yields the last good
    checkpoint and re-raises. ``extra_config`` entries (say, how the content
    split was produced) are merged into every checkpoint's config snapshot.
    """
    config.validate()
    pcfg.validate()
    net_spec.validate()
    for handle, what in ((content_train, "content training"),
                         (content_val, "content validation"),
                         (style_handle, "style")):
        if not len(handle.index):
            raise DataError(f"{what} dataset is empty")
    overlap = {str(p) for p in content_train.index} & {str(p) for p in content_val.index}
    if overlap:
        raise DataError(f"content train/val sets overlap on {len(overlap)} file(s)")
    if config.style_batch > len(style_handle.index):
        raise DataError(f"style_batch {config.style_batch} exceeds style dataset "
                        f"size {len(style_handle.index)}")

    rng = np.random.default_rng(config.seed)
    theta = transform.init_params(net_spec, config.seed)
    opt_state = AdamState.zeros_like(theta.entries)

    styles = []
    for i, path in enumerate(style_handle.index):
        image = data.load_image(path, config.image_size)
        styles.append(StyleTask(index=i,
                                grams=compute_style_grams(extractor, pcfg, image)))

    train_store = _ContentStore(content_train, config.image_size, extractor, pcfg)
    val_store = _ContentStore(content_val, config.image_size, extractor, pcfg)
    loss_fn = make_perceptual_objective(extractor, pcfg)
    snapshot = {"meta": asdict(config), "network": asdict(net_spec),
                "perceptual": asdict(pcfg)}
    if extra_config:
        snapshot.update(extra_config)

    def checkpoint(iteration):
        return data.Checkpoint(params=theta.detached(),
                               optimizer_state=opt_state.to_arrays(),
                               iteration=iteration, config=snapshot)

    yield checkpoint(0)
    for it in range(1, config.iterations + 1):
        started = time.perf_counter()
        picked = data.sample_indices(style_handle, config.style_batch, rng)
        batch_styles = [styles[i] for i in picked]

        def train_source():
            return train_store.batch(
                data.sample_indices(content_train, config.content_batch, rng))

        def val_source():
            return val_store.batch(
                data.sample_indices(content_val, config.content_batch, rng))

        try:
            theta, report, opt_state = meta_step(
                net_spec, theta, batch_styles, loss_fn, train_source, val_source,
                config, opt_state, iteration=it)
        except DivergenceError:
            yield checkpoint(it - 1)
            raise
        if report_fn is not None:
            report_fn(report, time.perf_counter() - started)
        if it % config.checkpoint_interval == 0 or it == config.iterations:
            yield checkpoint(it)
