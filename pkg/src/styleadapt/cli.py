"""Command-line front door.

Flag values override config-file values, which override defaults. Exit codes:
0 success, 1 runtime failure (missing files, divergence), 2 invalid
configuration.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import adapt as adapt_mod
from . import data, meta, transform
from .errors import ConfigError, StyleAdaptError
from .perceptual import PerceptualConfig, compute_style_grams, load_feature_extractor

COMMANDS = ("meta-train", "adapt", "stylize", "optimize", "interpolate",
            "video", "benchmark")

BENCHMARK_RESOLUTIONS = (256, 512)
BENCHMARK_RUNS = 50
BENCHMARK_WARMUP = 3


@dataclass
class RunConfig:
    command: str
    content_dir: str = None
    val_dir: str = None
    style_dir: str = None
    style: str = None
    content: str = None
    checkpoint: str = None
    vgg_weights: str = None
    out: str = None
    iterations: int = 100000
    steps: int = None
    delta: float = 1e-4
    eta: float = 1e-3
    inner_steps: int = 1
    alpha: float = 1.0
    beta: float = 1e5
    meta_grad: str = "full"
    seed: int = 0
    size: int = 256
    weights: str = None
    style_batch: int = 4
    content_batch: int = 4
    checkpoint_interval: int = 100
    step_size: float = None
    eval_interval: int = 10
    grad_clip: float = 0.0
    base_channels: int = 32
    num_residual_blocks: int = 5


_DEFAULTS = {f.name: f.default for f in fields(RunConfig) if f.name != "command"}

# Per-command fallbacks for flags whose default depends on the command.
_STEPS_DEFAULT = {"adapt": 200, "optimize": 800}
_STEP_SIZE_DEFAULT = {"adapt": 1e-3, "optimize": 1e-2}

_REQUIRED = {
    "meta-train": ("content_dir", "style_dir", "vgg_weights", "out"),
    "adapt": ("checkpoint", "style", "content_dir", "vgg_weights", "out"),
    "stylize": ("checkpoint", "content", "out"),
    "optimize": ("style", "content", "vgg_weights", "out"),
    "interpolate": ("checkpoint", "weights", "out"),
    "video": ("checkpoint", "content_dir", "out"),
    "benchmark": ("checkpoint",),
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="styleadapt",
        description="Meta-learned fast-adapting style transfer")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", dest="config_file", metavar="FILE",
                        help="JSON config file; flags override its values")
    parser.add_argument("--content-dir", dest="content_dir")
    parser.add_argument("--val-dir", dest="val_dir")
    parser.add_argument("--style-dir", dest="style_dir")
    parser.add_argument("--style", help="single style image")
    parser.add_argument("--content", help="single content image")
    parser.add_argument("--checkpoint",
                        help="checkpoint path (comma-separated list for interpolate)")
    parser.add_argument("--vgg-weights", dest="vgg_weights",
                        help="pretrained feature-extractor archive")
    parser.add_argument("--out")
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--eta", type=float)
    parser.add_argument("--T", dest="inner_steps", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--meta-grad", dest="meta_grad",
                        choices=("full", "first_order"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--size", type=int)
    parser.add_argument("--weights", help="comma-separated interpolation weights")
    parser.add_argument("--style-batch", dest="style_batch", type=int)
    parser.add_argument("--content-batch", dest="content_batch", type=int)
    parser.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    parser.add_argument("--step-size", dest="step_size", type=float)
    parser.add_argument("--eval-interval", dest="eval_interval", type=int)
    parser.add_argument("--grad-clip", dest="grad_clip", type=float)
    return parser


def _coerce(key, value):
    try:
        if key in ("iterations", "steps", "inner_steps", "seed", "size",
                   "style_batch", "content_batch", "checkpoint_interval",
                   "eval_interval", "base_channels", "num_residual_blocks"):
            return int(value)
        if key in ("delta", "eta", "alpha", "beta", "step_size", "grad_clip"):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: cannot convert {value!r}: {exc}") from exc
    return value


def parse_config(argv, config_file=None):
    """Merge defaults, config file, and flags into a validated RunConfig."""
    parser = _build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    file_path = args.pop("config_file") or config_file

    merged = dict(_DEFAULTS)
    if file_path:
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                file_values = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {file_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {file_path} is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {file_path} must hold a JSON object")
        for key, value in file_values.items():
            norm = key.replace("-", "_")
            if norm == "T":
                norm = "inner_steps"
            if norm not in _DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[norm] = _coerce(norm, value)
    for key, value in args.items():
        if value is not None:
            merged[key] = value

    if merged["steps"] is None:
        merged["steps"] = _STEPS_DEFAULT.get(command, 200)
    if merged["step_size"] is None:
        merged["step_size"] = _STEP_SIZE_DEFAULT.get(command, 1e-3)

    config = RunConfig(command=command, **merged)
    _validate(config)
    return config


def _parse_weights(text):
    try:
        weights = [float(w) for w in str(text).split(",") if w != ""]
    except ValueError as exc:
        raise ConfigError(f"--weights must be comma-separated numbers, got {text!r}") from exc
    if not weights:
        raise ConfigError("--weights is empty")
    return weights


def _validate(config):
    missing = [key for key in _REQUIRED[config.command] if not getattr(config, key)]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise ConfigError(f"{config.command} requires {flags}")

    PerceptualConfig(alpha=config.alpha, beta=config.beta).validate()
    transform.NetworkSpec(base_channels=config.base_channels,
                          num_residual_blocks=config.num_residual_blocks).validate()
    if config.command == "meta-train":
        _meta_config(config).validate()
    if config.command in ("adapt", "optimize"):
        adapt_mod.AdaptConfig(steps=config.steps, step_size=config.step_size,
                              content_batch=config.content_batch,
                              eval_interval=config.eval_interval).validate()
    if config.command == "interpolate":
        weights = _parse_weights(config.weights)
        paths = _checkpoint_list(config.checkpoint)
        if len(paths) != len(weights):
            raise ConfigError(
                f"{len(paths)} checkpoints but {len(weights)} weights")
        if any(w < 0 for w in weights):
            raise ConfigError(f"interpolation weights must be >= 0, got {weights}")
        if abs(sum(weights) - 1.0) > adapt_mod.WEIGHT_SUM_TOL:
            raise ConfigError(f"interpolation weights must sum to 1, got {sum(weights)!r}")
    if config.size < 32 or config.size % transform.DOWNSAMPLE_FACTOR:
        raise ConfigError(f"size must be >= 32 and divisible by "
                          f"{transform.DOWNSAMPLE_FACTOR}, got {config.size}")
    if config.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {config.seed}")


def _meta_config(config):
    return meta.MetaTrainConfig(
        iterations=config.iterations, delta=config.delta, eta=config.eta,
        inner_steps=config.inner_steps, style_batch=config.style_batch,
        content_batch=config.content_batch, meta_gradient_mode=config.meta_grad,
        seed=config.seed, image_size=config.size,
        checkpoint_interval=config.checkpoint_interval, grad_clip=config.grad_clip)


def _checkpoint_list(text):
    return [p for p in str(text).split(",") if p]


def _perceptual_config(config):
    return PerceptualConfig(alpha=config.alpha, beta=config.beta)


def _net_spec(config):
    return transform.NetworkSpec(base_channels=config.base_channels,
                                 num_residual_blocks=config.num_residual_blocks)


def _log(message):
    print(message, file=sys.stderr)


def _write_trace(path, trace):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# step total content style\n")
        for step, total, content, style in trace:
            f.write(f"{step} {total!r} {content!r} {style!r}\n")


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------

def _cmd_meta_train(config):
    extractor = load_feature_extractor(config.vgg_weights)
    pcfg = _perceptual_config(config)
    spec = _net_spec(config)
    mcfg = _meta_config(config)

    content = data.open_dataset(config.content_dir, "content_train")
    split_note = {"mode": "dedicated_val_dir"}
    if config.val_dir:
        train_handle = content
        val_handle = data.open_dataset(config.val_dir, "content_val")
    else:
        train_handle, val_handle = data.split_dataset(content, 0.1, config.seed)
        split_note = {"mode": "seeded_split", "val_fraction": 0.1,
                      "seed": config.seed}
        _log(f"split {config.content_dir}: {len(train_handle.index)} train / "
             f"{len(val_handle.index)} val")
    styles = data.open_dataset(config.style_dir, "style")

    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        def report_fn(report, wall_time):
            metrics.write(json.dumps({
                "iteration": report.iteration,
                "outer_loss": report.outer_loss,
                "per_style_inner_losses": report.per_style_inner_losses,
                "grad_norm": report.grad_norm,
                "wall_time": wall_time,
            }) + "\n")
            metrics.flush()
            if report.iteration % 10 == 0 or report.iteration == 1:
                _log(f"iter {report.iteration}: outer {report.outer_loss:.6g} "
                     f"grad_norm {report.grad_norm:.4g} ({wall_time:.2f}s)")

        last = None
        for ckpt in meta.meta_train(mcfg, train_handle, val_handle, styles,
                                    extractor, pcfg, spec, report_fn=report_fn,
                                    extra_config={"content_split": split_note}):
            path = out_dir / f"iter_{ckpt.iteration:06d}.ckpt"
            data.save_checkpoint(ckpt, path)
            last = path
    _log(f"final checkpoint: {last}")
    return 0


def _load_params(path):
    return data.load_checkpoint(path).params


def _cmd_adapt(config):
    extractor = load_feature_extractor(config.vgg_weights)
    pcfg = _perceptual_config(config)
    theta = _load_params(config.checkpoint)
    style_image = data.load_image(config.style, config.size)
    handle = data.open_dataset(config.content_dir, "content_train")
    acfg = adapt_mod.AdaptConfig(steps=config.steps, step_size=config.step_size,
                                 content_batch=config.content_batch,
                                 eval_interval=config.eval_interval)
    store = meta._ContentStore(handle, config.size, extractor, pcfg)
    rng = np.random.default_rng(config.seed)

    def content_source():
        return store.batch(data.sample_indices(handle, acfg.content_batch, rng))

    adapted, trace = adapt_mod.adapt_to_style(theta, style_image, content_source,
                                              extractor, pcfg, acfg)
    ckpt = data.Checkpoint(params=adapted, optimizer_state={}, iteration=len(trace),
                           config={"adapted_from": str(config.checkpoint),
                                   "style": str(config.style),
                                   "steps": acfg.steps,
                                   "step_size": acfg.step_size})
    data.save_checkpoint(ckpt, config.out)
    _write_trace(str(config.out) + ".trace", trace)
    _log(f"adapted checkpoint: {config.out} "
         f"(final loss {trace[-1][1]:.6g})" if trace else "no steps taken")
    return 0


def _cmd_stylize(config):
    params = _load_params(config.checkpoint)
    image = data.read_image(config.content)  # native size; stylize pads as needed
    out = adapt_mod.stylize(params, image)
    data.save_image(out, config.out)
    _log(f"wrote {config.out}")
    return 0


def _cmd_optimize(config):
    extractor = load_feature_extractor(config.vgg_weights)
    pcfg = _perceptual_config(config)
    i_c = data.load_image(config.content, config.size)
    style_image = data.load_image(config.style, config.size)
    grams = compute_style_grams(extractor, pcfg, style_image)
    if config.checkpoint:
        theta = _load_params(config.checkpoint)
        with torch.no_grad():
            init = transform.forward(theta, i_c)
        _log("initializing from the transformed content image")
    else:
        init = i_c
        _log("initializing from the content image")
    image, trace = adapt_mod.optimize_image(init, i_c, grams, extractor, pcfg,
                                            steps=config.steps,
                                            step_size=config.step_size)
    data.save_image(image, config.out)
    _write_trace(str(config.out) + ".trace", trace)
    _log(f"wrote {config.out} (final loss {trace[-1][1]:.6g})")
    return 0


def _cmd_interpolate(config):
    paths = _checkpoint_list(config.checkpoint)
    weights = _parse_weights(config.weights)
    param_sets = [_load_params(p) for p in paths]
    blended = adapt_mod.interpolate(param_sets, weights)
    ckpt = data.Checkpoint(params=blended, optimizer_state={}, iteration=0,
                           config={"interpolated_from": paths, "weights": weights})
    data.save_checkpoint(ckpt, config.out)
    _log(f"wrote {config.out}")
    return 0


def _cmd_video(config):
    params = _load_params(config.checkpoint)
    count = adapt_mod.stylize_video(params, config.content_dir, config.out)
    _log(f"stylized {count} frame(s) into {config.out}")
    print(count)
    return 0


def _cmd_benchmark(config):
    params = _load_params(config.checkpoint)
    gen = torch.Generator().manual_seed(config.seed)
    print("# resolution ms_per_image")
    for resolution in BENCHMARK_RESOLUTIONS:
        image = torch.rand(3, resolution, resolution, generator=gen)
        with torch.no_grad():
            for _ in range(BENCHMARK_WARMUP):
                transform.forward(params, image)
            started = time.perf_counter()
            for _ in range(BENCHMARK_RUNS):
                transform.forward(params, image)
            elapsed = time.perf_counter() - started
        print(f"{resolution} {elapsed / BENCHMARK_RUNS * 1000.0:.3f}")
    return 0


_DISPATCH = {
    "meta-train": _cmd_meta_train,
    "adapt": _cmd_adapt,
    "stylize": _cmd_stylize,
    "optimize": _cmd_optimize,
    "interpolate": _cmd_interpolate,
    "video": _cmd_video,
    "benchmark": _cmd_benchmark,
}


def run(config):
    """Dispatch a parsed RunConfig; returns the process exit code."""
    try:
        return _DISPATCH[config.command](config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StyleAdaptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config = parse_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
