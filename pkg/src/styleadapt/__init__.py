"""Fast-adapting style transfer.

Meta-learns an initialization of a feed-forward image transformation network
so that a short burst of updates (about 200) specializes it to any style. The
unadapted network's output also serves as a strong starting image for
pixel-space optimization.
"""

from .adapt import (
    AdaptConfig,
    adapt_to_style,
    interpolate,
    optimize_image,
    stylize,
    stylize_video,
)
from .data import (
    Checkpoint,
    DatasetHandle,
    load_checkpoint,
    load_image,
    open_dataset,
    read_image,
    sample_batch,
    save_checkpoint,
    save_image,
    split_dataset,
)
from .errors import (
    CodecError,
    ConfigError,
    CorruptArchiveError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatVersionError,
    SchemaError,
    StyleAdaptError,
    WeightsLoadError,
)
from .meta import (
    MetaStepReport,
    MetaTrainConfig,
    inner_adapt,
    meta_gradient,
    meta_step,
    meta_train,
    outer_loss,
)
from .params import ParamSet
from .perceptual import (
    FeatureExtractor,
    LossBreakdown,
    PerceptualConfig,
    compute_style_grams,
    content_loss,
    extract_features,
    gram,
    image_gradient,
    load_feature_extractor,
    perceptual_loss,
    style_loss,
)
from .transform import (
    NetworkSpec,
    forward,
    init_params,
    param_count,
    sgd_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "Checkpoint", "CodecError", "ConfigError",
    "CorruptArchiveError", "DataError", "DatasetHandle", "DimensionError",
    "DivergenceError", "FeatureExtractor", "FormatVersionError",
    "LossBreakdown", "MetaStepReport", "MetaTrainConfig", "NetworkSpec",
    "ParamSet", "PerceptualConfig", "SchemaError", "StyleAdaptError",
    "WeightsLoadError", "adapt_to_style", "compute_style_grams",
    "content_loss", "extract_features", "forward", "gram", "image_gradient",
    "init_params", "inner_adapt", "interpolate", "load_checkpoint",
    "load_feature_extractor", "load_image", "meta_gradient", "meta_step",
    "meta_train", "open_dataset", "optimize_image", "outer_loss",
    "param_count", "perceptual_loss", "read_image", "sample_batch",
    "save_checkpoint", "save_image", "sgd_step", "split_dataset", "style_loss",
    "stylize", "stylize_video",
]
