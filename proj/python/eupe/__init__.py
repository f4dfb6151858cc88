"""Multi-teacher distillation of compact vision encoders."""

from ._eupe import (
    ContractError,
    ConfigError,
    DataError,
    DimensionError,
    Encoder,
    Error,
    FormatError,
    IoError,
    ParameterError,
    Run,
    ShapeMismatchError,
    StateError,
    TruncatedError,
    VersionError,
    ViTConfig,
    build_prototypes,
    class_token_loss,
    compute_stats,
    config_reference,
    cosine_lr,
    generate_corpus,
    knn_classify,
    linear_probe,
    normalize_features,
    parse_config,
    patch_token_loss,
    pca_rgb,
    pck,
    protocols,
    read_ppm,
    resize_image,
    write_ppm,
    write_teacher,
)

__version__ = "0.1.0"
