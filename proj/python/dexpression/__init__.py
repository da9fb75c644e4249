"""Python bindings for the dexpression C++ engine."""

from ._core import (
    INPUT_SIZE,
    ConfigError,
    DatasetError,
    DivergenceError,
    Error,
    FormatError,
    IoError,
    Model,
    ShapeError,
    check_layer,
    check_small_network,
    cross_entropy,
    extract_representative_frames,
    frame_differences,
    infer_shapes,
    load_image,
    make_folds,
    run_cli,
    select_representative_frames,
    softmax,
)

__all__ = [
    "INPUT_SIZE",
    "ConfigError",
    "DatasetError",
    "DivergenceError",
    "Error",
    "FormatError",
    "IoError",
    "Model",
    "ShapeError",
    "check_layer",
    "check_small_network",
    "cross_entropy",
    "extract_representative_frames",
    "frame_differences",
    "infer_shapes",
    "load_image",
    "make_folds",
    "run_cli",
    "select_representative_frames",
    "softmax",
]
