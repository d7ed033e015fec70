"""Multi-granularity graph attention networks for traffic forecasting.

Speed series sampled at road sensors are windowed at several natural
periods (recent, hourly, daily, weekly), fused by temporal attention,
mixed across the road graph by a Chebyshev spectral filter, and read out
over the forecast horizon. Everything runs on a small reverse-mode
autodiff core over numpy; training, evaluation, an historical-average
baseline, and finite-difference verification are included, each also
reachable through the `gacan` command.
"""

from . import tensor
from .attention import (
    SCORE_MODES,
    AttentionParams,
    FusionParams,
    GranularityWindow,
    attention_coeffs,
    derive_streams,
    fuse,
    temporal_ma,
)
from .data import (
    GRANULARITIES,
    WINDOW_STYLES,
    GranularitySpec,
    NormStats,
    SpeedSeries,
    WindowedSample,
    extract_windows,
    granularity_strides,
    interpolate_missing,
    load_speeds,
    synth_distances,
    synth_generate,
    window_indices,
    write_distances,
    write_speeds,
)
from .errors import (
    ConfigError,
    ContractError,
    ConvergenceError,
    DataError,
    DimensionError,
    GacanError,
    NumericError,
    TrainingDivergenceError,
    ValidationError,
)
from .graph import (
    SpectralOperator,
    TrafficGraph,
    build_adjacency,
    cheb_conv,
    lambda_max,
    load_distances,
    normalized_laplacian,
    scaled_laplacian,
    spectral_oracle,
)
from .model import (
    GacanModel,
    ModelConfig,
    aca_forward,
    init_model,
    model_forward,
    sample_streams,
)
from .params import (
    ParameterStore,
    grad_check,
    grad_check_summary,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor, backward
from .training import (
    MODE_MASKS,
    Adam,
    BucketMetrics,
    DatasetSplits,
    MetricsReport,
    TrainConfig,
    ablate,
    evaluate,
    ha_baseline,
    ha_predictor,
    mae,
    model_predictor,
    prepare_dataset,
    rmse,
    train,
    write_history,
)

__version__ = "0.1.0"

__all__ = [
    "tensor",
    "Tensor",
    "backward",
    "SCORE_MODES",
    "AttentionParams",
    "FusionParams",
    "GranularityWindow",
    "attention_coeffs",
    "derive_streams",
    "fuse",
    "temporal_ma",
    "GRANULARITIES",
    "WINDOW_STYLES",
    "GranularitySpec",
    "NormStats",
    "SpeedSeries",
    "WindowedSample",
    "extract_windows",
    "granularity_strides",
    "interpolate_missing",
    "load_speeds",
    "synth_distances",
    "synth_generate",
    "window_indices",
    "write_distances",
    "write_speeds",
    "ConfigError",
    "ContractError",
    "ConvergenceError",
    "DataError",
    "DimensionError",
    "GacanError",
    "NumericError",
    "TrainingDivergenceError",
    "ValidationError",
    "SpectralOperator",
    "TrafficGraph",
    "build_adjacency",
    "cheb_conv",
    "lambda_max",
    "load_distances",
    "normalized_laplacian",
    "scaled_laplacian",
    "spectral_oracle",
    "GacanModel",
    "ModelConfig",
    "aca_forward",
    "init_model",
    "model_forward",
    "sample_streams",
    "ParameterStore",
    "grad_check",
    "grad_check_summary",
    "load_checkpoint",
    "save_checkpoint",
    "MODE_MASKS",
    "Adam",
    "BucketMetrics",
    "DatasetSplits",
    "MetricsReport",
    "TrainConfig",
    "ablate",
    "evaluate",
    "ha_baseline",
    "ha_predictor",
    "mae",
    "model_predictor",
    "prepare_dataset",
    "rmse",
    "train",
    "write_history",
]
