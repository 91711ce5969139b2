"""Rainfall rate estimation with calibrated uncertainty from lidar point clouds."""

from .errors import FileFormatError, InvalidInputError, NumericalError, TrainingError
from .features import (
    FEATURE_NAMES,
    CropBox,
    FeatureStats,
    Scan,
    ScanFeatures,
    WindowSample,
    crop,
    mst_length,
    normalized_mst,
    scan_features,
    standardize_apply,
    standardize_fit,
    standardize_invert,
    uniform_mst_reference,
    window_features,
)
from .moe import (
    EvaluationReport,
    FilteredMetrics,
    MixturePrediction,
    MoEModel,
    TrainConfig,
    TreeSpec,
    build_tree_spec,
    error_probability,
    evaluate,
    filter_by_uncertainty,
    infer,
    mixture_cdf,
    mixture_density,
    point_estimate,
    predict_batch,
    summarize_predictions,
    train,
)
from .pipeline import (
    Dataset,
    RainSeries,
    WindowingResult,
    assemble_dataset,
    make_windows,
    measurement_volatility,
    preprocess,
    savgol,
    segment_spans,
    split_validation,
    target_for_window,
    trim_segments,
)
from .synth import (
    DisturbanceParams,
    NoiseRegimeParams,
    RainProfile,
    RegimeParams,
    SegmentSpec,
    SensorSpec,
    default_profile,
    default_regime_params,
    generate_scan,
    generate_session,
    profile_rate,
)
from .vblearn import (
    BasisConfig,
    ExpertPosterior,
    GatePosterior,
    GaussianPrediction,
    apply_basis,
    design_matrix,
    fit_vb_linear,
    fit_vb_logistic,
    kappa,
    lambda_jj,
    predict_expert,
    predict_gate,
)

__version__ = "0.1.0"
