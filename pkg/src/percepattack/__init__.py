"""Adversarial rank-flip attacks and a 2AFC benchmark harness for perceptual
image-similarity metrics."""

__version__ = "0.1.0"

from .attacks import (
    AttackError,
    AttackOutcome,
    PreySelection,
    Triplet,
    combined_stadv_pgd,
    fgsm_attack,
    flow_smoothness,
    one_pixel_attack,
    perturbation_stats,
    pgd_attack,
    pgd_fixed_iterations,
    rank_loss,
    reverse_pgd_attack,
    select_prey,
    stadv_attack,
    stadv_rank_loss,
)
from .bench import (
    AttackConfig,
    BenchmarkReport,
    TransferReport,
    derive_seed,
    evaluate_2afc_accuracy,
    margin_statistics,
    run_attack_benchmark,
    run_transfer_benchmark,
    select_unanimous,
)
from .dataio import (
    DataError,
    ingest_bapps,
    ingest_manifest,
    load_png,
    read_npy_scalar,
    resize_bilinear,
    save_png,
    write_npy_scalar,
)
from .engine import GradientError, ShapeError, Tensor, backward, gradient
from .gradcheck import central_difference_gradient, metric_gradcheck
from .metrics import (
    ConvMetricDistance,
    ConvMetricWeights,
    L2Distance,
    LayerSpec,
    Metric,
    MetricError,
    MsssimDistance,
    SsimDistance,
    WeightsFormatError,
    load_conv_weights,
    make_metric,
    save_conv_weights,
)
from .optim import DeConfig, LbfgsConfig, OptimError, differential_evolution, lbfgs_minimize
from .reports import emit_report, emit_transfer_report

__all__ = [
    "AttackConfig", "AttackError", "AttackOutcome", "BenchmarkReport",
    "ConvMetricDistance", "ConvMetricWeights", "DataError", "DeConfig",
    "GradientError", "L2Distance", "LayerSpec", "LbfgsConfig", "Metric",
    "MetricError", "MsssimDistance", "OptimError", "PreySelection",
    "ShapeError", "SsimDistance", "Tensor", "TransferReport", "Triplet",
    "WeightsFormatError", "backward", "central_difference_gradient",
    "combined_stadv_pgd", "derive_seed", "differential_evolution",
    "emit_report", "emit_transfer_report", "evaluate_2afc_accuracy",
    "fgsm_attack", "flow_smoothness", "gradient", "ingest_bapps",
    "ingest_manifest", "lbfgs_minimize", "load_conv_weights", "load_png",
    "make_metric", "margin_statistics", "metric_gradcheck", "one_pixel_attack",
    "perturbation_stats", "pgd_attack", "pgd_fixed_iterations", "rank_loss",
    "read_npy_scalar", "resize_bilinear", "reverse_pgd_attack",
    "run_attack_benchmark", "run_transfer_benchmark", "save_conv_weights",
    "save_png", "select_prey", "select_unanimous", "stadv_attack",
    "stadv_rank_loss", "write_npy_scalar",
]
